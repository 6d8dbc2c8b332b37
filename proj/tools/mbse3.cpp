#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "mbse3/evalrun.hpp"
#include "mbse3/propertysuite.hpp"
#include "mbse3/runconfig.hpp"

namespace {

namespace fs = std::filesystem;
using namespace mbse3;

constexpr int kOk = 0;
constexpr int kPropertyFailure = 1;
constexpr int kConfigError = 2;
constexpr int kIoError = 3;
constexpr int kNumericError = 4;
constexpr int kMismatchError = 5;

void apply_thread_cap() {
  int cap = static_cast<int>(std::thread::hardware_concurrency());
  if (const char* text = std::getenv("MBSE3_THREADS")) {
    char* end = nullptr;
    const long parsed = std::strtol(text, &end, 10);
    if (end == text || *end != '\0' || parsed < 1) {
      std::cerr << "ignoring MBSE3_THREADS='" << text << "' (expected a positive integer)\n";
    } else {
      cap = static_cast<int>(parsed);
    }
  }
  Eigen::setNbThreads(std::max(1, cap));
}

runconfig::RunConfig build_config(const std::string& config_path,
                                  const std::vector<std::string>& overrides) {
  nlohmann::json doc = nlohmann::json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw runconfig::IoError("cannot open config file: " + config_path);
    doc = nlohmann::json::parse(in, nullptr, false);
    if (doc.is_discarded()) {
      throw runconfig::ConfigError("config: file '" + config_path + "' is not valid JSON");
    }
  }
  for (const std::string& assignment : overrides) runconfig::apply_override(doc, assignment);
  return runconfig::parse_run_config(doc);
}

std::vector<scenegen::SceneSample> load_split(const std::string& root, const std::string& split) {
  std::vector<std::string> files;
  try {
    files = scenegen::list_scene_files(root, split);
  } catch (const std::exception& e) {
    throw runconfig::IoError(std::string(e.what()) + " (run gen first?)");
  }
  std::vector<scenegen::SceneSample> scenes;
  scenes.reserve(files.size());
  for (const std::string& file : files) scenes.push_back(scenegen::load_scene(file));
  return scenes;
}

int count_lines(const std::string& path) {
  std::ifstream in(path);
  int lines = 0;
  std::string buffer;
  while (std::getline(in, buffer)) ++lines;
  return lines;
}

int cmd_gen(const runconfig::RunConfig& cfg, bool quiet) {
  const std::vector<std::pair<std::string, int>> splits = {
      {"train", cfg.data.train_scenes}, {"val", cfg.data.val_scenes},
      {"test", cfg.data.test_scenes}};
  for (const auto& [split, count] : splits) {
    if (count <= 0) continue;
    scenegen::write_dataset(cfg.scene, cfg.data.root, split, count);
  }
  if (!quiet) {
    std::cout << "wrote " << cfg.data.train_scenes << " train, " << cfg.data.val_scenes
              << " val, " << cfg.data.test_scenes << " test scenes under " << cfg.data.root
              << "\n";
  }
  return kOk;
}

int cmd_train(const runconfig::RunConfig& cfg, bool quiet) {
  const std::vector<scenegen::SceneSample> train_scenes = load_split(cfg.data.root, "train");
  std::vector<scenegen::SceneSample> val_scenes;
  if (fs::exists(fs::path(cfg.data.root) / "val")) {
    val_scenes = load_split(cfg.data.root, "val");
  }

  diff::ParamStore params;
  int first_epoch = 0;
  if (cfg.train.resume && fs::exists(cfg.paths.checkpoint)) {
    params = diff::load_checkpoint(cfg.paths.checkpoint);
    evalrun::check_params_match(params, cfg.trainer);
    if (fs::exists(cfg.paths.record)) first_epoch = count_lines(cfg.paths.record);
    if (!quiet) {
      std::cout << "resuming from " << cfg.paths.checkpoint << " at epoch " << first_epoch
                << "\n";
    }
  } else {
    trainer::register_model_params(params, cfg.trainer);
  }

  const trainer::TrainRecord record =
      trainer::train(train_scenes, val_scenes, cfg.trainer, params, cfg.paths.record, first_epoch);
  diff::save_checkpoint(params, cfg.paths.checkpoint);

  if (!quiet) {
    if (record.epochs.empty()) {
      std::cout << "nothing to train: record already lists " << first_epoch << " of "
                << cfg.trainer.epochs << " epochs\n";
    } else {
      const trainer::EpochStats& last = record.epochs.back();
      std::cout << "trained epochs " << first_epoch << ".." << last.epoch << " on "
                << train_scenes.size() << " scenes (seg loss " << last.seg_loss
                << ", motion loss " << last.motion_loss << ")\n";
    }
    std::cout << "checkpoint: " << cfg.paths.checkpoint << "\n";
  }
  return kOk;
}

int cmd_eval(const runconfig::RunConfig& cfg, bool quiet) {
  diff::ParamStore params;
  if (!cfg.eval.oracle) {
    if (!fs::exists(cfg.paths.checkpoint)) {
      throw runconfig::IoError("cannot open checkpoint: " + cfg.paths.checkpoint +
                               " (run train first?)");
    }
    params = diff::load_checkpoint(cfg.paths.checkpoint);
    evalrun::check_params_match(params, cfg.trainer);
  }
  const std::vector<scenegen::SceneSample> scenes = load_split(cfg.data.root, "test");

  const evalrun::EvalReport report = evalrun::evaluate_dataset(
      scenes, cfg.trainer, params, cfg.eval.refine_rounds, cfg.eval.oracle);
  evalrun::write_report_json(report, cfg.paths.report);
  evalrun::write_report_csv(report, cfg.paths.csv);

  if (!quiet) {
    const nlohmann::ordered_json aggregate = evalrun::report_json(report)["aggregate"];
    std::cout << "evaluated " << scenes.size() << " scenes"
              << (cfg.eval.oracle ? " (oracle)" : "") << ": AP " << aggregate["ap"]
              << ", mIoU " << aggregate["miou"] << ", EPE3D " << aggregate["epe3d"]
              << " (initial " << aggregate["initial_epe3d"] << "), angular "
              << aggregate["angular_error_deg"] << "\n";
    std::cout << "report: " << cfg.paths.report << "\ncsv: " << cfg.paths.csv << "\n";
  }
  return kOk;
}

int cmd_check(const runconfig::RunConfig& cfg, bool quiet) {
  const propertysuite::FaultMode fault = cfg.check.fault_injection == "kabsch-reflection"
                                             ? propertysuite::FaultMode::kKabschReflection
                                             : propertysuite::FaultMode::kNone;
  const std::vector<propertysuite::PropertyResult> results =
      propertysuite::run_property_suite(fault, cfg.seed);
  bool all_pass = true;
  if (quiet) {
    for (const propertysuite::PropertyResult& r : results) all_pass = all_pass && r.pass;
  } else {
    all_pass = propertysuite::print_property_table(results, std::cout);
  }
  if (!all_pass) {
    std::cerr << "failed properties:";
    for (const propertysuite::PropertyResult& r : results) {
      if (!r.pass) std::cerr << " " << r.name;
    }
    std::cerr << "\n";
    return kPropertyFailure;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-body rigid segmentation and motion toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  bool quiet = false;
  app.add_option("--config", config_path, "JSON run configuration file");
  app.add_option("--set", overrides, "override a config entry as dotted.key=value (repeatable)");
  app.add_flag("--quiet", quiet, "suppress informational output");

  CLI::App* gen = app.add_subcommand("gen", "write the train/val/test scene datasets");
  CLI::App* train = app.add_subcommand("train", "train a model on the generated dataset");
  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on the test split");
  CLI::App* check = app.add_subcommand("check", "run the self-check property suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  apply_thread_cap();

  try {
    if (config_path.empty() && !check->parsed()) {
      throw runconfig::ConfigError("config: --config <path> is required for this command");
    }
    const runconfig::RunConfig cfg = build_config(config_path, overrides);
    if (gen->parsed()) return cmd_gen(cfg, quiet);
    if (train->parsed()) return cmd_train(cfg, quiet);
    if (eval->parsed()) return cmd_eval(cfg, quiet);
    return cmd_check(cfg, quiet);
  } catch (const runconfig::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kConfigError;
  } catch (const evalrun::CheckpointMismatchError& e) {
    std::cerr << e.what() << "\n";
    return kMismatchError;
  } catch (const runconfig::IoError& e) {
    std::cerr << e.what() << "\n";
    return kIoError;
  } catch (const std::invalid_argument& e) {
    std::cerr << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return std::string(e.what()).find("non-finite") != std::string::npos ? kNumericError
                                                                         : kIoError;
  }
}
