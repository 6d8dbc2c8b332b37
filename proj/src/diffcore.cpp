#include "mbse3/diffcore.hpp"

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace mbse3::diff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

int shape_product(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

/// Right-aligned broadcasting plan for rank <= 4 operands; stride 0 marks a
/// broadcast axis.
struct BroadcastPlan {
  int rank = 0;
  std::array<int, 4> shape{};
  std::array<size_t, 4> stride_a{};
  std::array<size_t, 4> stride_b{};
  size_t total = 1;
  std::vector<int> out_shape;
};

BroadcastPlan make_broadcast_plan(const std::vector<int>& a, const std::vector<int>& b) {
  const int rank = std::max(static_cast<int>(a.size()), static_cast<int>(b.size()));
  if (rank > 4) throw std::invalid_argument("broadcasting supports rank <= 4");
  BroadcastPlan plan;
  plan.rank = rank;
  std::array<int, 4> da{}, db{};
  da.fill(1);
  db.fill(1);
  for (int i = 0; i < static_cast<int>(a.size()); ++i)
    da[rank - static_cast<int>(a.size()) + i] = a[i];
  for (int i = 0; i < static_cast<int>(b.size()); ++i)
    db[rank - static_cast<int>(b.size()) + i] = b[i];
  size_t sa = 1, sb = 1;
  std::array<size_t, 4> full_a{}, full_b{};
  for (int d = rank - 1; d >= 0; --d) {
    full_a[d] = sa;
    full_b[d] = sb;
    sa *= static_cast<size_t>(da[d]);
    sb *= static_cast<size_t>(db[d]);
  }
  for (int d = 0; d < rank; ++d) {
    if (da[d] != db[d] && da[d] != 1 && db[d] != 1) {
      throw std::invalid_argument("incompatible shapes for broadcasting");
    }
    plan.shape[d] = std::max(da[d], db[d]);
    plan.stride_a[d] = (da[d] == 1 && plan.shape[d] > 1) ? 0 : full_a[d];
    plan.stride_b[d] = (db[d] == 1 && plan.shape[d] > 1) ? 0 : full_b[d];
    plan.total *= static_cast<size_t>(plan.shape[d]);
    plan.out_shape.push_back(plan.shape[d]);
  }
  if (plan.out_shape.empty()) plan.out_shape.push_back(1);
  return plan;
}

template <typename F>
void broadcast_walk(const BroadcastPlan& plan, F&& visit) {
  std::array<int, 4> idx{};
  size_t offa = 0, offb = 0;
  for (size_t e = 0; e < plan.total; ++e) {
    visit(e, offa, offb);
    for (int d = plan.rank - 1; d >= 0; --d) {
      ++idx[d];
      offa += plan.stride_a[d];
      offb += plan.stride_b[d];
      if (idx[d] < plan.shape[d]) break;
      offa -= plan.stride_a[d] * static_cast<size_t>(plan.shape[d]);
      offb -= plan.stride_b[d] * static_cast<size_t>(plan.shape[d]);
      idx[d] = 0;
    }
  }
}

/// out(+)= opA(A) * opB(B) for rank-2 operands or rank-3 with equal leading
/// batch; the transpose flags apply to the trailing two axes.
void gemm_accumulate(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& out) {
  const int ra = a.rank(), rb = b.rank();
  if (!((ra == 2 && rb == 2) || (ra == 3 && rb == 3))) {
    throw std::invalid_argument("matmul expects two rank-2 or two rank-3 tensors");
  }
  const int batch = ra == 3 ? a.dim(0) : 1;
  if (ra == 3 && a.dim(0) != b.dim(0)) {
    throw std::invalid_argument("batch matmul requires equal leading dimensions");
  }
  const int ar = a.dim(ra - 2), ac = a.dim(ra - 1);
  const int br = b.dim(rb - 2), bc = b.dim(rb - 1);
  const int m = ta ? ac : ar;
  const int k = ta ? ar : ac;
  const int k2 = tb ? bc : br;
  const int n = tb ? br : bc;
  if (k != k2) throw std::invalid_argument("matmul inner dimensions disagree");

  const size_t stride_a = static_cast<size_t>(ar) * ac;
  const size_t stride_b = static_cast<size_t>(br) * bc;
  const size_t stride_o = static_cast<size_t>(m) * n;
  for (int s = 0; s < batch; ++s) {
    ConstMapMat ma(a.data() + s * stride_a, ar, ac);
    ConstMapMat mb(b.data() + s * stride_b, br, bc);
    MapMat mo(out.data() + s * stride_o, m, n);
    if (!ta && !tb)
      mo.noalias() += ma * mb;
    else if (ta && !tb)
      mo.noalias() += ma.transpose() * mb;
    else if (!ta && tb)
      mo.noalias() += ma * mb.transpose();
    else
      mo.noalias() += ma.transpose() * mb.transpose();
  }
}

std::vector<int> matmul_shape(const Tensor& a, bool ta, const Tensor& b, bool tb) {
  const int ra = a.rank();
  const int m = ta ? a.dim(ra - 1) : a.dim(ra - 2);
  const int n = tb ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
  if (ra == 3) return {a.dim(0), m, n};
  return {m, n};
}

}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)),
      size_(shape_product(shape_)),
      data_(std::make_shared<std::vector<double>>(size_, 0.0)) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), size_(shape_product(shape_)) {
  if (static_cast<int>(values.size()) != size_) {
    throw std::invalid_argument("value count does not match tensor shape");
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros_like(const Tensor& other) { return Tensor(other.shape_); }

double Tensor::value() const {
  if (size_ != 1) throw std::logic_error("value() requires a single-element tensor");
  return (*data_)[0];
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_product(shape) != size_) {
    throw std::invalid_argument("reshape must preserve the element count");
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.size_ = size_;
  out.data_ = data_;
  return out;
}

bool Tensor::all_finite() const {
  for (int i = 0; i < size_; ++i) {
    if (!std::isfinite((*data_)[i])) return false;
  }
  return true;
}

void ParamStore::register_param(const std::string& name, Tensor init) {
  if (entries_.count(name)) throw std::invalid_argument("parameter already registered: " + name);
  Entry e;
  e.moment1 = Tensor::zeros_like(init);
  e.moment2 = Tensor::zeros_like(init);
  e.value = std::move(init);
  entries_.emplace(name, std::move(e));
}

bool ParamStore::contains(const std::string& name) const { return entries_.count(name) > 0; }

const Tensor& ParamStore::value(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second.value;
}

void ParamStore::set_value(const std::string& name, Tensor v) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  if (v.shape() != it->second.value.shape()) {
    throw std::invalid_argument("shape change rejected for parameter: " + name);
  }
  it->second.value = std::move(v);
}

long ParamStore::step_count(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second.step;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, entry] : entries_) out.push_back(name);
  return out;
}

void adam_step(ParamStore& store, const std::map<std::string, Tensor>& grads, double lr) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  for (const auto& [name, grad] : grads) {
    auto it = store.entries_.find(name);
    if (it == store.entries_.end()) throw std::out_of_range("gradient for unknown parameter: " + name);
    if (grad.shape() != it->second.value.shape()) {
      throw std::invalid_argument("gradient shape mismatch for parameter: " + name);
    }
    if (!grad.all_finite()) {
      throw std::runtime_error("non-finite gradient for parameter: " + name);
    }
  }
  for (auto& [name, entry] : store.entries_) {
    entry.step += 1;
    const auto git = grads.find(name);
    const double t = static_cast<double>(entry.step);
    const double corr1 = 1.0 - std::pow(kBeta1, t);
    const double corr2 = 1.0 - std::pow(kBeta2, t);
    double* value = entry.value.data();
    double* m1 = entry.moment1.data();
    double* m2 = entry.moment2.data();
    const double* g = git == grads.end() ? nullptr : git->second.data();
    for (int i = 0; i < entry.value.size(); ++i) {
      const double gi = g ? g[i] : 0.0;
      m1[i] = kBeta1 * m1[i] + (1.0 - kBeta1) * gi;
      m2[i] = kBeta2 * m2[i] + (1.0 - kBeta2) * gi * gi;
      value[i] -= lr * (m1[i] / corr1) / (std::sqrt(m2[i] / corr2) + kEps);
    }
  }
}

void save_checkpoint(const ParamStore& store, const std::string& path) {
  nlohmann::ordered_json doc;
  for (const std::string& name : store.names()) {
    const Tensor& t = store.value(name);
    nlohmann::ordered_json entry;
    entry["shape"] = t.shape();
    entry["values"] = std::vector<double>(t.data(), t.data() + t.size());
    doc[name] = std::move(entry);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << doc.dump(1) << "\n";
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  nlohmann::json doc = nlohmann::json::parse(in);
  ParamStore store;
  for (const auto& [name, entry] : doc.items()) {
    store.register_param(name, Tensor(entry.at("shape").get<std::vector<int>>(),
                                      entry.at("values").get<std::vector<double>>()));
  }
  return store;
}

int Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::input(Tensor t) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(t);
  n.needs_grad = false;
  return push(std::move(n));
}

int Tape::leaf(Tensor t) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(t);
  n.needs_grad = true;
  return push(std::move(n));
}

int Tape::param(const ParamStore& store, const std::string& name) {
  Node n;
  n.op = Op::kLeaf;
  n.value = store.value(name);
  n.needs_grad = true;
  n.param_name = name;
  return push(std::move(n));
}

const Tensor& Tape::val(int id) const { return nodes_[static_cast<size_t>(id)].value; }

int Tape::matmul(int a, int b, bool transpose_a, bool transpose_b) {
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {a, b};
  n.transpose_a = transpose_a;
  n.transpose_b = transpose_b;
  n.value = Tensor(matmul_shape(val(a), transpose_a, val(b), transpose_b));
  gemm_accumulate(val(a), transpose_a, val(b), transpose_b, n.value);
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

int Tape::add(int a, int b) {
  const auto plan = make_broadcast_plan(val(a).shape(), val(b).shape());
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a, b};
  n.value = Tensor(plan.out_shape);
  const double* pa = val(a).data();
  const double* pb = val(b).data();
  double* po = n.value.data();
  broadcast_walk(plan, [&](size_t e, size_t oa, size_t ob) { po[e] = pa[oa] + pb[ob]; });
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

int Tape::sub(int a, int b) {
  const auto plan = make_broadcast_plan(val(a).shape(), val(b).shape());
  Node n;
  n.op = Op::kSub;
  n.inputs = {a, b};
  n.value = Tensor(plan.out_shape);
  const double* pa = val(a).data();
  const double* pb = val(b).data();
  double* po = n.value.data();
  broadcast_walk(plan, [&](size_t e, size_t oa, size_t ob) { po[e] = pa[oa] - pb[ob]; });
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

int Tape::mul(int a, int b) {
  const auto plan = make_broadcast_plan(val(a).shape(), val(b).shape());
  Node n;
  n.op = Op::kMul;
  n.inputs = {a, b};
  n.value = Tensor(plan.out_shape);
  const double* pa = val(a).data();
  const double* pb = val(b).data();
  double* po = n.value.data();
  broadcast_walk(plan, [&](size_t e, size_t oa, size_t ob) { po[e] = pa[oa] * pb[ob]; });
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

int Tape::div(int a, int b) {
  const auto plan = make_broadcast_plan(val(a).shape(), val(b).shape());
  Node n;
  n.op = Op::kDiv;
  n.inputs = {a, b};
  n.value = Tensor(plan.out_shape);
  const double* pa = val(a).data();
  const double* pb = val(b).data();
  double* po = n.value.data();
  broadcast_walk(plan, [&](size_t e, size_t oa, size_t ob) { po[e] = pa[oa] / pb[ob]; });
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

int Tape::affine(int a, double scale, double shift) {
  Node n;
  n.op = Op::kAffine;
  n.inputs = {a};
  n.scale = scale;
  n.shift = shift;
  n.value = Tensor(val(a).shape());
  const double* pa = val(a).data();
  double* po = n.value.data();
  for (int i = 0; i < n.value.size(); ++i) po[i] = scale * pa[i] + shift;
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

int Tape::leaky_relu(int a, double negative_slope) {
  Node n;
  n.op = Op::kLeakyRelu;
  n.inputs = {a};
  n.scale = negative_slope;
  n.value = Tensor(val(a).shape());
  const double* pa = val(a).data();
  double* po = n.value.data();
  for (int i = 0; i < n.value.size(); ++i) po[i] = pa[i] > 0.0 ? pa[i] : negative_slope * pa[i];
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

int Tape::log(int a) {
  Node n;
  n.op = Op::kLog;
  n.inputs = {a};
  n.value = Tensor(val(a).shape());
  const double* pa = val(a).data();
  double* po = n.value.data();
  for (int i = 0; i < n.value.size(); ++i) po[i] = std::log(pa[i]);
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

int Tape::exp(int a) {
  Node n;
  n.op = Op::kExp;
  n.inputs = {a};
  n.value = Tensor(val(a).shape());
  const double* pa = val(a).data();
  double* po = n.value.data();
  for (int i = 0; i < n.value.size(); ++i) po[i] = std::exp(pa[i]);
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

int Tape::softmax(int a) {
  Node n;
  n.op = Op::kSoftmax;
  n.inputs = {a};
  n.value = Tensor(val(a).shape());
  const int cols = val(a).dim(val(a).rank() - 1);
  const int rows = val(a).size() / cols;
  const double* pa = val(a).data();
  double* po = n.value.data();
  for (int r = 0; r < rows; ++r) {
    const double* x = pa + static_cast<size_t>(r) * cols;
    double* y = po + static_cast<size_t>(r) * cols;
    double peak = x[0];
    for (int c = 1; c < cols; ++c) peak = std::max(peak, x[c]);
    double total = 0.0;
    for (int c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - peak);
      total += y[c];
    }
    for (int c = 0; c < cols; ++c) y[c] /= total;
  }
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

int Tape::log_softmax(int a) {
  Node n;
  n.op = Op::kLogSoftmax;
  n.inputs = {a};
  n.value = Tensor(val(a).shape());
  const int cols = val(a).dim(val(a).rank() - 1);
  const int rows = val(a).size() / cols;
  const double* pa = val(a).data();
  double* po = n.value.data();
  for (int r = 0; r < rows; ++r) {
    const double* x = pa + static_cast<size_t>(r) * cols;
    double* y = po + static_cast<size_t>(r) * cols;
    double peak = x[0];
    for (int c = 1; c < cols; ++c) peak = std::max(peak, x[c]);
    double total = 0.0;
    for (int c = 0; c < cols; ++c) total += std::exp(x[c] - peak);
    const double lse = peak + std::log(total);
    for (int c = 0; c < cols; ++c) y[c] = x[c] - lse;
  }
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

int Tape::max_over_axis(int a, int axis) {
  const Tensor& x = val(a);
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("max axis out of range");
  std::vector<int> out_shape;
  for (int d = 0; d < x.rank(); ++d) {
    if (d != axis) out_shape.push_back(x.dim(d));
  }
  if (out_shape.empty()) out_shape.push_back(1);

  int outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const int span = x.dim(axis);

  Node n;
  n.op = Op::kMaxOverAxis;
  n.inputs = {a};
  n.axis = axis;
  n.value = Tensor(out_shape);
  n.index.resize(static_cast<size_t>(outer) * inner);
  const double* px = x.data();
  double* po = n.value.data();
  for (int o = 0; o < outer; ++o) {
    for (int i = 0; i < inner; ++i) {
      size_t best_pos = (static_cast<size_t>(o) * span) * inner + i;
      double best = px[best_pos];
      for (int t = 1; t < span; ++t) {
        const size_t pos = (static_cast<size_t>(o) * span + t) * inner + i;
        if (px[pos] > best) {
          best = px[pos];
          best_pos = pos;
        }
      }
      const size_t out_pos = static_cast<size_t>(o) * inner + i;
      po[out_pos] = best;
      n.index[out_pos] = static_cast<int>(best_pos);
    }
  }
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

int Tape::sum_all(int a) {
  Node n;
  n.op = Op::kSumAll;
  n.inputs = {a};
  const double* pa = val(a).data();
  double total = 0.0;
  for (int i = 0; i < val(a).size(); ++i) total += pa[i];
  n.value = Tensor::scalar(total);
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

int Tape::gather_rows(int a, std::vector<int> rows) {
  const Tensor& x = val(a);
  if (x.rank() != 2) throw std::invalid_argument("gather_rows expects a rank-2 tensor");
  const int cols = x.dim(1);
  for (int r : rows) {
    if (r < 0 || r >= x.dim(0)) throw std::out_of_range("gather_rows index out of range");
  }
  Node n;
  n.op = Op::kGatherRows;
  n.inputs = {a};
  n.value = Tensor({static_cast<int>(rows.size()), cols});
  const double* px = x.data();
  double* po = n.value.data();
  for (size_t i = 0; i < rows.size(); ++i) {
    const double* src = px + static_cast<size_t>(rows[i]) * cols;
    std::copy(src, src + cols, po + i * cols);
  }
  n.index = std::move(rows);
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

int Tape::concat(int a, int b, int axis) {
  const Tensor& x = val(a);
  const Tensor& y = val(b);
  if (x.rank() != y.rank()) throw std::invalid_argument("concat rank mismatch");
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("concat axis out of range");
  for (int d = 0; d < x.rank(); ++d) {
    if (d != axis && x.dim(d) != y.dim(d)) throw std::invalid_argument("concat shape mismatch");
  }
  std::vector<int> out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] += y.dim(axis);

  int outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const size_t span_x = static_cast<size_t>(x.dim(axis)) * inner;
  const size_t span_y = static_cast<size_t>(y.dim(axis)) * inner;

  Node n;
  n.op = Op::kConcat;
  n.inputs = {a, b};
  n.axis = axis;
  n.value = Tensor(out_shape);
  double* po = n.value.data();
  for (int o = 0; o < outer; ++o) {
    const double* sx = x.data() + o * span_x;
    const double* sy = y.data() + o * span_y;
    double* dst = po + o * (span_x + span_y);
    std::copy(sx, sx + span_x, dst);
    std::copy(sy, sy + span_y, dst + span_x);
  }
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(n));
}

int Tape::reshape(int a, std::vector<int> shape) {
  Node n;
  n.op = Op::kReshape;
  n.inputs = {a};
  n.value = val(a).reshaped(std::move(shape));
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

int Tape::transpose2d(int a) {
  const Tensor& x = val(a);
  if (x.rank() != 2) throw std::invalid_argument("transpose2d expects a rank-2 tensor");
  Node n;
  n.op = Op::kTranspose2D;
  n.inputs = {a};
  n.value = Tensor({x.dim(1), x.dim(0)});
  ConstMapMat mx(x.data(), x.dim(0), x.dim(1));
  MapMat mo(n.value.data(), x.dim(1), x.dim(0));
  mo = mx.transpose();
  n.needs_grad = nodes_[a].needs_grad;
  return push(std::move(n));
}

void Tape::accumulate(int id, const Tensor& delta) {
  Node& node = nodes_[static_cast<size_t>(id)];
  if (!node.needs_grad) return;
  if (node.grad.empty()) node.grad = Tensor(node.value.shape());
  if (delta.size() != node.grad.size()) throw std::logic_error("gradient size mismatch");
  double* g = node.grad.data();
  const double* d = delta.data();
  for (int i = 0; i < node.grad.size(); ++i) g[i] += d[i];
}

void Tape::backward(int output) {
  Tensor ones(val(output).shape());
  double* p = ones.data();
  for (int i = 0; i < ones.size(); ++i) p[i] = 1.0;
  backward(output, ones);
}

void Tape::backward(int output, const Tensor& cotangent) {
  if (cotangent.shape() != val(output).shape()) {
    throw std::invalid_argument("cotangent shape must match the output");
  }
  if (!nodes_[static_cast<size_t>(output)].needs_grad) return;
  accumulate(output, cotangent);
  for (int id = output; id >= 0; --id) {
    Node& node = nodes_[static_cast<size_t>(id)];
    if (!node.needs_grad || node.grad.empty() || node.op == Op::kLeaf) continue;
    backward_node(id);
  }
}

void Tape::backward_node(int id) {
  Node& node = nodes_[static_cast<size_t>(id)];
  const Tensor& g = node.grad;
  const double* pg = g.data();

  const auto binary_backward = [&](auto&& da, auto&& db) {
    const int a = node.inputs[0], b = node.inputs[1];
    const auto plan = make_broadcast_plan(val(a).shape(), val(b).shape());
    Tensor ga_buf, gb_buf;
    double* ga = nullptr;
    double* gb = nullptr;
    if (nodes_[a].needs_grad) {
      ga_buf = Tensor(val(a).shape());
      ga = ga_buf.data();
    }
    if (nodes_[b].needs_grad) {
      gb_buf = Tensor(val(b).shape());
      gb = gb_buf.data();
    }
    const double* pa = val(a).data();
    const double* pb = val(b).data();
    broadcast_walk(plan, [&](size_t e, size_t oa, size_t ob) {
      if (ga) ga[oa] += da(pg[e], pa[oa], pb[ob]);
      if (gb) gb[ob] += db(pg[e], pa[oa], pb[ob]);
    });
    if (ga) accumulate(a, ga_buf);
    if (gb) accumulate(b, gb_buf);
  };

  switch (node.op) {
    case Op::kLeaf:
      break;
    case Op::kMatmul: {
      const int a = node.inputs[0], b = node.inputs[1];
      const bool ta = node.transpose_a, tb = node.transpose_b;
      if (nodes_[a].needs_grad) {
        Tensor ga(val(a).shape());
        if (!ta)
          gemm_accumulate(g, false, val(b), !tb, ga);
        else
          gemm_accumulate(val(b), tb, g, true, ga);
        accumulate(a, ga);
      }
      if (nodes_[b].needs_grad) {
        Tensor gb(val(b).shape());
        if (!tb)
          gemm_accumulate(val(a), !ta, g, false, gb);
        else
          gemm_accumulate(g, true, val(a), ta, gb);
        accumulate(b, gb);
      }
      break;
    }
    case Op::kAdd:
      binary_backward([](double gg, double, double) { return gg; },
                      [](double gg, double, double) { return gg; });
      break;
    case Op::kSub:
      binary_backward([](double gg, double, double) { return gg; },
                      [](double gg, double, double) { return -gg; });
      break;
    case Op::kMul:
      binary_backward([](double gg, double, double bv) { return gg * bv; },
                      [](double gg, double av, double) { return gg * av; });
      break;
    case Op::kDiv:
      binary_backward([](double gg, double, double bv) { return gg / bv; },
                      [](double gg, double av, double bv) { return -gg * av / (bv * bv); });
      break;
    case Op::kAffine: {
      Tensor ga(val(node.inputs[0]).shape());
      double* p = ga.data();
      for (int i = 0; i < ga.size(); ++i) p[i] = pg[i] * node.scale;
      accumulate(node.inputs[0], ga);
      break;
    }
    case Op::kLeakyRelu: {
      const double* px = val(node.inputs[0]).data();
      Tensor ga(val(node.inputs[0]).shape());
      double* p = ga.data();
      for (int i = 0; i < ga.size(); ++i) p[i] = px[i] > 0.0 ? pg[i] : node.scale * pg[i];
      accumulate(node.inputs[0], ga);
      break;
    }
    case Op::kLog: {
      const double* px = val(node.inputs[0]).data();
      Tensor ga(val(node.inputs[0]).shape());
      double* p = ga.data();
      for (int i = 0; i < ga.size(); ++i) p[i] = pg[i] / px[i];
      accumulate(node.inputs[0], ga);
      break;
    }
    case Op::kExp: {
      const double* py = node.value.data();
      Tensor ga(val(node.inputs[0]).shape());
      double* p = ga.data();
      for (int i = 0; i < ga.size(); ++i) p[i] = pg[i] * py[i];
      accumulate(node.inputs[0], ga);
      break;
    }
    case Op::kSoftmax: {
      const double* py = node.value.data();
      const int cols = node.value.dim(node.value.rank() - 1);
      const int rows = node.value.size() / cols;
      Tensor ga(val(node.inputs[0]).shape());
      double* p = ga.data();
      for (int r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * cols;
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += pg[base + c] * py[base + c];
        for (int c = 0; c < cols; ++c) p[base + c] = py[base + c] * (pg[base + c] - dot);
      }
      accumulate(node.inputs[0], ga);
      break;
    }
    case Op::kLogSoftmax: {
      const double* py = node.value.data();
      const int cols = node.value.dim(node.value.rank() - 1);
      const int rows = node.value.size() / cols;
      Tensor ga(val(node.inputs[0]).shape());
      double* p = ga.data();
      for (int r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * cols;
        double total = 0.0;
        for (int c = 0; c < cols; ++c) total += pg[base + c];
        for (int c = 0; c < cols; ++c)
          p[base + c] = pg[base + c] - std::exp(py[base + c]) * total;
      }
      accumulate(node.inputs[0], ga);
      break;
    }
    case Op::kMaxOverAxis: {
      Tensor ga(val(node.inputs[0]).shape());
      double* p = ga.data();
      for (size_t o = 0; o < node.index.size(); ++o) p[node.index[o]] += pg[o];
      accumulate(node.inputs[0], ga);
      break;
    }
    case Op::kSumAll: {
      Tensor ga(val(node.inputs[0]).shape());
      double* p = ga.data();
      for (int i = 0; i < ga.size(); ++i) p[i] = pg[0];
      accumulate(node.inputs[0], ga);
      break;
    }
    case Op::kGatherRows: {
      const int cols = node.value.dim(1);
      Tensor ga(val(node.inputs[0]).shape());
      double* p = ga.data();
      for (size_t i = 0; i < node.index.size(); ++i) {
        double* dst = p + static_cast<size_t>(node.index[i]) * cols;
        const double* src = pg + i * cols;
        for (int c = 0; c < cols; ++c) dst[c] += src[c];
      }
      accumulate(node.inputs[0], ga);
      break;
    }
    case Op::kConcat: {
      const int a = node.inputs[0], b = node.inputs[1];
      const int axis = node.axis;
      int outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= val(a).dim(d);
      for (int d = axis + 1; d < val(a).rank(); ++d) inner *= val(a).dim(d);
      const size_t span_a = static_cast<size_t>(val(a).dim(axis)) * inner;
      const size_t span_b = static_cast<size_t>(val(b).dim(axis)) * inner;
      if (nodes_[a].needs_grad) {
        Tensor ga(val(a).shape());
        for (int o = 0; o < outer; ++o) {
          const double* src = pg + o * (span_a + span_b);
          std::copy(src, src + span_a, ga.data() + o * span_a);
        }
        accumulate(a, ga);
      }
      if (nodes_[b].needs_grad) {
        Tensor gb(val(b).shape());
        for (int o = 0; o < outer; ++o) {
          const double* src = pg + o * (span_a + span_b) + span_a;
          std::copy(src, src + span_b, gb.data() + o * span_b);
        }
        accumulate(b, gb);
      }
      break;
    }
    case Op::kReshape:
      accumulate(node.inputs[0], g.reshaped(val(node.inputs[0]).shape()));
      break;
    case Op::kTranspose2D: {
      Tensor ga(val(node.inputs[0]).shape());
      ConstMapMat mg(pg, node.value.dim(0), node.value.dim(1));
      MapMat ma(ga.data(), ga.dim(0), ga.dim(1));
      ma = mg.transpose();
      accumulate(node.inputs[0], ga);
      break;
    }
  }
}

Tensor Tape::grad(int id) const {
  const Node& node = nodes_[static_cast<size_t>(id)];
  if (node.grad.empty()) return Tensor(node.value.shape());
  return node.grad;
}

std::map<std::string, Tensor> Tape::param_grads() const {
  std::map<std::string, Tensor> out;
  for (const Node& node : nodes_) {
    if (node.op != Op::kLeaf || node.param_name.empty()) continue;
    Tensor g = node.grad.empty() ? Tensor(node.value.shape()) : node.grad;
    auto it = out.find(node.param_name);
    if (it == out.end()) {
      Tensor copy(g.shape());
      std::copy(g.data(), g.data() + g.size(), copy.data());
      out.emplace(node.param_name, std::move(copy));
    } else {
      double* acc = it->second.data();
      const double* src = g.data();
      for (int i = 0; i < g.size(); ++i) acc[i] += src[i];
    }
  }
  return out;
}

}  // namespace mbse3::diff
