#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace mbse3::propertysuite {

enum class FaultMode {
  kNone,
  /// Runs the rigid-fit properties without the determinant fix so the
  /// mirrored-points row fails on purpose (self-test of the suite).
  kKabschReflection,
};

struct PropertyResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

/// Self-generating check battery over the core guarantees: group algebra,
/// feature equivariance and invariances, rigid-fit recovery, loss gradients,
/// metric oracles, and scene determinism. Deterministic for a fixed seed.
std::vector<PropertyResult> run_property_suite(FaultMode fault, uint64_t seed);

/// Aligned pass/fail table, one property per row; returns true iff all pass.
bool print_property_table(const std::vector<PropertyResult>& results, std::ostream& out);

}  // namespace mbse3::propertysuite
