#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vpr {

struct SelfCheckOptions {
  std::uint64_t seed = 1;
  /// Perturbs fused backbone weights before the equivalence checks; the run
  /// must then fail.
  bool inject_fault = false;
};

struct SuiteResult {
  std::string module;
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelfCheckReport {
  std::vector<SuiteResult> suites;

  bool passed() const {
    for (const auto& s : suites) {
      if (!s.passed) return false;
    }
    return !suites.empty();
  }
};

/// Oracle comparisons across every module; independent of the unit tests.
SelfCheckReport run_selfcheck(const SelfCheckOptions& options = {});

}  // namespace vpr
