#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tmrd {

// Seeded fixtures for the three gradient targets: supervised loss wrt
// weights, TMR loss wrt scaling coefficients, combined student objective
// wrt student weights.
struct GradcheckOptions {
  double h = 1e-5;
  std::uint64_t seed = 13;
  int images = 2;
  std::string target = "all";  // all | sup | tmr | student
  double threshold = 1e-4;
};

struct GradcheckResult {
  std::vector<std::pair<std::string, double>> max_rel_errors;
  bool passed(double threshold) const;
};

GradcheckResult run_gradcheck(const GradcheckOptions& opt);

}  // namespace tmrd
