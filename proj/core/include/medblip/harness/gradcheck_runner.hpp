#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "medblip/harness/config.hpp"
#include "medblip/ndiff/gradcheck.hpp"

namespace medblip::harness {

struct GradGroup {
  std::string name;
  nd::ParamStore<double> store;
  nd::LossFn loss;
};

struct GradGroupResult {
  std::string name;
  double max_relative_error = 0.0;
  std::map<std::string, double> per_parameter;
  std::size_t checked_scalars = 0;
  std::string failure;  // set when the check itself raised
  bool pass = false;
};

struct GradcheckReport {
  double tolerance = 1e-4;
  std::vector<GradGroupResult> groups;
  bool pass = false;
};

// Widths of at most 8, 8^3 volume with patch 4, one layer per stack, LoRA
// rank 2 on q/v.
RunConfig micro_config();

// One group per module in isolation plus the full objective. Parameters are
// redrawn at a larger scale than training init (and LoRA B is nonzero) so
// every path carries a gradient well above finite-difference noise.
std::vector<GradGroup> micro_groups(std::uint64_t seed);

GradcheckReport run_gradcheck(std::vector<GradGroup> groups, double h = 1e-5, double tolerance = 1e-4);
std::string format_gradcheck_report(const GradcheckReport& report);

}  // namespace medblip::harness
