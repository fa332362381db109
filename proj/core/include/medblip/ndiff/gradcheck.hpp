#pragma once

#include <functional>
#include <map>
#include <string>

#include "medblip/ndiff/param_store.hpp"

namespace medblip::nd {

// Builds a scalar loss from parameters bound through the scope.
using LossFn = std::function<Var<double>(ParamScope<double>&)>;

struct FdReport {
  double max_relative_error = 0.0;
  std::map<std::string, double> per_parameter;  // max relative error per entry
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked_scalars = 0;
};

// Central differences (f(x+h) - f(x-h)) / 2h against reverse mode for every
// scalar of every non-frozen entry. Relative error per scalar is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Throws Error if two evaluations at the same point disagree.
FdReport finite_difference_check(const LossFn& loss_fn, ParamStore<double>& store, double h = 1e-5);

}  // namespace medblip::nd
