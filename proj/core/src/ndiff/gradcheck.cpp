#include "medblip/ndiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace medblip::nd {
namespace {

double evaluate(const LossFn& loss_fn, const ParamStore<double>& store) {
  ParamScope<double> scope(store, /*inference=*/true);
  return loss_fn(scope).value().item();
}

}  // namespace

FdReport finite_difference_check(const LossFn& loss_fn, ParamStore<double>& store, double h) {
  const double base = evaluate(loss_fn, store);
  if (evaluate(loss_fn, store) != base) throw Error("finite_difference_check: loss is not deterministic");

  std::map<std::string, Tensor<double>> analytic;
  {
    ParamScope<double> scope(store);
    Var<double> loss = loss_fn(scope);
    if (loss.value().item() != base) throw Error("finite_difference_check: loss is not deterministic");
    analytic = scope.gradients(loss);
  }

  FdReport report;
  for (const auto& [name, grad] : analytic) {
    double worst = 0.0;
    auto& values = store.at(name).value.storage();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = evaluate(loss_fn, store);
      values[i] = saved - h;
      const double down = evaluate(loss_fn, store);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = grad[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked_scalars;
      if (rel > worst) worst = rel;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_parameter = name;
        report.worst_index = i;
      }
    }
    report.per_parameter[name] = worst;
  }
  return report;
}

}  // namespace medblip::nd
