#include "medblip/ndiff/optim.hpp"

#include <cmath>

namespace medblip::nd {

template <class T>
void AdamW<T>::step(ParamStore<T>& store, const std::map<std::string, Tensor<T>>& grads) {
  for (const auto& [name, g] : grads) {
    const auto& e = store.at(name);
    if (e.frozen) throw FreezeError("gradient supplied for frozen parameter '" + name + "'");
    if (g.shape() != e.value.shape()) {
      throw ShapeError("gradient for '" + name + "' has shape " + to_string(g.shape()) + ", parameter has " +
                       to_string(e.value.shape()));
    }
  }
  for (const auto& [name, e] : store.entries()) {
    if (!e.frozen && !grads.count(name)) throw Error("missing gradient for learnable parameter '" + name + "'");
  }

  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double decay = 1.0 - config_.lr * config_.weight_decay;

  for (const auto& [name, g] : grads) {
    auto& p = store.at(name).value.storage();
    auto [mi, new_m] = m_.try_emplace(name, g.shape());
    auto [vi, new_v] = v_.try_emplace(name, g.shape());
    auto& m = mi->second.storage();
    auto& v = vi->second.storage();
    const auto& gv = g.storage();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = gv[i];
      const double mn = b1 * m[i] + (1.0 - b1) * gi;
      const double vn = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mn);
      v[i] = static_cast<T>(vn);
      const double m_hat = mn / bc1;
      const double v_hat = vn / bc2;
      const double updated = p[i] * decay - config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      p[i] = static_cast<T>(updated);
    }
    if (!store.at(name).value.all_finite()) {
      throw NumericError("non-finite value in '" + name + "' after optimizer step " + std::to_string(step_));
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace medblip::nd
