#include "medblip/ndiff/param_store.hpp"

namespace medblip::nd {

template <class T>
void ParamStore<T>::add(const std::string& name, Tensor<T> value, bool frozen) {
  if (name.empty()) throw Error("parameter name must not be empty");
  if (value.empty()) throw Error("parameter '" + name + "' has no storage");
  auto [it, inserted] = entries_.emplace(name, Entry{std::move(value), frozen});
  if (!inserted) throw Error("duplicate parameter name '" + name + "'");
}

template <class T>
auto ParamStore<T>::at(const std::string& name) const -> const Entry& {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

template <class T>
auto ParamStore<T>::at(const std::string& name) -> Entry& {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

template <class T>
void ParamStore<T>::assign(const std::string& name, Tensor<T> value) {
  Entry& e = at(name);
  if (e.value.shape() != value.shape()) {
    throw ShapeError("assign '" + name + "': shape " + to_string(value.shape()) + " != " +
                     to_string(e.value.shape()));
  }
  e.value = std::move(value);
}

template <class T>
std::size_t ParamStore<T>::set_frozen_prefix(const std::string& prefix, bool frozen) {
  std::size_t n = 0;
  for (auto it = entries_.lower_bound(prefix); it != entries_.end() && it->first.starts_with(prefix); ++it) {
    it->second.frozen = frozen;
    ++n;
  }
  return n;
}

template <class T>
std::vector<std::string> ParamStore<T>::names() const {
  std::vector<std::string> out;
  for (const auto& kv : entries_) out.push_back(kv.first);
  return out;
}

template <class T>
std::vector<std::string> ParamStore<T>::learnable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_)
    if (!e.frozen) out.push_back(name);
  return out;
}

template <class T>
std::size_t ParamStore<T>::total_scalars() const {
  std::size_t n = 0;
  for (const auto& kv : entries_) n += kv.second.value.numel();
  return n;
}

template <class T>
std::size_t ParamStore<T>::learnable_scalars() const {
  std::size_t n = 0;
  for (const auto& kv : entries_)
    if (!kv.second.frozen) n += kv.second.value.numel();
  return n;
}

template <class T>
Var<T> ParamScope<T>::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const auto& e = store_->at(name);
  Var<T> leaf(e.value, !inference_ && !e.frozen);
  bound_.emplace(name, leaf);
  return leaf;
}

template <class T>
std::map<std::string, Tensor<T>> ParamScope<T>::gradients(const Var<T>& loss) {
  backward(loss);
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, e] : store_->entries()) {
    if (e.frozen) continue;
    auto it = bound_.find(name);
    if (it == bound_.end() || it->second.grad().empty()) {
      out.emplace(name, Tensor<T>(e.value.shape()));
      continue;
    }
    const Tensor<T>& g = it->second.grad();
    if (!g.all_finite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
    out.emplace(name, g);
  }
  return out;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class ParamScope<float>;
template class ParamScope<double>;

}  // namespace medblip::nd
