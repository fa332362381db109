#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "medblip/ndiff/var.hpp"

namespace medblip::nd {

// Named parameters with per-entry frozen flags. Iteration is lexicographic by
// name, which fixes the order of every traversal (init, optimizer, save).
template <class T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> value;
    bool frozen = false;
  };

  explicit ParamStore(std::uint64_t rng_seed = 0) : rng_seed_(rng_seed) {}

  std::uint64_t rng_seed() const { return rng_seed_; }
  void set_rng_seed(std::uint64_t seed) { rng_seed_ = seed; }

  // Throws if the name is already registered.
  void add(const std::string& name, Tensor<T> value, bool frozen = false);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Entry& at(const std::string& name) const;
  Entry& at(const std::string& name);
  const Tensor<T>& value(const std::string& name) const { return at(name).value; }
  // Replaces the tensor; the shape must stay the same.
  void assign(const std::string& name, Tensor<T> value);
  void set_frozen(const std::string& name, bool frozen) { at(name).frozen = frozen; }
  // Sets the flag on every entry whose name starts with prefix; returns the count.
  std::size_t set_frozen_prefix(const std::string& prefix, bool frozen);

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::vector<std::string> names() const;
  std::vector<std::string> learnable_names() const;

  std::size_t total_scalars() const;
  std::size_t learnable_scalars() const;

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out(rng_seed_);
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>(), e.frozen);
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.rng_seed_ != b.rng_seed_ || a.entries_.size() != b.entries_.size()) return false;
    auto ia = a.entries_.begin();
    for (auto ib = b.entries_.begin(); ib != b.entries_.end(); ++ia, ++ib) {
      if (ia->first != ib->first || ia->second.frozen != ib->second.frozen ||
          !(ia->second.value == ib->second.value))
        return false;
    }
    return true;
  }

 private:
  std::map<std::string, Entry> entries_;
  std::uint64_t rng_seed_;
};

// Binds store entries into one computation graph as leaf Vars. Frozen entries
// (or every entry, in inference mode) become constants.
template <class T>
class ParamScope {
 public:
  explicit ParamScope(const ParamStore<T>& store, bool inference = false)
      : store_(&store), inference_(inference) {}

  // Leaf for the named entry; repeated calls return the same leaf.
  Var<T> operator()(const std::string& name);
  bool contains(const std::string& name) const { return store_->contains(name); }
  const ParamStore<T>& store() const { return *store_; }
  bool inference() const { return inference_; }

  // Backpropagates from loss and returns one gradient per non-frozen entry;
  // entries not reached by the loss map to zeros. Throws NumericError naming
  // the parameter if a gradient is non-finite.
  std::map<std::string, Tensor<T>> gradients(const Var<T>& loss);

 private:
  const ParamStore<T>* store_;
  bool inference_;
  std::map<std::string, Var<T>> bound_;
};

}  // namespace medblip::nd
