#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "vitmerge/numkit.hpp"

namespace vitmerge {

enum class GroupKind { Embedding, Norm, Attention, MLP, Classifier, Gate };

inline const char* group_kind_name(GroupKind k) {
  switch (k) {
    case GroupKind::Embedding: return "Embedding";
    case GroupKind::Norm: return "Norm";
    case GroupKind::Attention: return "Attention";
    case GroupKind::MLP: return "MLP";
    case GroupKind::Classifier: return "Classifier";
    case GroupKind::Gate: return "Gate";
  }
  return "?";
}

/// Merge group of a parameter. `block` is meaningful for Attention and MLP
/// only and is -1 otherwise.
struct GroupTag {
  GroupKind kind = GroupKind::Embedding;
  int block = -1;

  friend bool operator==(const GroupTag&, const GroupTag&) = default;
};

template <class T>
struct Param {
  std::string name;
  GroupTag group;
  Tensor<T> value;
  /// Receives weight decay (matrices only; biases, norms, tokens do not).
  bool decay = false;

  friend bool operator==(const Param&, const Param&) = default;
};

/// Ordered, name-indexed collection of tensors. Order is canonical and is the
/// flattening order used by every merge and by checkpoints.
template <class T>
class ParamSet {
 public:
  void add(std::string name, GroupTag group, Tensor<T> value, bool decay) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, items_.size());
    items_.push_back({std::move(name), group, std::move(value), decay});
  }

  std::size_t size() const { return items_.size(); }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  Tensor<T>& operator[](const std::string& name) { return items_[index_of(name)].value; }
  const Tensor<T>& operator[](const std::string& name) const {
    return items_[index_of(name)].value;
  }

  Param<T>& item(std::size_t i) { return items_[i]; }
  const Param<T>& item(std::size_t i) const { return items_[i]; }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.value.size();
    return n;
  }

  /// Same names, tags, and shapes with all values zero.
  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& p : items_) out.add(p.name, p.group, Tensor<T>(p.value.shape()), p.decay);
    return out;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& p : items_) out.add(p.name, p.group, p.value.template cast<U>(), p.decay);
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.items_ == b.items_; }

 private:
  std::vector<Param<T>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace vitmerge
