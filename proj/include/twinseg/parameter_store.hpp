#pragma once

#include "twinseg/tensor.hpp"

#include <map>
#include <optional>
#include <string>

namespace twinseg {

enum class EntryKind { trainable, buffer };

/// Named model state: trainable tensors plus non-trainable buffers
/// (batch-norm running statistics). Iteration is name-sorted, so every copy
/// of a store walks its entries in the same order.
class ParameterStore {
 public:
  struct Entry {
    Tensor tensor;
    EntryKind kind;
  };
  using Map = std::map<std::string, Entry>;

  void add(const std::string& name, Tensor tensor, EntryKind kind);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  EntryKind kind(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  /// Scalar counts.
  std::size_t trainable_numel() const;
  std::size_t buffer_numel() const;
  std::size_t total_numel() const { return trainable_numel() + buffer_numel(); }

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }
  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }

  /// Independent copy of every value; gradients are not carried over.
  ParameterStore clone() const;
  /// Allocates zero-filled gradients on every trainable entry.
  void zero_grad();

  /// Describes the first entry that prevents aggregation with `other`, if any.
  std::optional<std::string> mismatch(const ParameterStore& other) const;
  bool compatible_with(const ParameterStore& other) const { return !mismatch(other).has_value(); }

  /// Bitwise equality of names, kinds, shapes and values.
  bool bit_equal(const ParameterStore& other) const;

 private:
  Map entries_;
};

}  // namespace twinseg
