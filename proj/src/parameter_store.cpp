#include "twinseg/parameter_store.hpp"

#include <cstring>
#include <stdexcept>

namespace twinseg {

void ParameterStore::add(const std::string& name, Tensor tensor, EntryKind kind) {
  if (!tensor.defined()) throw std::invalid_argument("ParameterStore: undefined tensor for '" + name + "'");
  if (contains(name)) throw std::invalid_argument("ParameterStore: duplicate entry '" + name + "'");
  tensor.set_requires_grad(kind == EntryKind::trainable);
  entries_.emplace(name, Entry{std::move(tensor), kind});
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParameterStore: no entry '" + name + "'");
  return it->second.tensor;
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParameterStore: no entry '" + name + "'");
  return it->second.tensor;
}

EntryKind ParameterStore::kind(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParameterStore: no entry '" + name + "'");
  return it->second.kind;
}

std::size_t ParameterStore::trainable_numel() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_)
    if (e.kind == EntryKind::trainable) n += e.tensor.numel();
  return n;
}

std::size_t ParameterStore::buffer_numel() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_)
    if (e.kind == EntryKind::buffer) n += e.tensor.numel();
  return n;
}

ParameterStore ParameterStore::clone() const {
  ParameterStore out;
  for (const auto& [name, e] : entries_) out.add(name, e.tensor.clone(), e.kind);
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& [name, e] : entries_)
    if (e.kind == EntryKind::trainable) e.tensor.zero_grad();
}

std::optional<std::string> ParameterStore::mismatch(const ParameterStore& other) const {
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end() && b != other.entries_.end(); ++a, ++b) {
    if (a->first != b->first) return "entry name '" + a->first + "' vs '" + b->first + "'";
    if (a->second.kind != b->second.kind) return "entry '" + a->first + "' kind differs";
    if (a->second.tensor.shape() != b->second.tensor.shape())
      return "entry '" + a->first + "' shape " + shape_string(a->second.tensor.shape()) + " vs " +
             shape_string(b->second.tensor.shape());
  }
  if (a != entries_.end()) return "entry '" + a->first + "' missing from other store";
  if (b != other.entries_.end()) return "entry '" + b->first + "' missing from this store";
  return std::nullopt;
}

bool ParameterStore::bit_equal(const ParameterStore& other) const {
  if (mismatch(other)) return false;
  auto b = other.entries_.begin();
  for (auto a = entries_.begin(); a != entries_.end(); ++a, ++b) {
    const auto& x = a->second.tensor;
    const auto& y = b->second.tensor;
    if (std::memcmp(x.data(), y.data(), x.numel() * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace twinseg
