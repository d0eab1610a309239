#pragma once

#include "twinseg/tensor.hpp"

#include <initializer_list>
#include <stdexcept>
#include <string>

namespace twinseg::detail {

using ImplPtr = std::shared_ptr<TensorImpl>;

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  return false;
}

/// Marks `out` as a tape result and registers its backward closure.
inline void attach(Tensor& out, const char* op, Tape::BackwardFn fn) {
  Tape* tape = Tape::active();
  auto& impl = *out.impl();
  impl.requires_grad = true;
  impl.tape = tape;
  impl.tape_node = tape->record(op, std::move(fn));
}

/// Input impl that should receive gradient, or nullptr.
inline ImplPtr grad_target(const Tensor& t) {
  return (t.defined() && t.requires_grad()) ? t.impl() : nullptr;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
}

}  // namespace twinseg::detail
