#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace twinseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const Tape* tape = nullptr;  // set for results recorded on a tape
  std::size_t tape_node = 0;

  void accumulate_grad(std::span<const double> g);
  std::span<double> grad_buffer();  // allocates zeros on demand
};

}  // namespace detail

/// Dense row-major tensor of doubles.
///
/// A Tensor is a reference-counted handle: copying it aliases the same
/// storage, and `clone()` makes an independent deep copy. Values are treated
/// as immutable once an op has consumed them; only parameters are updated in
/// place, by the optimizer and between tape lifetimes.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->value.size(); }

  std::span<const double> values() const { return impl_->value; }
  std::span<double> mutable_values() { return impl_->value; }
  const double* data() const { return impl_->value.data(); }
  double* data() { return impl_->value.data(); }
  double operator[](std::size_t i) const { return impl_->value[i]; }
  double item() const;

  Eigen::Map<const Eigen::VectorXd> vec() const {
    return {impl_->value.data(), static_cast<Eigen::Index>(impl_->value.size())};
  }
  Eigen::Map<Eigen::VectorXd> vec() {
    return {impl_->value.data(), static_cast<Eigen::Index>(impl_->value.size())};
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }
  /// Allocates (if needed) and zero-fills the gradient buffer.
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }

  bool on_tape() const { return impl_->tape != nullptr; }

  Tensor clone() const;
  Tensor detach() const { return clone(); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_tensor(std::shared_ptr<detail::TensorImpl>);

  std::shared_ptr<detail::TensorImpl> impl_;
};

Tensor make_tensor(std::shared_ptr<detail::TensorImpl> impl);

/// Append-only record of differentiable ops; backward replays it in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t record(const char* op, BackwardFn fn);
  void backward(const Tensor& loss);
  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t i) const { return nodes_.at(i).op; }
  void clear() { nodes_.clear(); }

  /// The tape ops are recorded on in this thread, or nullptr.
  static Tape* active();

 private:
  friend class TapeScope;
  struct Node {
    const char* op;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
};

/// Makes a tape the active one for the current thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on the current thread.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace twinseg
