#include "twinseg/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace twinseg {

namespace {
thread_local Tape* active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

void TensorImpl::accumulate_grad(std::span<const double> g) {
  auto buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

std::span<double> TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

}  // namespace detail

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto e : shape)
    if (e == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_string(shape));
  impl_->value.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto e : shape)
    if (e == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_string(shape));
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("tensor shape " + shape_string(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  impl_->shape = std::move(shape);
  impl_->value = std::move(values);
}

Tensor make_tensor(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

double Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_string(shape()));
  return impl_->value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->value.size(), 0.0); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->value = impl_->value;
  return Tensor(std::move(impl));
}

std::size_t Tape::record(const char* op, BackwardFn fn) {
  nodes_.push_back(Node{op, std::move(fn)});
  return nodes_.size() - 1;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  const auto& impl = *loss.impl();
  if (impl.tape != this) throw std::invalid_argument("backward: loss was not recorded on this tape");
  const double one = 1.0;
  loss.impl()->accumulate_grad(std::span<const double>(&one, 1));
  for (std::size_t i = impl.tape_node + 1; i-- > 0;) nodes_[i].fn();
}

Tape* Tape::active() { return active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(active_tape) { active_tape = &tape; }
TapeScope::~TapeScope() { active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(active_tape) { active_tape = nullptr; }
NoGradScope::~NoGradScope() { active_tape = previous_; }

}  // namespace twinseg
