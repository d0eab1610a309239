#include "twinseg/loss.hpp"

#include "twinseg/ops.hpp"

#include <stdexcept>
#include <string>

namespace twinseg {

LossMode parse_loss_mode(std::string_view name) {
  if (name == "dice") return LossMode::dice;
  if (name == "dice+ce") return LossMode::dice_ce;
  throw std::invalid_argument("unknown loss mode '" + std::string(name) + "' (expected dice or dice+ce)");
}

std::string_view loss_mode_name(LossMode mode) { return mode == LossMode::dice ? "dice" : "dice+ce"; }

Tensor one_hot(std::span<const LabelMap> labels, std::size_t num_classes) {
  if (labels.empty()) throw std::invalid_argument("one_hot: empty batch");
  const auto ext = labels.front().extent;
  const std::size_t V = labels.front().size();
  Tensor t(Shape{labels.size(), num_classes, ext[0], ext[1], ext[2]});
  double* out = t.data();
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n].extent != ext) throw std::invalid_argument("one_hot: label maps differ in extent");
    for (std::size_t i = 0; i < V; ++i) {
      const std::size_t c = labels[n].data[i];
      if (c >= num_classes) throw std::invalid_argument("one_hot: label " + std::to_string(c) + " out of range");
      out[(n * num_classes + c) * V + i] = 1.0;
    }
  }
  return t;
}

namespace {

void check_target(const Tensor& logits, const Tensor& target) {
  if (logits.dim() < 2 || logits.shape() != target.shape())
    throw std::invalid_argument("loss: logits " + shape_string(logits.shape()) + " and target " +
                                shape_string(target.shape()) + " differ");
  const std::size_t N = target.size(0), C = target.size(1), V = target.numel() / (N * C);
  const double* t = target.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < V; ++i) {
      double total = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double v = t[(n * C + c) * V + i];
        if (v != 0.0 && v != 1.0) throw std::invalid_argument("loss: target is not one-hot");
        total += v;
      }
      if (total != 1.0) throw std::invalid_argument("loss: target is not one-hot");
    }
}

}  // namespace

Tensor dice_loss(const Tensor& logits, const Tensor& target, double eps) {
  check_target(logits, target);
  Tensor p = softmax(logits, 1);
  Tensor intersection = sum_to_axis(mul(p, target), 1);
  Tensor denom = add(add(sum_to_axis(p, 1), sum_to_axis(target, 1)), eps);
  Tensor dice = div(add(mul(intersection, 2.0), eps), denom);
  return add(mul(mean(dice), -1.0), 1.0);
}

Tensor cross_entropy(const Tensor& logits, const Tensor& target) {
  check_target(logits, target);
  const double voxels = static_cast<double>(target.numel() / target.size(1));
  return mul(sum(mul(log_softmax(logits, 1), target)), -1.0 / voxels);
}

Tensor composite_loss(const Tensor& logits, const Tensor& target, LossMode mode) {
  Tensor d = dice_loss(logits, target);
  if (mode == LossMode::dice) return d;
  return add(d, cross_entropy(logits, target));
}

}  // namespace twinseg
