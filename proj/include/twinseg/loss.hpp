#pragma once

#include "twinseg/tensor.hpp"
#include "twinseg/volume.hpp"

#include <span>
#include <string_view>

namespace twinseg {

enum class LossMode { dice, dice_ce };

LossMode parse_loss_mode(std::string_view name);
std::string_view loss_mode_name(LossMode mode);

/// Stacks label maps into a one-hot target [N,classes,D,H,W].
Tensor one_hot(std::span<const LabelMap> labels, std::size_t num_classes);

/// 1 - mean_c (2 sum(p t) + eps) / (sum p + sum t + eps), p = softmax over
/// the class axis, sums over batch and voxels.
Tensor dice_loss(const Tensor& logits, const Tensor& target, double eps = 1e-5);

/// Voxel-mean cross entropy from log_softmax over the class axis.
Tensor cross_entropy(const Tensor& logits, const Tensor& target);

/// dice_loss + cross_entropy (1:1), or dice alone.
Tensor composite_loss(const Tensor& logits, const Tensor& target, LossMode mode = LossMode::dice_ce);

}  // namespace twinseg
