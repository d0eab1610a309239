#pragma once

#include "twinseg/volume.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <vector>

namespace twinseg {

struct AugmentConfig {
  bool enabled = true;
  double probability = 0.5;  // per transform
  double max_rotation_deg = 10.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
  double max_noise_sigma = 0.1;
  double max_bias_coefficient = 0.1;
  bool elastic = false;
  double elastic_sigma = 1.0;  // control-point displacement std, voxels
  std::size_t elastic_grid = 4;
};

/// Concrete draw of every random choice the augmentation pipeline makes.
struct AugmentPlan {
  std::array<bool, 3> flip{false, false, false};
  bool affine = false;
  std::array<double, 3> angles_deg{0.0, 0.0, 0.0};
  double scale = 1.0;
  bool elastic = false;
  std::size_t elastic_grid = 0;
  std::vector<double> elastic_displacement;  // [3][g][g][g]
  bool bias = false;
  std::array<double, 9> bias_coefficients{};  // z,y,x,z^2,y^2,x^2,zy,zx,yx
  bool noise = false;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;

  bool is_identity() const { return !flip[0] && !flip[1] && !flip[2] && !affine && !elastic && !bias && !noise; }
};

template <class URBG>
AugmentPlan draw_augment_plan(URBG& rng, const AugmentConfig& cfg) {
  AugmentPlan plan;
  if (!cfg.enabled) return plan;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto take = [&] { return u01(rng) < cfg.probability; };
  for (auto& f : plan.flip) f = take();
  if (take()) {
    plan.affine = true;
    std::uniform_real_distribution<double> angle(-cfg.max_rotation_deg, cfg.max_rotation_deg);
    for (auto& a : plan.angles_deg) a = angle(rng);
    plan.scale = std::uniform_real_distribution<double>(cfg.min_scale, cfg.max_scale)(rng);
  }
  if (cfg.elastic && take()) {
    plan.elastic = true;
    plan.elastic_grid = cfg.elastic_grid;
    std::normal_distribution<double> disp(0.0, cfg.elastic_sigma);
    plan.elastic_displacement.resize(3 * cfg.elastic_grid * cfg.elastic_grid * cfg.elastic_grid);
    for (auto& d : plan.elastic_displacement) d = disp(rng);
  }
  if (take()) {
    plan.bias = true;
    std::uniform_real_distribution<double> coef(-cfg.max_bias_coefficient, cfg.max_bias_coefficient);
    for (auto& c : plan.bias_coefficients) c = coef(rng);
  }
  if (take()) {
    plan.noise = true;
    plan.noise_sigma = std::uniform_real_distribution<double>(0.0, cfg.max_noise_sigma)(rng);
    plan.noise_seed = static_cast<std::uint64_t>(rng());
  }
  return plan;
}

/// Applies flips, then one combined affine/elastic resampling (trilinear for
/// the image, nearest for labels), then the bias field and noise (image only).
Volume apply_augment(const Volume& volume, const AugmentPlan& plan);

template <class URBG>
Volume augment(const Volume& volume, URBG& rng, const AugmentConfig& cfg) {
  return apply_augment(volume, draw_augment_plan(rng, cfg));
}

/// Mirrors image and labels along spatial axis 0 (depth), 1 or 2.
Volume flip(const Volume& volume, std::size_t axis);

}  // namespace twinseg
