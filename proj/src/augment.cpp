#include "twinseg/augment.hpp"

#include "sampling.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace twinseg {

namespace {

detail::Extent3 spatial_extent(const Volume& v) {
  if (v.image.dim() != 4) throw std::invalid_argument("augment: image must be [M,D,H,W]");
  const detail::Extent3 e{v.image.size(1), v.image.size(2), v.image.size(3)};
  if (e != v.label.extent) throw std::invalid_argument("augment: image and label extents differ");
  return e;
}

Eigen::Matrix3d rotation(const std::array<double, 3>& deg) {
  const double k = std::numbers::pi / 180.0;
  return (Eigen::AngleAxisd(deg[0] * k, Eigen::Vector3d::UnitX()) *
          Eigen::AngleAxisd(deg[1] * k, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(deg[2] * k, Eigen::Vector3d::UnitZ()))
      .toRotationMatrix();
}

}  // namespace

Volume flip(const Volume& volume, std::size_t axis) {
  if (axis > 2) throw std::invalid_argument("flip: axis must be 0, 1 or 2");
  const auto e = spatial_extent(volume);
  Volume out = volume;
  out.image = volume.image.clone();
  const std::size_t V = e[0] * e[1] * e[2];
  auto mirror = [&](std::size_t z, std::size_t y, std::size_t x) {
    if (axis == 0) z = e[0] - 1 - z;
    if (axis == 1) y = e[1] - 1 - y;
    if (axis == 2) x = e[2] - 1 - x;
    return (z * e[1] + y) * e[2] + x;
  };
  for (std::size_t z = 0; z < e[0]; ++z)
    for (std::size_t y = 0; y < e[1]; ++y)
      for (std::size_t x = 0; x < e[2]; ++x) {
        const std::size_t dst = (z * e[1] + y) * e[2] + x, src = mirror(z, y, x);
        out.label.data[dst] = volume.label.data[src];
        for (std::size_t m = 0; m < volume.image.size(0); ++m) out.image.data()[m * V + dst] = volume.image[m * V + src];
      }
  return out;
}

Volume apply_augment(const Volume& volume, const AugmentPlan& plan) {
  const auto e = spatial_extent(volume);
  Volume out = volume;
  out.image = volume.image.clone();
  for (std::size_t axis = 0; axis < 3; ++axis)
    if (plan.flip[axis]) out = flip(out, axis);

  const std::size_t M = out.image.size(0), V = e[0] * e[1] * e[2];
  const Eigen::Vector3d center((e[0] - 1) / 2.0, (e[1] - 1) / 2.0, (e[2] - 1) / 2.0);

  if (plan.affine || plan.elastic) {
    Eigen::Matrix3d inverse = Eigen::Matrix3d::Identity();
    if (plan.affine) inverse = (plan.scale * rotation(plan.angles_deg)).inverse();
    const std::size_t g = plan.elastic_grid;
    const detail::Extent3 ge{g, g, g};
    Tensor image(out.image.shape());
    LabelMap labels(e);
    for (std::size_t z = 0; z < e[0]; ++z)
      for (std::size_t y = 0; y < e[1]; ++y)
        for (std::size_t x = 0; x < e[2]; ++x) {
          Eigen::Vector3d src = center + inverse * (Eigen::Vector3d(z, y, x) - center);
          if (plan.elastic) {
            const double gz = z * (g - 1.0) / std::max<std::size_t>(1, e[0] - 1);
            const double gy = y * (g - 1.0) / std::max<std::size_t>(1, e[1] - 1);
            const double gx = x * (g - 1.0) / std::max<std::size_t>(1, e[2] - 1);
            for (std::size_t a = 0; a < 3; ++a)
              src[a] += detail::sample_trilinear(plan.elastic_displacement.data() + a * g * g * g, ge, gz, gy, gx);
          }
          const std::size_t dst = (z * e[1] + y) * e[2] + x;
          for (std::size_t m = 0; m < M; ++m)
            image.data()[m * V + dst] = detail::sample_trilinear(out.image.data() + m * V, e, src[0], src[1], src[2]);
          labels.data[dst] = out.label(detail::nearest_index(src[0], e[0]), detail::nearest_index(src[1], e[1]),
                                       detail::nearest_index(src[2], e[2]));
        }
    out.image = image;
    out.label = std::move(labels);
  }

  if (plan.bias) {
    const auto& c = plan.bias_coefficients;
    for (std::size_t z = 0; z < e[0]; ++z)
      for (std::size_t y = 0; y < e[1]; ++y)
        for (std::size_t x = 0; x < e[2]; ++x) {
          const double pz = 2.0 * z / std::max<std::size_t>(1, e[0] - 1) - 1.0;
          const double py = 2.0 * y / std::max<std::size_t>(1, e[1] - 1) - 1.0;
          const double px = 2.0 * x / std::max<std::size_t>(1, e[2] - 1) - 1.0;
          const double field = std::exp(c[0] * pz + c[1] * py + c[2] * px + c[3] * pz * pz + c[4] * py * py +
                                        c[5] * px * px + c[6] * pz * py + c[7] * pz * px + c[8] * py * px);
          const std::size_t i = (z * e[1] + y) * e[2] + x;
          for (std::size_t m = 0; m < M; ++m) out.image.data()[m * V + i] *= field;
        }
  }

  if (plan.noise) {
    std::mt19937_64 rng(plan.noise_seed);
    std::normal_distribution<double> gauss(0.0, plan.noise_sigma);
    for (auto& v : out.image.mutable_values()) v += gauss(rng);
  }
  return out;
}

}  // namespace twinseg
