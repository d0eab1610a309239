#include "twinseg/preprocess.hpp"

#include "sampling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace twinseg {

namespace {

std::size_t channel_volume(const Tensor& image) {
  if (image.dim() < 2) throw std::invalid_argument("image must be [M,...], got " + shape_string(image.shape()));
  return image.numel() / image.size(0);
}

}  // namespace

Tensor rescale_intensity(const Tensor& image) {
  const std::size_t V = channel_volume(image);
  Tensor out(image.shape());
  for (std::size_t m = 0; m < image.size(0); ++m) {
    const double* src = image.data() + m * V;
    double* dst = out.data() + m * V;
    const auto [lo, hi] = std::minmax_element(src, src + V);
    const double range = *hi - *lo;
    if (range == 0.0) continue;  // constant modality -> zeros
    for (std::size_t i = 0; i < V; ++i) dst[i] = (src[i] - *lo) / range;
  }
  return out;
}

Tensor z_normalize(const Tensor& image) {
  const std::size_t V = channel_volume(image);
  Tensor out(image.shape());
  for (std::size_t m = 0; m < image.size(0); ++m) {
    const double* src = image.data() + m * V;
    double* dst = out.data() + m * V;
    double mu = 0.0;
    for (std::size_t i = 0; i < V; ++i) mu += src[i];
    mu /= static_cast<double>(V);
    double var = 0.0;
    for (std::size_t i = 0; i < V; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(V);
    if (var == 0.0) continue;
    const double inv = 1.0 / std::sqrt(var);
    for (std::size_t i = 0; i < V; ++i) dst[i] = (src[i] - mu) * inv;
  }
  return out;
}

Tensor resize_image(const Tensor& image, std::size_t extent) {
  if (extent == 0) throw std::invalid_argument("resize: target extent must be positive");
  if (image.dim() != 4) throw std::invalid_argument("resize: image must be [M,D,H,W]");
  const detail::Extent3 in{image.size(1), image.size(2), image.size(3)};
  if (in[0] == extent && in[1] == extent && in[2] == extent) return image.clone();
  const std::size_t M = image.size(0), Vin = in[0] * in[1] * in[2];
  Tensor out(Shape{M, extent, extent, extent});
  auto scale = [extent](std::size_t n) {
    return extent > 1 ? static_cast<double>(n - 1) / static_cast<double>(extent - 1) : 0.0;
  };
  const double sz = scale(in[0]), sy = scale(in[1]), sx = scale(in[2]);
  double* dst = out.data();
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t z = 0; z < extent; ++z)
      for (std::size_t y = 0; y < extent; ++y)
        for (std::size_t x = 0; x < extent; ++x)
          *dst++ = detail::sample_trilinear(image.data() + m * Vin, in, z * sz, y * sy, x * sx);
  return out;
}

LabelMap resize_labels(const LabelMap& labels, std::size_t extent) {
  if (extent == 0) throw std::invalid_argument("resize: target extent must be positive");
  const auto& in = labels.extent;
  if (in[0] == extent && in[1] == extent && in[2] == extent) return labels;
  LabelMap out({extent, extent, extent});
  auto scale = [extent](std::size_t n) {
    return extent > 1 ? static_cast<double>(n - 1) / static_cast<double>(extent - 1) : 0.0;
  };
  const double sz = scale(in[0]), sy = scale(in[1]), sx = scale(in[2]);
  for (std::size_t z = 0; z < extent; ++z)
    for (std::size_t y = 0; y < extent; ++y)
      for (std::size_t x = 0; x < extent; ++x)
        out(z, y, x) = labels(detail::nearest_index(z * sz, in[0]), detail::nearest_index(y * sy, in[1]),
                              detail::nearest_index(x * sx, in[2]));
  return out;
}

Volume resize(const Volume& volume, std::size_t extent) {
  Volume out;
  out.subject_id = volume.subject_id;
  out.preprocessed = volume.preprocessed;
  out.image = resize_image(volume.image, extent);
  out.label = resize_labels(volume.label, extent);
  return out;
}

Volume preprocess(Volume volume, std::size_t extent) {
  if (volume.preprocessed)
    throw std::logic_error("preprocess: subject '" + volume.subject_id + "' was already preprocessed");
  volume.image = z_normalize(rescale_intensity(volume.image));
  volume = resize(volume, extent);
  volume.preprocessed = true;
  return volume;
}

}  // namespace twinseg
