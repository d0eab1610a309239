#pragma once

#include "twinseg/volume.hpp"

namespace twinseg {

/// Per-modality min-max map of image[M,...] to [0,1]; constant modalities
/// map to zeros.
Tensor rescale_intensity(const Tensor& image);

/// Per-modality zero mean / unit population variance; zero-variance
/// modalities map to zeros.
Tensor z_normalize(const Tensor& image);

/// Corner-aligned trilinear resampling of image[M,D,H,W] to a cubic extent.
Tensor resize_image(const Tensor& image, std::size_t extent);
/// Corner-aligned nearest-neighbour resampling of labels.
LabelMap resize_labels(const LabelMap& labels, std::size_t extent);
Volume resize(const Volume& volume, std::size_t extent);

/// rescale -> z-normalise -> resize. Throws if the volume was already
/// preprocessed.
Volume preprocess(Volume volume, std::size_t extent);

}  // namespace twinseg
