#pragma once

#include "twinseg/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace twinseg {

enum Label : std::uint8_t { background = 0, edema = 1, tumor_core = 2, enhancing_tumor = 3 };
inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::size_t kNumModalities = 4;
inline constexpr std::array<const char*, kNumClasses> kClassNames = {"background", "edema", "tumor_core",
                                                                   "enhancing_tumor"};
inline constexpr std::array<const char*, kNumModalities> kModalityNames = {"T1", "T1ce", "T2", "FLAIR"};

/// Integer label grid, z-major (depth, height, width).
struct LabelMap {
  std::array<std::size_t, 3> extent{0, 0, 0};
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(std::array<std::size_t, 3> ext, std::uint8_t fill = 0)
      : extent(ext), data(ext[0] * ext[1] * ext[2], fill) {}

  std::size_t size() const { return data.size(); }
  std::uint8_t& operator()(std::size_t z, std::size_t y, std::size_t x) {
    return data[(z * extent[1] + y) * extent[2] + x];
  }
  std::uint8_t operator()(std::size_t z, std::size_t y, std::size_t x) const {
    return data[(z * extent[1] + y) * extent[2] + x];
  }
  bool operator==(const LabelMap&) const = default;
};

/// One subject: image[modalities,D,H,W] plus its voxel labels.
struct Volume {
  Tensor image;
  LabelMap label;
  std::string subject_id;
  bool preprocessed = false;
};

}  // namespace twinseg
