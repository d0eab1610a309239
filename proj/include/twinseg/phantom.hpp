#pragma once

#include "twinseg/volume.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace twinseg {

/// Per-class, per-modality tumour contrast (rows: background, edema, tumor
/// core, enhancing tumor; columns: T1, T1ce, T2, FLAIR).
using Signature = std::array<std::array<double, kNumModalities>, kNumClasses>;

/// Default contrast table: the four class vectors are distinct vertices, so
/// classes are linearly separable from all four modalities together, while
/// every single modality takes at most two levels.
Signature default_signature();

/// One simulated site.
struct ClientSpec {
  std::string name;
  std::size_t sample_count = 4;
  /// P(tumour present), P(core | tumour), P(enhancing | core).
  std::array<double, 3> prevalence{1.0, 1.0, 1.0};
  double radius = 6.0;  // mean outer (edema) semi-axis in voxels, at native extent
  /// Multiplicative per-modality change of the tumour contrast.
  std::array<double, kNumModalities> intensity_shift{0.0, 0.0, 0.0, 0.0};
  double noise = 0.2;
  std::uint64_t seed = 0;
  std::size_t native_extent = 0;  // 0: cohort extent
  Signature signature = default_signature();
};

/// Generates subject `index` of client `client_id`; a pure function of
/// (global_seed, client_id, spec.seed, index).
Volume generate_phantom(const ClientSpec& spec, std::size_t client_id, std::size_t index, std::size_t extent,
                        std::uint64_t global_seed);

/// Ellipsoid geometry used for a subject (exposed for containment checks).
struct TumourGeometry {
  bool present = false;
  std::array<double, 3> center{0, 0, 0};
  std::array<double, 3> axes{0, 0, 0};  // outer (edema) semi-axes
  double core_fraction = 0.0;           // 0 when the core is absent
  double enhancing_fraction = 0.0;      // 0 when the enhancing part is absent

  /// Normalised ellipsoid radius of voxel centre (z,y,x): <=1 inside outer shell.
  double rho(double z, double y, double x) const;
};

TumourGeometry phantom_geometry(const ClientSpec& spec, std::size_t client_id, std::size_t index, std::size_t extent,
                                std::uint64_t global_seed);

}  // namespace twinseg
