#include "twinseg/phantom.hpp"

#include "twinseg/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace twinseg {

namespace {

constexpr double kCoreFraction = 0.65;
constexpr double kEnhancingFraction = 0.35;
constexpr double kAxisJitter = 0.15;
constexpr double kFieldAmplitude = 0.3;
constexpr std::array<double, kNumModalities> kBase{300.0, 500.0, 400.0, 250.0};
constexpr std::array<double, kNumModalities> kScale{100.0, 120.0, 80.0, 90.0};

double center_jitter(std::size_t extent) { return static_cast<double>(extent) / 8.0; }

}  // namespace

Signature default_signature() {
  return {{
      {0.0, 0.0, 0.0, 0.0},   // background
      {0.0, 0.0, 1.0, 1.0},   // edema: bright T2 / FLAIR
      {-1.0, 0.0, 1.0, 0.0},  // tumor core: dark T1, bright T2
      {0.0, 1.0, 0.0, 1.0},   // enhancing: bright T1ce
  }};
}

double TumourGeometry::rho(double z, double y, double x) const {
  const double dz = (z - center[0]) / axes[0];
  const double dy = (y - center[1]) / axes[1];
  const double dx = (x - center[2]) / axes[2];
  return std::sqrt(dz * dz + dy * dy + dx * dx);
}

TumourGeometry phantom_geometry(const ClientSpec& spec, std::size_t client_id, std::size_t index, std::size_t extent,
                                std::uint64_t global_seed) {
  if (extent < 4) throw std::invalid_argument("phantom: extent must be at least 4");
  if (spec.radius < 0.0) throw std::invalid_argument("phantom: radius must be non-negative");
  const double max_axis = spec.radius * (1.0 + kAxisJitter) * (1.0 + kAxisJitter);
  const double room = static_cast<double>(extent) / 2.0 - center_jitter(extent) - 1.0;
  if (max_axis > room)
    throw std::invalid_argument("phantom: radius " + std::to_string(spec.radius) + " too large for extent " +
                                std::to_string(extent) + " (client '" + spec.name + "')");

  auto rng = derive_rng({global_seed, client_id, spec.seed, index, 1});
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(1.0 - kAxisJitter, 1.0 + kAxisJitter);
  std::uniform_real_distribution<double> shift(-center_jitter(extent), center_jitter(extent));

  TumourGeometry g;
  const bool tumour = u01(rng) < spec.prevalence[0];
  const bool core = u01(rng) < spec.prevalence[1];
  const bool enhancing = u01(rng) < spec.prevalence[2];
  const double r = spec.radius * jitter(rng);
  const double mid = (static_cast<double>(extent) - 1.0) / 2.0;
  for (std::size_t i = 0; i < 3; ++i) {
    g.axes[i] = r * jitter(rng);
    g.center[i] = mid + shift(rng);
  }
  g.present = tumour && spec.radius > 0.0;
  g.core_fraction = g.present && core ? kCoreFraction : 0.0;
  g.enhancing_fraction = g.present && core && enhancing ? kEnhancingFraction : 0.0;
  return g;
}

Volume generate_phantom(const ClientSpec& spec, std::size_t client_id, std::size_t index, std::size_t extent,
                        std::uint64_t global_seed) {
  const std::size_t S = spec.native_extent ? spec.native_extent : extent;
  const auto geo = phantom_geometry(spec, client_id, index, S, global_seed);

  Volume vol;
  vol.subject_id = spec.name + "-s" + std::to_string(index);
  vol.label = LabelMap({S, S, S});
  for (std::size_t z = 0; z < S; ++z)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        if (!geo.present) continue;
        const double r = geo.rho(static_cast<double>(z), static_cast<double>(y), static_cast<double>(x));
        std::uint8_t c = background;
        if (r <= geo.enhancing_fraction)
          c = enhancing_tumor;
        else if (r <= geo.core_fraction)
          c = tumor_core;
        else if (r <= 1.0)
          c = edema;
        vol.label(z, y, x) = c;
      }

  // low-frequency background field: three random plane waves per modality
  auto field_rng = derive_rng({global_seed, client_id, spec.seed, index, 2});
  std::uniform_real_distribution<double> freq(-1.0, 1.0), phase(0.0, 2.0 * std::numbers::pi), amp(0.5, 1.0);
  struct Wave {
    double fz, fy, fx, phase, amp;
  };
  std::array<std::array<Wave, 3>, kNumModalities> waves{};
  for (auto& m : waves)
    for (auto& w : m) w = {freq(field_rng), freq(field_rng), freq(field_rng), phase(field_rng), amp(field_rng)};

  auto noise_rng = derive_rng({global_seed, client_id, spec.seed, index, 3});
  std::normal_distribution<double> gauss(0.0, 1.0);

  const std::size_t V = S * S * S;
  vol.image = Tensor(Shape{kNumModalities, S, S, S});
  double* img = vol.image.data();
  const double k = 2.0 * std::numbers::pi / static_cast<double>(S);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const double gain = 1.0 + spec.intensity_shift[m];
    std::size_t i = 0;
    for (std::size_t z = 0; z < S; ++z)
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x, ++i) {
          double field = 0.0;
          for (const auto& w : waves[m])
            field += w.amp * std::cos(k * (w.fz * z + w.fy * y + w.fx * x) + w.phase);
          field *= kFieldAmplitude / 3.0;
          const double signal = gain * spec.signature[vol.label.data[i]][m];
          img[m * V + i] = kBase[m] + kScale[m] * (field + signal + spec.noise * gauss(noise_rng));
        }
  }
  return vol;
}

}  // namespace twinseg
