#pragma once

#include "twinseg/phantom.hpp"
#include "twinseg/volume.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace twinseg {

/// Sample counts of the nine source collections, one per client.
inline constexpr std::array<std::size_t, 9> kSiteCounts = {1251, 1000, 165, 99, 60, 1251, 369, 259, 76};

struct CohortSpec {
  std::size_t extent = 32;  // model input extent after preprocessing
  std::vector<ClientSpec> clients;
  std::vector<std::string> notes;  // clamping and other adjustments made while building

  /// Nine clients with hospital counts scaled by `scale` (rounded, clamped to
  /// `min_count` with a note) and per-site tumour and scanner heterogeneity.
  static CohortSpec sites(std::size_t extent = 32, double scale = 1.0 / 25.0, std::size_t min_count = 4);

  /// Like sites(), but every client gets its own modality permutation of the
  /// contrast table, so a single global model sees conflicting signatures.
  static CohortSpec strongly_noniid(std::size_t extent = 32, double scale = 1.0 / 25.0, std::size_t min_count = 4);

  /// Throws naming the first invalid client field.
  void validate() const;
};

/// Scaled counts round(count * scale) clamped below at `min_count`.
std::vector<std::size_t> scaled_counts(double scale, std::size_t min_count, std::vector<std::string>* notes = nullptr);

struct ClientDataset {
  std::size_t client_id = 0;
  std::string name;
  std::vector<Volume> train;
  std::vector<Volume> val;
  std::vector<Volume> test;

  /// Aggregation weight numerator: training samples only.
  std::size_t n_k() const { return train.size(); }
};

struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
};

/// 70/15/15 by subject: val = test = max(1, round(0.15 n)), train the rest.
/// Requires n >= 3.
SplitSizes split_sizes(std::size_t n);

/// Generates, preprocesses and splits every client. A pure function of
/// (cohort, seed).
std::vector<ClientDataset> partition_noniid(const CohortSpec& cohort, std::uint64_t seed);

/// Subject ids and split assignment per client, as JSON text.
std::string cohort_manifest(const std::vector<ClientDataset>& clients, const std::string& config_hash);

/// Writes the cohort as one checkpoint container plus manifest.json.
void save_cohort_cache(const std::filesystem::path& dir, const std::vector<ClientDataset>& clients,
                       const std::string& config_hash);
std::vector<ClientDataset> load_cohort_cache(const std::filesystem::path& dir);

}  // namespace twinseg
