#pragma once

#include "twinseg/augment.hpp"
#include "twinseg/cohort.hpp"
#include "twinseg/fedsim.hpp"
#include "twinseg/loss.hpp"
#include "twinseg/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace twinseg {

enum class DtSchedule { final_round, per_round };
enum class DtStart { global, previous_twin };
enum class CohortKind { sites, strongly_noniid };

struct CohortConfig {
  CohortKind kind = CohortKind::sites;
  double scale = 1.0 / 25.0;
  std::size_t min_count = 4;
};

struct ExperimentConfig {
  std::string preset = "desk";
  std::uint64_t seed = 20250101;
  ModelConfig model;
  CohortConfig cohort;
  std::size_t rounds = 10;
  std::size_t local_epochs = 5;
  std::size_t batch_size = 2;
  double learning_rate = 1e-4;
  LossMode loss = LossMode::dice_ce;
  double participation = 1.0;
  std::vector<std::size_t> dropped_clients;
  std::size_t dt_epochs = 1;
  DtSchedule dt_schedule = DtSchedule::final_round;
  DtStart dt_start = DtStart::global;
  AugmentConfig augment;
  std::string eval_split = "val";
  Execution execution = Execution::serial;
  std::size_t threads = 0;  // 0: hardware concurrency
  std::string output_dir = "runs/out";

  /// Throws std::invalid_argument citing the offending field path.
  void validate() const;

  CohortSpec cohort_spec() const;
  TrainConfig train_config() const;
  ParticipationPolicy participation_policy() const;
};

std::vector<std::string> preset_names();
/// desk (R=10, E=5), desk-ci (R=10, E=2), noniid, paper.
ExperimentConfig preset(const std::string& name);

nlohmann::ordered_json to_json(const ExperimentConfig& config);
/// Starts from the named preset (field "preset", default "desk") and
/// overrides every field present; unknown fields are rejected by path.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a of the canonical JSON of every field that influences results
/// (output location and thread layout excluded), as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

}  // namespace twinseg
