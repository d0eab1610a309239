#pragma once

#include "twinseg/config.hpp"
#include "twinseg/metrics.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace twinseg {

/// Eval-mode forward of every subject in `split` ("train", "val", "test"),
/// pooled into one report named after the client.
MetricsReport evaluate_model(const ParameterStore& params, const ModelConfig& model, const ClientDataset& client,
                             const std::string& split);

struct RunResult {
  std::filesystem::path dir;
  std::string config_hash;
  std::vector<double> round_mean_dice;  // global model, rounds 0..R
  std::vector<MetricsReport> global;    // final global model per client
  std::vector<MetricsReport> dt;        // digital twin per client
  ComparisonTable comparison;
  double seconds = 0.0;
};

// Run directory layout:
//   config.json                      resolved configuration
//   cohort/manifest.json             subject ids per client and split
//   checkpoints/global_round_NN.ckpt global model after round NN (00: untrained)
//   checkpoints/dt/<client>.ckpt     final digital twins
//   checkpoints/dt/round_NN/...      per-round twins (per-round schedule)
//   logs/rounds.ndjson               one JSON object per round
//   reports/                         CSV and JSON reports (see emit_reports)
//   summary.json                     seeds, hash, timings, headline numbers
//   RUN_INCOMPLETE                   present until the run finishes

/// Plan printed by --dry-run.
std::string describe_plan(const ExperimentConfig& config);

/// Full pipeline into config.output_dir. Progress lines go to `log` if set.
RunResult run_experiment(const ExperimentConfig& config, std::ostream* log = nullptr);

/// Rebuilds every report under reports/ from the stored checkpoints and the
/// regenerated cohort, without training. Throws naming absent checkpoints.
RunResult emit_reports(const std::filesystem::path& dir, std::ostream* log = nullptr);

struct PaperValidation {
  ModelConfig model;
  std::string divisibility;        // "ok" or the violated constraint
  std::size_t parameters = 0;      // trainable, from the built store
  std::size_t inventory_parameters = 0;  // trainable, from the layer inventory
  std::size_t buffers = 0;
  bool forward_ran = false;
  Shape output_shape;              // measured or analytic
  std::string note;
};

/// Builds the 128^3 preset model and, when enough memory is available and
/// `allow_forward` is set, runs one eval forward on random input.
PaperValidation validate_paper_preset(bool allow_forward = true);

}  // namespace twinseg
