#pragma once

#include "twinseg/adam.hpp"
#include "twinseg/augment.hpp"
#include "twinseg/cohort.hpp"
#include "twinseg/loss.hpp"
#include "twinseg/model.hpp"
#include "twinseg/parameter_store.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace twinseg {

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 5;
  std::size_t batch_size = 2;
  AdamConfig adam;
  LossMode loss = LossMode::dice_ce;
  AugmentConfig augment;
};

struct LocalResult {
  ParameterStore params;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  std::size_t steps = 0;

  double final_loss() const { return epoch_loss.empty() ? 0.0 : epoch_loss.back(); }
};

/// Trains a deep copy of `params` for config.epochs passes over the training
/// split with a fresh Adam state. Batch order and augmentation draws are a
/// function of `seed` alone.
LocalResult local_train(const ParameterStore& params, const ClientDataset& data, const TrainConfig& config,
                        std::uint64_t seed);

/// What a client sends to the server: parameters and its training-set size.
struct ClientUpdate {
  std::size_t client_id = 0;
  std::size_t n_k = 0;
  ParameterStore params;
};

/// Dataset-size weighted mean of every trainable entry and buffer,
///   theta' = theta_a + sum_k (n_k / N) (theta_k - theta_a),
/// with theta_a the lowest client id and the sum in ascending client order.
/// Algebraically the plain weighted mean; anchoring makes identical inputs
/// and single participants reproduce their input bit for bit.
ParameterStore fedavg_aggregate(std::vector<ClientUpdate> updates);

struct ParticipationPolicy {
  double fraction = 1.0;             // share of clients drawn each round
  std::uint64_t seed = 0;            // subset draw stream
  std::vector<std::size_t> dropped;  // clients whose update never arrives

  /// Ascending participant ids for `round` among `clients` clients.
  std::vector<std::size_t> select(std::size_t round, std::size_t clients) const;
};

struct ClientRoundLog {
  std::size_t client_id = 0;
  std::string name;
  std::size_t n_k = 0;
  double weight = 0.0;
  double final_loss = 0.0;
  std::size_t epochs = 0;
};

struct RoundLog {
  std::size_t round = 0;  // 1-based index of the round that produced theta_round
  std::vector<std::size_t> participants;
  std::size_t total_samples = 0;  // N_r
  std::vector<ClientRoundLog> clients;
  double wall_seconds = 0.0;
};

/// One JSON object per line; wall time is left out so logs are reproducible.
std::string round_log_json(const RoundLog& log, const std::string& config_hash);

struct GlobalState {
  std::size_t round = 0;
  ParameterStore params;
  std::vector<RoundLog> logs;
};

enum class Execution { serial, parallel };

/// Seed handed to client `client_id` in round `round` (0-based).
std::uint64_t client_round_seed(std::uint64_t seed, std::size_t round, std::size_t client_id);

/// Broadcast -> local training per participant -> aggregation over
/// participants only. Throws without touching `state` when nobody
/// participates.
GlobalState run_round(const GlobalState& state, const std::vector<ClientDataset>& clients, const TrainConfig& config,
                      const ParticipationPolicy& policy, std::uint64_t seed, Execution execution = Execution::serial,
                      std::size_t threads = 0);

/// theta_dt = local_train(theta_g, client, epochs); theta_g is untouched.
ParameterStore fine_tune_digital_twin(const ParameterStore& global, const ClientDataset& client,
                                      const TrainConfig& config, std::size_t epochs, std::uint64_t seed);

}  // namespace twinseg
