#include "twinseg/fedsim.hpp"

#include "twinseg/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace twinseg {

namespace {

Tensor stack_images(const std::vector<Volume>& batch) {
  Shape shape = batch.front().image.shape();
  shape.insert(shape.begin(), batch.size());
  Tensor out(shape);
  const std::size_t n = batch.front().image.numel();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].image.numel() != n) throw std::invalid_argument("batch: images differ in shape");
    std::copy(batch[b].image.values().begin(), batch[b].image.values().end(), out.data() + b * n);
  }
  return out;
}

}  // namespace

LocalResult local_train(const ParameterStore& params, const ClientDataset& data, const TrainConfig& config,
                        std::uint64_t seed) {
  if (data.train.empty())
    throw std::invalid_argument("local_train: client '" + data.name + "' has an empty training split");
  if (config.epochs == 0) throw std::invalid_argument("local_train: epochs must be at least 1");
  if (config.batch_size == 0) throw std::invalid_argument("local_train: batch size must be at least 1");
  for (const auto& v : data.train)
    if (!v.preprocessed) throw std::invalid_argument("local_train: subject '" + v.subject_id + "' is not preprocessed");

  LocalResult result;
  result.params = params.clone();
  AdamState adam(config.adam);
  const std::size_t n = data.train.size();
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = derive_rng({seed, epoch, 5});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      std::vector<Volume> batch;
      std::vector<LabelMap> labels;
      for (std::size_t j = start; j < stop; ++j) {
        auto aug_rng = derive_rng({seed, epoch, j, 6});
        batch.push_back(augment(data.train[order[j]], aug_rng, config.augment));
        labels.push_back(batch.back().label);
      }
      const Tensor x = stack_images(batch);
      const Tensor target = one_hot(labels, config.model.num_classes);

      Tape tape;
      double value = 0.0;
      {
        TapeScope scope(tape);
        const Tensor logits = forward(result.params, config.model, x, NormMode::train);
        const Tensor loss = composite_loss(logits, target, config.loss);
        value = loss.item();
        tape.backward(loss);
      }
      adam_step(result.params, adam);
      loss_sum += value;
      ++batches;
      ++result.steps;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  for (auto& [name, e] : result.params) e.tensor.clear_grad();
  return result;
}

ParameterStore fedavg_aggregate(std::vector<ClientUpdate> updates) {
  if (updates.empty()) throw std::invalid_argument("fedavg: no updates");
  std::sort(updates.begin(), updates.end(),
            [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
  std::size_t N = 0;
  for (std::size_t k = 0; k < updates.size(); ++k) {
    if (k > 0 && updates[k].client_id == updates[k - 1].client_id)
      throw std::invalid_argument("fedavg: duplicate client id " + std::to_string(updates[k].client_id));
    if (auto why = updates.front().params.mismatch(updates[k].params))
      throw std::invalid_argument("fedavg: client " + std::to_string(updates[k].client_id) +
                                  " is incompatible: " + *why);
    N += updates[k].n_k;
  }
  if (N == 0) throw std::invalid_argument("fedavg: total sample count is zero");

  std::vector<double> weights;
  for (const auto& u : updates) weights.push_back(static_cast<double>(u.n_k) / static_cast<double>(N));

  ParameterStore out = updates.front().params.clone();
  for (auto& [name, entry] : out) {
    auto acc = entry.tensor.mutable_values();
    const auto anchor = updates.front().params.at(name).values();
    for (std::size_t k = 1; k < updates.size(); ++k) {
      const auto theta = updates[k].params.at(name).values();
      const double w = weights[k];
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * (theta[i] - anchor[i]);
    }
  }
  return out;
}

std::vector<std::size_t> ParticipationPolicy::select(std::size_t round, std::size_t clients) const {
  if (!(fraction > 0.0) || fraction > 1.0) throw std::invalid_argument("participation: fraction must lie in (0,1]");
  std::vector<std::size_t> ids(clients);
  std::iota(ids.begin(), ids.end(), 0);
  const auto m = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(clients)));
  if (m < clients) {
    auto rng = derive_rng({seed, round, 7});
    for (std::size_t i = clients - 1; i > 0; --i) std::swap(ids[i], ids[rng() % (i + 1)]);
    ids.resize(m);
    std::sort(ids.begin(), ids.end());
  }
  std::erase_if(ids, [&](std::size_t id) { return std::find(dropped.begin(), dropped.end(), id) != dropped.end(); });
  return ids;
}

std::string round_log_json(const RoundLog& log, const std::string& config_hash) {
  nlohmann::ordered_json j = {{"config_hash", config_hash},
                              {"round", log.round},
                              {"participants", log.participants},
                              {"total_samples", log.total_samples}};
  j["clients"] = nlohmann::ordered_json::array();
  for (const auto& c : log.clients)
    j["clients"].push_back({{"client_id", c.client_id},
                            {"name", c.name},
                            {"n_k", c.n_k},
                            {"weight", c.weight},
                            {"final_loss", c.final_loss},
                            {"epochs", c.epochs}});
  return j.dump();
}

std::uint64_t client_round_seed(std::uint64_t seed, std::size_t round, std::size_t client_id) {
  return derive_seed({seed, round, client_id, 8});
}

GlobalState run_round(const GlobalState& state, const std::vector<ClientDataset>& clients, const TrainConfig& config,
                      const ParticipationPolicy& policy, std::uint64_t seed, Execution execution, std::size_t threads) {
  const auto started = std::chrono::steady_clock::now();
  const auto participants = policy.select(state.round, clients.size());
  if (participants.empty())
    throw std::invalid_argument("run_round: no participants in round " + std::to_string(state.round + 1));
  for (std::size_t id : participants)
    if (clients[id].client_id != id) throw std::invalid_argument("run_round: client list is not indexed by client id");

  std::vector<LocalResult> results(participants.size());
  auto train_one = [&](std::size_t i) {
    const auto& data = clients[participants[i]];
    results[i] = local_train(state.params, data, config, client_round_seed(seed, state.round, data.client_id));
  };
  if (execution == Execution::serial || participants.size() == 1) {
    for (std::size_t i = 0; i < participants.size(); ++i) train_one(i);
  } else {
    const std::size_t workers =
        std::min(participants.size(), threads ? threads : std::max(1u, std::thread::hardware_concurrency()));
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i; (i = next++) < participants.size();) train_one(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  RoundLog log;
  log.round = state.round + 1;
  log.participants = participants;
  std::vector<ClientUpdate> updates;
  for (std::size_t i = 0; i < participants.size(); ++i) {
    const auto& data = clients[participants[i]];
    log.total_samples += data.n_k();
    updates.push_back({data.client_id, data.n_k(), std::move(results[i].params)});
  }
  for (std::size_t i = 0; i < participants.size(); ++i) {
    const auto& data = clients[participants[i]];
    log.clients.push_back({data.client_id, data.name, data.n_k(),
                           static_cast<double>(data.n_k()) / static_cast<double>(log.total_samples),
                           results[i].final_loss(), config.epochs});
  }

  GlobalState next_state;
  next_state.round = state.round + 1;
  next_state.params = fedavg_aggregate(std::move(updates));
  next_state.logs = state.logs;
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  next_state.logs.push_back(std::move(log));
  return next_state;
}

ParameterStore fine_tune_digital_twin(const ParameterStore& global, const ClientDataset& client,
                                      const TrainConfig& config, std::size_t epochs, std::uint64_t seed) {
  if (epochs == 0) throw std::invalid_argument("fine_tune_digital_twin: epochs must be at least 1");
  TrainConfig dt = config;
  dt.epochs = epochs;
  return local_train(global, client, dt, seed).params;
}

}  // namespace twinseg
