#include "twinseg/experiment.hpp"

#include "twinseg/checkpoint.hpp"
#include "twinseg/report.hpp"
#include "twinseg/rng.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace twinseg {

namespace fs = std::filesystem;

namespace {

const std::vector<Volume>& split_of(const ClientDataset& c, const std::string& split) {
  if (split == "train") return c.train;
  if (split == "val") return c.val;
  if (split == "test") return c.test;
  throw std::invalid_argument("unknown split '" + split + "'");
}

std::string round_name(std::size_t r) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "global_round_%02zu.ckpt", r);
  return buf;
}

std::string round_dir(std::size_t r) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "round_%02zu", r);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::uint64_t model_seed(std::uint64_t seed) { return derive_seed({seed, 10}); }
std::uint64_t dt_seed(std::uint64_t seed, std::size_t round, std::size_t client) {
  return derive_seed({seed, round, client, 9});
}

std::vector<MetricsReport> evaluate_all(const ParameterStore& params, const ExperimentConfig& cfg,
                                        const std::vector<ClientDataset>& cohort) {
  std::vector<MetricsReport> out;
  for (const auto& c : cohort) out.push_back(evaluate_model(params, cfg.model, c, cfg.eval_split));
  return out;
}

/// Evaluates and writes every report; shared by run and emit.
RunResult write_reports(const fs::path& dir, const ExperimentConfig& cfg, const std::string& hash,
                        const std::vector<ClientDataset>& cohort, const std::vector<ParameterStore>& rounds,
                        const std::vector<ParameterStore>& twins, std::ostream* log) {
  RunResult res;
  res.dir = dir;
  res.config_hash = hash;
  std::vector<std::vector<MetricsReport>> per_round;
  for (std::size_t r = 0; r < rounds.size(); ++r) {
    per_round.push_back(evaluate_all(rounds[r], cfg, cohort));
    res.round_mean_dice.push_back(mean_client_dice(per_round.back()));
    if (log) *log << "eval round " << r << ": mean foreground dice " << res.round_mean_dice.back() << "\n" << std::flush;
  }
  res.global = per_round.back();
  for (std::size_t k = 0; k < cohort.size(); ++k)
    res.dt.push_back(evaluate_model(twins[k], cfg.model, cohort[k], cfg.eval_split));
  res.comparison = compare_global_vs_dt(res.global, res.dt);

  const fs::path rep = dir / "reports";
  write_text(rep / "metrics_global.json", metrics_json(res.global, "global", hash));
  write_text(rep / "metrics_dt.json", metrics_json(res.dt, "dt", hash));
  write_text(rep / "per_class_global.csv", per_class_csv(res.global, hash));
  write_text(rep / "per_class_dt.csv", per_class_csv(res.dt, hash));
  write_text(rep / "clients_global.csv", client_summary_csv(res.global, hash));
  write_text(rep / "clients_dt.csv", client_summary_csv(res.dt, hash));
  write_text(rep / "comparison.csv", comparison_csv(res.comparison, hash));
  write_text(rep / "plot_long.csv", plot_long_csv(res.global, res.dt, hash));
  write_text(rep / "roc.csv", roc_csv(res.global, res.dt, hash));
  write_text(rep / "rounds.csv", round_curve_csv(per_round, hash));
  return res;
}

}  // namespace

MetricsReport evaluate_model(const ParameterStore& params, const ModelConfig& model, const ClientDataset& client,
                             const std::string& split) {
  NoGradScope no_grad;
  ParameterStore local = params.clone();
  MetricsAccumulator acc(client.name);
  for (const auto& v : split_of(client, split)) {
    Shape shape = v.image.shape();
    shape.insert(shape.begin(), 1);
    const Tensor x(shape, std::vector<double>(v.image.values().begin(), v.image.values().end()));
    const Tensor probs = softmax(forward(local, model, x, NormMode::eval), 1);
    acc.add(probs, v.label);
  }
  return acc.report();
}

std::string describe_plan(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto spec = cfg.cohort_spec();
  const auto params = layer_inventory(cfg.model);
  std::size_t trainable = 0;
  for (const auto& l : params)
    if (l.init != LayerSpec::Init::buffer_zeros && l.init != LayerSpec::Init::buffer_ones) trainable += shape_numel(l.shape);
  std::ostringstream os;
  os << "preset        " << cfg.preset << "\n"
     << "config hash   " << config_hash(cfg) << "\n"
     << "seed          " << cfg.seed << "\n"
     << "model         " << cfg.model.input_extent << "^3, " << cfg.model.encoder_levels << " levels, base "
     << cfg.model.base_channels << ", vit patch " << cfg.model.vit.patch_size << " embed " << cfg.model.vit.embed_dim
     << " heads " << cfg.model.vit.heads << " layers " << cfg.model.vit.layers << ", " << trainable
     << " trainable parameters\n"
     << "schedule      " << cfg.rounds << " rounds x " << cfg.local_epochs << " local epochs, batch "
     << cfg.batch_size << ", lr " << cfg.learning_rate << ", loss " << loss_mode_name(cfg.loss) << "\n"
     << "participation " << cfg.participation << (cfg.dropped_clients.empty() ? "" : " with dropped clients") << "\n"
     << "digital twins " << cfg.dt_epochs << " epoch(s), "
     << (cfg.dt_schedule == DtSchedule::final_round ? "after the final round" : "after every round") << ", from "
     << (cfg.dt_start == DtStart::global ? "the global model" : "the previous twin") << "\n"
     << "evaluation    " << cfg.eval_split << " split\n"
     << "output        " << cfg.output_dir << "\n"
     << "clients:\n";
  std::size_t total = 0;
  for (const auto& c : spec.clients) {
    const auto s = split_sizes(c.sample_count);
    total += c.sample_count;
    os << "  " << c.name << "  n=" << c.sample_count << "  train/val/test=" << s.train << "/" << s.val << "/"
       << s.test << "\n";
  }
  os << "  total " << total << " subjects\n";
  for (const auto& n : spec.notes) os << "note: " << n << "\n";
  return os.str();
}

RunResult run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  const std::string hash = config_hash(cfg);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  for (const char* stale : {"reports", "checkpoints", "logs", "cohort", "summary.json"}) fs::remove_all(dir / stale);
  write_text(dir / "RUN_INCOMPLETE", "config_hash=" + hash + "\nstarted=" + started + "\n");
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");

  try {
    const auto spec = cfg.cohort_spec();
    if (log) *log << "generating cohort (" << spec.clients.size() << " clients)\n" << std::flush;
    const auto cohort = partition_noniid(spec, cfg.seed);
    write_text(dir / "cohort" / "manifest.json", cohort_manifest(cohort, hash));

    const auto train = cfg.train_config();
    const auto policy = cfg.participation_policy();
    GlobalState state;
    state.params = build_model(cfg.model, model_seed(cfg.seed));
    fs::create_directories(dir / "checkpoints" / "dt");
    save_checkpoint(state.params, dir / "checkpoints" / round_name(0), hash);
    std::vector<ParameterStore> rounds{state.params.clone()};
    std::vector<ParameterStore> twins(cohort.size());
    std::vector<double> round_seconds;

    fs::create_directories(dir / "logs");
    std::ofstream ndjson(dir / "logs" / "rounds.ndjson", std::ios::trunc);
    for (std::size_t r = 1; r <= cfg.rounds; ++r) {
      state = run_round(state, cohort, train, policy, cfg.seed, cfg.execution, cfg.threads);
      const auto& rl = state.logs.back();
      round_seconds.push_back(rl.wall_seconds);
      ndjson << round_log_json(rl, hash) << "\n" << std::flush;
      save_checkpoint(state.params, dir / "checkpoints" / round_name(r), hash);
      rounds.push_back(state.params.clone());
      if (log) {
        double loss = 0.0;
        for (const auto& c : rl.clients) loss += c.weight * c.final_loss;
        *log << "round " << r << "/" << cfg.rounds << ": " << rl.participants.size() << " clients, weighted loss "
             << loss << ", " << rl.wall_seconds << " s\n"
             << std::flush;
      }
      const bool refresh = cfg.dt_schedule == DtSchedule::per_round || r == cfg.rounds;
      if (!refresh) continue;
      for (const auto& c : cohort) {
        const bool from_twin = cfg.dt_start == DtStart::previous_twin && !twins[c.client_id].empty();
        const ParameterStore& start = from_twin ? twins[c.client_id] : state.params;
        twins[c.client_id] = fine_tune_digital_twin(start, c, train, cfg.dt_epochs, dt_seed(cfg.seed, r, c.client_id));
        if (cfg.dt_schedule == DtSchedule::per_round) {
          fs::create_directories(dir / "checkpoints" / "dt" / round_dir(r));
          save_checkpoint(twins[c.client_id], dir / "checkpoints" / "dt" / round_dir(r) / (c.name + ".ckpt"), hash);
        }
      }
      if (log) *log << "digital twins refreshed after round " << r << "\n" << std::flush;
    }
    for (const auto& c : cohort) save_checkpoint(twins[c.client_id], dir / "checkpoints" / "dt" / (c.name + ".ckpt"), hash);

    RunResult res = write_reports(dir, cfg, hash, cohort, rounds, twins, log);
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    nlohmann::ordered_json summary;
    summary["config_hash"] = hash;
    summary["preset"] = cfg.preset;
    summary["seeds"] = {{"global", cfg.seed}, {"model_init", model_seed(cfg.seed)}};
    summary["started_utc"] = started;
    summary["finished_utc"] = utc_now();
    summary["wall_seconds"] = res.seconds;
    summary["round_wall_seconds"] = round_seconds;
    summary["round_mean_fg_dice"] = res.round_mean_dice;
    summary["final_global_mean_fg_dice"] = res.round_mean_dice.back();
    summary["dt_mean_fg_dice"] = mean_client_dice(res.dt);
    summary["mean_delta_dice"] = res.comparison.mean_delta_dice;
    summary["mean_delta_iou"] = res.comparison.mean_delta_iou;
    summary["clients_dt_not_worse"] = res.comparison.dice_non_negative;
    summary["cohort_notes"] = spec.notes;
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    fs::remove(dir / "RUN_INCOMPLETE");
    return res;
  } catch (const std::exception& e) {
    std::ofstream(dir / "RUN_INCOMPLETE", std::ios::app) << "error=" << e.what() << "\n";
    throw;
  }
}

RunResult emit_reports(const fs::path& dir, std::ostream* log) {
  const fs::path config_path = dir / "config.json";
  if (!fs::exists(config_path)) throw std::invalid_argument("emit-reports: no config.json in " + dir.string());
  if (fs::exists(dir / "RUN_INCOMPLETE"))
    throw std::invalid_argument("emit-reports: " + dir.string() + " holds an incomplete run (RUN_INCOMPLETE is present)");
  ExperimentConfig cfg = load_config(config_path);
  const std::string hash = config_hash(cfg);

  std::vector<std::string> missing;
  for (std::size_t r = 0; r <= cfg.rounds; ++r)
    if (!fs::exists(dir / "checkpoints" / round_name(r))) missing.push_back("round " + std::to_string(r));
  const auto spec = cfg.cohort_spec();
  for (const auto& c : spec.clients)
    if (!fs::exists(dir / "checkpoints" / "dt" / (c.name + ".ckpt"))) missing.push_back("digital twin " + c.name);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw std::invalid_argument("emit-reports: missing checkpoints: " + list);
  }

  auto load = [&](const fs::path& p) {
    std::string stored;
    auto store = load_checkpoint(p, &stored);
    if (stored != hash)
      throw std::invalid_argument("emit-reports: " + p.string() + " was written by config " + stored + ", expected " +
                                  hash);
    return store;
  };
  std::vector<ParameterStore> rounds;
  for (std::size_t r = 0; r <= cfg.rounds; ++r) rounds.push_back(load(dir / "checkpoints" / round_name(r)));
  std::vector<ParameterStore> twins;
  for (const auto& c : spec.clients) twins.push_back(load(dir / "checkpoints" / "dt" / (c.name + ".ckpt")));

  if (log) *log << "regenerating cohort\n" << std::flush;
  const auto cohort = partition_noniid(spec, cfg.seed);
  return write_reports(dir, cfg, hash, cohort, rounds, twins, log);
}

PaperValidation validate_paper_preset(bool allow_forward) {
  PaperValidation v;
  v.model = ModelConfig::paper();
  try {
    validate(v.model);
    v.divisibility = "ok";
  } catch (const std::invalid_argument& e) {
    v.divisibility = e.what();
    return v;
  }
  for (const auto& l : layer_inventory(v.model))
    if (l.init != LayerSpec::Init::buffer_zeros && l.init != LayerSpec::Init::buffer_ones)
      v.inventory_parameters += shape_numel(l.shape);
  ParameterStore params = build_model(v.model, 1);
  v.parameters = params.trainable_numel();
  v.buffers = params.buffer_numel();
  const std::size_t S = v.model.input_extent;
  v.output_shape = {1, v.model.num_classes, S, S, S};

  // Peak eval-mode footprint is dominated by a few full-resolution
  // activations of the widest first-level tensors (decoder concat).
  const double level0 = static_cast<double>(v.model.base_channels) * S * S * S * 8.0;
  const double needed = 10.0 * level0;
  double available = 0.0;
  std::ifstream meminfo("/proc/meminfo");
  for (std::string key; meminfo >> key;) {
    double kb = 0.0;
    meminfo >> kb;
    if (key == "MemAvailable:") available = kb * 1024.0;
    meminfo.ignore(64, '\n');
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "forward needs ~%.1f GiB, %.1f GiB available", needed / (1u << 30),
                available / (1u << 30));
  v.note = buf;
  if (!allow_forward || available < needed) {
    v.note += "; output shape from the shape law";
    return v;
  }
  NoGradScope no_grad;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Tensor x(Shape{1, v.model.in_modalities, S, S, S});
  for (auto& e : x.mutable_values()) e = gauss(rng);
  const Tensor y = forward(params, v.model, x, NormMode::eval);
  v.output_shape = y.shape();
  v.forward_ran = true;
  return v;
}

}  // namespace twinseg
