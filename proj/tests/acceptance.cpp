// Acceptance checks. Prints one PASS/FAIL line per criterion; exits non-zero
// if any criterion fails.
#include "oracles.hpp"
#include "twinseg/checkpoint.hpp"
#include "twinseg/config.hpp"
#include "twinseg/experiment.hpp"
#include "twinseg/fedsim.hpp"
#include "twinseg/loss.hpp"
#include "twinseg/metrics.hpp"
#include "twinseg/model.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

using namespace twinseg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ModelConfig micro() {
  ModelConfig c;
  c.input_extent = 8;
  c.encoder_levels = 1;
  c.base_channels = 4;
  c.vit = {2, 8, 2, 1, 2};
  return c;
}

ClientDataset tiny_client(std::size_t id, std::size_t train, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ClientDataset d;
  d.client_id = id;
  d.name = "c" + std::to_string(id);
  auto subject = [&](std::size_t i) {
    Volume v;
    v.subject_id = d.name + "-" + std::to_string(i);
    v.label = LabelMap({8, 8, 8});
    for (auto& l : v.label.data) l = static_cast<std::uint8_t>(rng() % 4);
    v.image = oracle::random_tensor({4, 8, 8, 8}, rng);
    v.preprocessed = true;
    return v;
  };
  for (std::size_t i = 0; i < train; ++i) d.train.push_back(subject(i));
  d.val.push_back(subject(train));
  d.test.push_back(subject(train + 1));
  return d;
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig t;
  t.model = micro();
  t.epochs = epochs;
  t.adam.lr = 1e-3;
  return t;
}

// ---- 1 --------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  std::vector<std::string> failures;
  std::size_t cases = 0, checked = 0, kinks = 0;
  double worst = 0.0;
  auto run = [&](const std::string& name, const std::function<Tensor()>& loss,
                 std::vector<std::pair<std::string, Tensor*>> inputs, std::size_t per_input) {
    const auto r = oracle::check_gradients(loss, std::move(inputs), per_input, rng);
    ++cases;
    checked += r.checked;
    kinks += r.kinks;
    worst = std::max(worst, r.worst);
    if (r.checked < 25 || !(r.worst < 1e-4))
      failures.push_back(name + fmt(" (checked %zu, worst %.3g at ", r.checked, r.worst) + r.worst_at + ")");
  };
  std::map<Shape, Tensor> weights;
  auto contract = [&](const Tensor& y) {
    auto it = weights.find(y.shape());
    if (it == weights.end()) it = weights.emplace(y.shape(), oracle::random_tensor(y.shape(), rng)).first;
    return sum(mul(y, it->second));
  };

  Tensor x = oracle::random_tensor({2, 3, 5, 5, 5}, rng);
  Tensor w = oracle::random_tensor({4, 3, 3, 3, 3}, rng), b = oracle::random_tensor({4}, rng);
  run("conv3d", [&] { return contract(conv3d(x, w, b, 1, 1)); }, {{"x", &x}, {"w", &w}, {"b", &b}}, 12);
  run("conv3d stride 2", [&] { return contract(conv3d_im2col(x, w, b, 2, 1)); }, {{"x", &x}, {"w", &w}, {"b", &b}},
      12);
  Tensor x4 = oracle::random_tensor({2, 3, 4, 4, 4}, rng);
  Tensor tw = oracle::random_tensor({3, 4, 2, 2, 2}, rng), tb = oracle::random_tensor({4}, rng);
  run("conv_transpose3d", [&] { return contract(conv_transpose3d(x4, tw, tb)); }, {{"x", &x4}, {"w", &tw}, {"b", &tb}},
      12);
  run("maxpool3d", [&] { return contract(maxpool3d(x4).output); }, {{"x", &x4}}, 30);
  Tensor g = oracle::random_tensor({3}, rng, 0.5, 1.5), be = oracle::random_tensor({3}, rng);
  Tensor rm(Shape{3}, 0.0), rv(Shape{3}, 1.0);
  run("batchnorm3d", [&] { return contract(batchnorm3d(x4, g, be, rm, rv, NormMode::train)); },
      {{"x", &x4}, {"gamma", &g}, {"beta", &be}}, 20);
  run("relu", [&] { return contract(relu(x4)); }, {{"x", &x4}}, 30);
  run("gelu", [&] { return contract(gelu(x4)); }, {{"x", &x4}}, 30);
  Tensor a = oracle::random_tensor({2, 5, 6}, rng), lw = oracle::random_tensor({7, 6}, rng),
         lb = oracle::random_tensor({7}, rng);
  run("linear", [&] { return contract(linear(a, lw, lb)); }, {{"x", &a}, {"w", &lw}, {"b", &lb}}, 12);
  Tensor lg = oracle::random_tensor({6}, rng, 0.5, 1.5), lbeta = oracle::random_tensor({6}, rng);
  run("layer_norm", [&] { return contract(layer_norm(a, lg, lbeta)); }, {{"x", &a}, {"gamma", &lg}, {"beta", &lbeta}},
      20);
  run("softmax", [&] { return contract(softmax(a, 2)); }, {{"x", &a}}, 30);

  // blocks of the micro network, every parameter entry sampled
  const auto mc = micro();
  auto p = build_model(mc, 5);
  for (auto& [n, e] : p)
    if (e.kind == EntryKind::trainable)
      for (auto& v : e.tensor.mutable_values()) v += 0.05 * std::uniform_real_distribution<double>(-1, 1)(rng);
  auto params_with = [&](const std::string& prefix) {
    std::vector<std::pair<std::string, Tensor*>> in;
    for (auto& [n, e] : p)
      if (e.kind == EntryKind::trainable && n.rfind(prefix, 0) == 0) in.emplace_back(n, &e.tensor);
    return in;
  };
  Tensor ex = oracle::random_tensor({2, 4, 8, 8, 8}, rng);
  auto enc_in = params_with("enc0.");
  enc_in.emplace_back("x", &ex);
  run("encoder block", [&] { return contract(encoder_block(p, mc, ex, 0, NormMode::train).features); }, enc_in, 5);
  Tensor vf = oracle::random_tensor({2, 4, 4, 4, 4}, rng);
  auto vit_in = params_with("vit.");
  vit_in.emplace_back("x", &vf);
  run("vit bottleneck (attention)", [&] { return contract(vit_bottleneck(p, mc, vf)); }, vit_in, 2);
  Tensor skip = oracle::random_tensor({2, 4, 8, 8, 8}, rng);
  auto dec_in = params_with("dec0.");
  dec_in.emplace_back("features", &vf);
  dec_in.emplace_back("skip", &skip);
  run("decoder block", [&] { return contract(decoder_block(p, mc, vf, skip, 0, NormMode::train)); }, dec_in, 5);

  std::vector<LabelMap> labels(2, LabelMap({8, 8, 8}));
  for (auto& l : labels)
    for (auto& v : l.data) v = static_cast<std::uint8_t>(rng() % 4);
  const Tensor target = one_hot(labels, 4);
  Tensor logits = oracle::random_tensor(target.shape(), rng, -2, 2);
  run("dice loss", [&] { return dice_loss(logits, target); }, {{"logits", &logits}}, 30);
  run("cross entropy", [&] { return cross_entropy(logits, target); }, {{"logits", &logits}}, 30);

  // full network with the desk widths on an 8^3 input (two levels, patch 1)
  ModelConfig desk8 = ModelConfig::desk();
  desk8.input_extent = 8;
  desk8.vit.patch_size = 1;
  auto full = build_model(desk8, 6);
  for (auto& [n, e] : full)
    if (e.kind == EntryKind::trainable)
      for (auto& v : e.tensor.mutable_values()) v += 0.05 * std::uniform_real_distribution<double>(-1, 1)(rng);
  std::vector<std::pair<std::string, Tensor*>> all;
  for (auto& [n, e] : full)
    if (e.kind == EntryKind::trainable) all.emplace_back(n, &e.tensor);
  Tensor fx = oracle::random_tensor({2, 4, 8, 8, 8}, rng, -2, 2);
  run("full network 8^3", [&] { return composite_loss(forward(full, desk8, fx, NormMode::train), target); }, all, 1);

  const double secs = seconds_since(t0);
  if (secs >= 300) failures.push_back(fmt("suite took %.1f s", secs));
  if (!failures.empty()) {
    std::string d;
    for (const auto& f : failures) d += (d.empty() ? "" : "; ") + f;
    return {false, d};
  }
  return {true, fmt("%zu cases, %zu samples, worst relative error %.2e, %zu kink samples redrawn, %.1f s", cases,
                    checked, worst, kinks, secs)};
}

// ---- 2, 3 -----------------------------------------------------------------

Outcome fedavg_algebra() {
  std::mt19937_64 rng(202);
  // (a) oracle equivalence on model-sized stores
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) {
    const std::size_t K = 2 + rng() % 8;
    std::vector<ClientUpdate> updates;
    std::vector<std::size_t> n;
    for (std::size_t k = 0; k < K; ++k) {
      n.push_back(1 + rng() % 60);
      updates.push_back({k, n.back(), build_model(micro(), rng())});
    }
    const auto agg = fedavg_aggregate(updates);
    for (const auto& [name, e] : agg) {
      std::vector<std::vector<double>> values;
      for (const auto& u : updates) values.emplace_back(u.params.at(name).values().begin(), u.params.at(name).values().end());
      const auto ref = oracle::weighted_mean(values, n);
      for (std::size_t i = 0; i < ref.size(); ++i)
        worst = std::max(worst, static_cast<double>(std::abs(e.tensor[i] - ref[i])));
    }
  }
  if (worst > 1e-15) return {false, fmt("(a) max deviation from the weighted mean %.3g", worst)};

  // (b) identical clients
  const auto base = build_model(ModelConfig::desk(), 3);
  std::vector<ClientUpdate> same;
  for (std::size_t k = 0; k < 9; ++k) same.push_back({k, 1 + 7 * k, base.clone()});
  if (!fedavg_aggregate(same).bit_equal(base)) return {false, "(b) identical clients changed the parameters"};

  // (c) single participant, (d) serial vs parallel
  std::vector<ClientDataset> clients;
  for (std::size_t k = 0; k < 4; ++k) clients.push_back(tiny_client(k, 2 + k, 300 + k));
  const GlobalState s0{0, build_model(micro(), 9), {}};
  const auto cfg = tiny_train(1);
  const auto single = run_round(s0, clients, cfg, {1.0, 0, {0, 1, 3}}, 44);
  const auto local = local_train(s0.params, clients[2], cfg, client_round_seed(44, 0, 2));
  if (!single.params.bit_equal(local.params)) return {false, "(c) single-participant aggregate differs from its update"};
  const auto serial = run_round(s0, clients, cfg, {}, 45, Execution::serial);
  const auto parallel = run_round(s0, clients, cfg, {}, 45, Execution::parallel, 4);
  if (!serial.params.bit_equal(parallel.params)) return {false, "(d) serial and parallel rounds differ"};
  return {true, fmt("(a) max deviation %.2e, (b) (c) (d) bit-identical", worst)};
}

Outcome one_client_equivalence() {
  const auto client = tiny_client(0, 5, 400);
  const auto cfg = tiny_train(3);
  const GlobalState s0{0, build_model(micro(), 10), {}};
  const std::uint64_t seed = 2025;
  const auto fed = run_round(s0, {client}, cfg, {}, seed);
  const auto local = local_train(s0.params, client, cfg, client_round_seed(seed, 0, 0));
  if (!fed.params.bit_equal(local.params)) return {false, "one-client round differs from local_train"};
  return {true, "one round of E=3 with one client is bit-identical to local_train"};
}

// ---- 4 ----------------------------------------------------------------------

Outcome metric_oracles() {
  std::mt19937_64 rng(404);
  double identity_worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    LabelMap pred({8, 8, 8}), gt({8, 8, 8});
    const std::uint32_t sparsity = t % 7;  // vary class balance, including absent classes
    for (std::size_t i = 0; i < 512; ++i) {
      gt.data[i] = static_cast<std::uint8_t>(rng() % (4 + sparsity) >= 4 ? 0 : rng() % 4);
      pred.data[i] = static_cast<std::uint8_t>(rng() % 3 == 0 ? rng() % 4 : gt.data[i]);
    }
    for (std::uint8_t c = 0; c < 4; ++c) {
      const auto o = oracle::count(pred.data, gt.data, [c](std::uint8_t v) { return v == c; });
      const double od = o.tp + o.fp + o.fn == 0 ? 1.0 : double(2 * o.tp) / double(2 * o.tp + o.fp + o.fn);
      const double oj = o.tp + o.fp + o.fn == 0 ? 1.0 : double(o.tp) / double(o.tp + o.fp + o.fn);
      const double d = dice_score(pred, gt, c), j = iou_score(pred, gt, c);
      if (d != od || j != oj) return {false, fmt("case %d class %u: dice/iou differ from the counting oracle", t, c)};
      identity_worst = std::max(identity_worst, std::abs(d - 2 * j / (1 + j)) / std::max(d, 1e-300));
    }
    const auto o = oracle::count(pred.data, gt.data, [](std::uint8_t v) { return v != 0; });
    const auto s = sensitivity_specificity(pred, gt);
    const bool sens_ok = (o.tp + o.fn == 0) ? !s.sensitivity : (s.sensitivity && *s.sensitivity == double(o.tp) / double(o.tp + o.fn));
    const bool spec_ok = (o.tn + o.fp == 0) ? !s.specificity : (s.specificity && *s.specificity == double(o.tn) / double(o.tn + o.fp));
    if (!sens_ok || !spec_ok) return {false, fmt("case %d: sensitivity/specificity differ from the oracle", t)};
  }
  // floating evaluation of 2J/(1+J) rounds three times: allow 2 ulp
  if (identity_worst > 2 * std::numeric_limits<double>::epsilon())
    return {false, fmt("Dice = 2 IoU / (1 + IoU) off by %.3g relative", identity_worst)};

  double auc_worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng() % 999;
    Tensor probs(Shape{4, 1, 1, n});
    LabelMap gt({1, 1, n});
    for (std::size_t i = 0; i < n; ++i) {
      gt.data[i] = static_cast<std::uint8_t>(rng() % 4);
      double total = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        // coarse grid so ties occur
        const double v = 1.0 + std::floor(20.0 * std::uniform_real_distribution<double>(0, 1)(rng)) +
                         (gt.data[i] == c ? 8.0 : 0.0);
        probs.data()[c * n + i] = v;
        total += v;
      }
      for (std::size_t c = 0; c < 4; ++c) probs.data()[c * n + i] /= total;
    }
    gt.data[0] = 1;
    gt.data[1] = 0;
    const std::uint8_t cls = 1;
    std::vector<double> scores(probs.data() + cls * n, probs.data() + (cls + 1) * n);
    std::vector<std::uint8_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = gt.data[i] == cls;
    const auto r = roc_auc(probs, gt, cls);
    if (!r.auc) return {false, "AUC missing for a two-class case"};
    auc_worst = std::max(auc_worst, std::abs(*r.auc - oracle::pairwise_auc(scores, pos)));
  }
  if (auc_worst > 1e-12) return {false, fmt("AUC off by %.3g", auc_worst)};
  return {true, fmt("200 mask pairs exact, identity within %.2g, AUC max deviation %.2g", identity_worst, auc_worst)};
}

// ---- 5, 6, 8 ----------------------------------------------------------------

struct Runs {
  fs::path root;
  std::optional<RunResult> ci_a, ci_b, noniid;
};

RunResult run_preset(const std::string& name, const fs::path& dir) {
  auto cfg = preset(name);
  cfg.output_dir = dir.string();
  fs::remove_all(dir);
  std::cerr << "running preset " << name << " into " << dir << "\n";
  return run_experiment(cfg, &std::cerr);
}

Outcome learning_signal(Runs& runs) {
  if (!runs.ci_a) runs.ci_a = run_preset("desk-ci", runs.root / "desk-ci-a");
  const auto& r = *runs.ci_a;
  const double d0 = r.round_mean_dice.front(), dR = r.round_mean_dice.back();
  const bool ok = dR - d0 >= 0.3 && dR >= 0.6 && r.seconds <= 1800;
  return {ok, fmt("round-0 Dice %.4f, final Dice %.4f (gain %.4f), %.0f s", d0, dR, dR - d0, r.seconds)};
}

Outcome dt_direction(Runs& runs) {
  if (!runs.noniid) runs.noniid = run_preset("noniid", runs.root / "noniid");
  const auto& t = runs.noniid->comparison;
  const bool ok = t.mean_delta_dice >= 0.0 && t.dice_non_negative >= 6;
  return {ok, fmt("mean DT - global Dice %+.4f, %zu of %zu clients non-negative", t.mean_delta_dice,
                  t.dice_non_negative, t.rows.size())};
}

Outcome end_to_end_determinism(Runs& runs) {
  if (!runs.ci_a) runs.ci_a = run_preset("desk-ci", runs.root / "desk-ci-a");
  if (!runs.ci_b) runs.ci_b = run_preset("desk-ci", runs.root / "desk-ci-b");
  const std::string a = read_file(runs.ci_a->dir / "reports/comparison.csv");
  const std::string b = read_file(runs.ci_b->dir / "reports/comparison.csv");
  if (a.empty()) return {false, "comparison.csv missing"};
  const bool ckpt = read_file(runs.ci_a->dir / "checkpoints/global_round_10.ckpt") ==
                    read_file(runs.ci_b->dir / "checkpoints/global_round_10.ckpt");
  if (a != b) return {false, "comparison CSVs differ"};
  return {ckpt, ckpt ? fmt("comparison CSVs byte-identical (%zu bytes), final checkpoints identical", a.size())
                     : std::string("CSVs equal but final checkpoints differ")};
}

// ---- 7 ----------------------------------------------------------------------

Outcome persistence(const fs::path& root) {
  const fs::path dir = root / "persistence";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::mt19937_64 rng(707);
  std::size_t rejected = 0;
  for (int i = 0; i < 50; ++i) {
    const auto s = oracle::random_store(rng);
    const fs::path p = dir / ("store" + std::to_string(i) + ".ckpt");
    save_checkpoint(s, p, "h");
    if (!load_checkpoint(p).bit_equal(s)) return {false, fmt("store %d did not round-trip", i)};

    const std::string bytes = read_file(p);
    std::vector<std::string> bad = {bytes.substr(0, rng() % bytes.size()), bytes + "x"};
    for (int f = 0; f < 4; ++f) {
      std::string b = bytes;
      b[rng() % b.size()] ^= static_cast<char>(1 << (rng() % 8));
      bad.push_back(b);
    }
    for (const auto& b : bad) {
      const fs::path q = dir / "corrupt.ckpt";
      { std::ofstream(q, std::ios::binary) << b; }
      ParameterStore target = s.clone();
      try {
        target = load_checkpoint(q);
        return {false, fmt("store %d: corrupted file accepted", i)};
      } catch (const CheckpointError&) {
        if (!target.bit_equal(s)) return {false, "failed load modified the destination"};
        ++rejected;
      }
    }
  }
  // a failed save leaves the previous file intact and no temporary behind
  const auto s = oracle::random_store(rng);
  const fs::path p = dir / "kept.ckpt";
  save_checkpoint(s, p);
  fs::create_directories(dir / "blocker.ckpt");
  try {
    save_checkpoint(s, dir / "blocker.ckpt");
  } catch (const CheckpointError&) {
  }
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().string().find(".tmp") != std::string::npos) return {false, "temporary file left behind"};
  if (!load_checkpoint(p).bit_equal(s)) return {false, "existing checkpoint damaged"};
  fs::remove_all(dir);
  return {true, fmt("50 stores bit-identical, %zu corrupted files rejected", rejected)};
}

// ---- 9 ----------------------------------------------------------------------

Outcome paper_scale() {
  const auto v = validate_paper_preset(true);
  const bool built = v.parameters > 0 && v.parameters == v.inventory_parameters;
  const bool shape = v.output_shape == Shape{1, 4, 128, 128, 128};
  const bool ok = built && v.divisibility == "ok" && shape;
  return {ok, fmt("%zu parameters, divisibility %s, forward %s, output ", v.parameters, v.divisibility.c_str(),
                  v.forward_ran ? "ran" : "skipped (memory)") +
                  shape_string(v.output_shape)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "twinseg_acceptance").string();
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--work", work, "scratch directory for experiment runs");
  CLI11_PARSE(app, argc, argv);

  Runs runs{work, {}, {}, {}};
  fs::create_directories(runs.root);
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, gradient_suite},
      {2, fedavg_algebra},
      {3, one_client_equivalence},
      {4, metric_oracles},
      {5, [&] { return learning_signal(runs); }},
      {6, [&] { return dt_direction(runs); }},
      {7, [&] { return persistence(runs.root); }},
      {8, [&] { return end_to_end_determinism(runs); }},
      {9, paper_scale},
  };
  const char* names[] = {"",
                         "gradient correctness",
                         "fedavg algebra",
                         "one-client equivalence",
                         "metric oracles",
                         "learning signal",
                         "digital-twin direction",
                         "persistence",
                         "end-to-end determinism",
                         "paper-scale constructibility"};
  int failed = 0;
  for (const auto& [id, check] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << names[id] << "): " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
