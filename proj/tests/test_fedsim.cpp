#include <doctest.h>

#include "oracles.hpp"
#include "twinseg/fedsim.hpp"

#include <cmath>

using namespace twinseg;

namespace {

ModelConfig micro() {
  ModelConfig c;
  c.input_extent = 8;
  c.encoder_levels = 1;
  c.base_channels = 4;
  c.vit = {2, 8, 2, 1, 2};
  return c;
}

// Preprocessed-looking subjects: random image, a labelled cube in the middle.
ClientDataset tiny_client(std::size_t id, std::size_t train, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ClientDataset d;
  d.client_id = id;
  d.name = "c" + std::to_string(id);
  auto subject = [&](std::size_t i) {
    Volume v;
    v.subject_id = d.name + "-" + std::to_string(i);
    v.label = LabelMap({8, 8, 8});
    for (std::size_t z = 2; z < 6; ++z)
      for (std::size_t y = 2; y < 6; ++y)
        for (std::size_t x = 2; x < 6; ++x) v.label(z, y, x) = static_cast<std::uint8_t>(1 + (z + y + x) % 3);
    v.image = oracle::random_tensor({4, 8, 8, 8}, rng, -0.3, 0.3);
    for (std::size_t m = 0; m < 4; ++m)
      for (std::size_t i2 = 0; i2 < 512; ++i2) v.image.data()[m * 512 + i2] += (v.label.data[i2] == m) ? 1.0 : 0.0;
    v.preprocessed = true;
    return v;
  };
  for (std::size_t i = 0; i < train; ++i) d.train.push_back(subject(i));
  d.val.push_back(subject(train));
  d.test.push_back(subject(train + 1));
  return d;
}

TrainConfig tiny_train(std::size_t epochs = 1) {
  TrainConfig t;
  t.model = micro();
  t.epochs = epochs;
  t.batch_size = 2;
  t.adam.lr = 1e-3;
  return t;
}

ParameterStore one_entry(std::vector<double> v) {
  ParameterStore s;
  const std::size_t n = v.size();
  s.add("w", Tensor(Shape{n}, std::move(v)), EntryKind::trainable);
  return s;
}

}  // namespace

TEST_CASE("fedavg examples") {
  std::vector<ClientUpdate> u{{0, 1, one_entry({0.0})}, {1, 3, one_entry({4.0})}};
  CHECK(fedavg_aggregate(u).at("w")[0] == 3.0);

  const auto base = build_model(micro(), 1);
  std::vector<ClientUpdate> same;
  for (std::size_t k = 0; k < 5; ++k) same.push_back({k, k + 1, base.clone()});
  CHECK(fedavg_aggregate(same).bit_equal(base));

  CHECK(fedavg_aggregate({{3, 7, base.clone()}}).bit_equal(base));
  CHECK_THROWS_AS(fedavg_aggregate({}), std::invalid_argument);
  CHECK_THROWS_WITH_AS(fedavg_aggregate({{1, 1, base.clone()}, {1, 2, base.clone()}}), doctest::Contains("duplicate"),
                       std::invalid_argument);
  auto other = base.clone();
  other.add("extra", Tensor(Shape{2}), EntryKind::trainable);
  CHECK_THROWS_WITH_AS(fedavg_aggregate({{0, 1, base.clone()}, {1, 1, other}}), doctest::Contains("'extra'"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(fedavg_aggregate({{0, 1, one_entry({1, 2})}, {1, 1, one_entry({1, 2, 3})}}),
                       doctest::Contains("'w' shape"), std::invalid_argument);
}

TEST_CASE("fedavg matches the long double weighted mean") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t K = 2 + rng() % 7;
    std::vector<std::vector<double>> values;
    std::vector<std::size_t> n;
    std::vector<ClientUpdate> updates;
    for (std::size_t k = 0; k < K; ++k) {
      const Tensor t = oracle::random_tensor({64}, rng);
      values.emplace_back(t.values().begin(), t.values().end());
      n.push_back(1 + rng() % 50);
      updates.push_back({k, n.back(), one_entry(values.back())});
    }
    std::shuffle(updates.begin(), updates.end(), rng);  // order of arrival is irrelevant
    const auto ref = oracle::weighted_mean(values, n);
    const auto got = fedavg_aggregate(updates).at("w");
    double worst = 0.0;
    for (std::size_t i = 0; i < 64; ++i) worst = std::max(worst, static_cast<double>(std::abs(got[i] - ref[i])));
    CHECK(worst <= 1e-15);
  }
}

TEST_CASE("fedavg is linear and averages buffers") {
  std::mt19937_64 rng(3);
  std::vector<ClientUpdate> a, b;
  for (std::size_t k = 0; k < 4; ++k) {
    auto s = build_model(micro(), 10 + k);
    for (auto& [name, e] : s)
      if (e.kind == EntryKind::buffer)
        for (auto& v : e.tensor.mutable_values()) v = static_cast<double>(k);
    auto scaled = s.clone();
    for (auto& [name, e] : scaled)
      for (auto& v : e.tensor.mutable_values()) v *= 4.0;
    a.push_back({k, 1 + k, s});
    b.push_back({k, 1 + k, scaled});
  }
  const auto ga = fedavg_aggregate(a), gb = fedavg_aggregate(b);
  for (const auto& [name, e] : ga) {
    const auto& t = gb.at(name);
    for (std::size_t i = 0; i < e.tensor.numel(); ++i) CHECK(t[i] == 4.0 * e.tensor[i]);
  }
  // running statistics k = 0..3 weighted by 1..4: (0 + 2 + 6 + 12) / 10
  CHECK(ga.at("enc0.a.bn.running_mean")[0] == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("participation policy") {
  ParticipationPolicy all;
  CHECK(all.select(0, 9) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8});
  ParticipationPolicy half{0.5, 9, {}};
  const auto s0 = half.select(0, 9);
  CHECK(s0.size() == 5);
  CHECK(std::is_sorted(s0.begin(), s0.end()));
  CHECK(s0 == half.select(0, 9));
  ParticipationPolicy drop{1.0, 0, {2, 5}};
  CHECK(drop.select(4, 6) == std::vector<std::size_t>{0, 1, 3, 4});
  CHECK_THROWS_AS((ParticipationPolicy{0.0, 0, {}}.select(0, 3)), std::invalid_argument);
}

TEST_CASE("local training") {
  const auto client = tiny_client(0, 4, 5);
  const auto init = build_model(micro(), 4);
  const auto snapshot = init.clone();

  const auto a = local_train(init, client, tiny_train(2), 17), b = local_train(init, client, tiny_train(2), 17);
  CHECK(a.params.bit_equal(b.params));
  CHECK(a.epoch_loss == b.epoch_loss);
  CHECK(a.steps == 4);
  CHECK(init.bit_equal(snapshot));
  CHECK_FALSE(a.params.bit_equal(init));
  CHECK_FALSE(local_train(init, client, tiny_train(2), 18).params.bit_equal(a.params));
  for (const auto& [name, e] : a.params) CHECK_FALSE(e.tensor.has_grad());

  auto empty = client;
  empty.train.clear();
  CHECK_THROWS_WITH_AS(local_train(init, empty, tiny_train(), 1), doctest::Contains("empty training split"),
                       std::invalid_argument);
  CHECK_THROWS_AS(local_train(init, client, tiny_train(0), 1), std::invalid_argument);
  auto raw = client;
  raw.train[0].preprocessed = false;
  CHECK_THROWS_AS(local_train(init, raw, tiny_train(), 1), std::invalid_argument);
}

TEST_CASE("local training lowers the loss on a small client") {
  const auto client = tiny_client(0, 4, 6);
  auto cfg = tiny_train(40);
  cfg.augment.enabled = false;
  const auto r = local_train(build_model(micro(), 5), client, cfg, 3);
  REQUIRE(r.epoch_loss.size() == 40);
  CHECK(r.epoch_loss.back() < 0.8 * r.epoch_loss.front());
}

TEST_CASE("federated rounds") {
  std::vector<ClientDataset> clients;
  for (std::size_t k = 0; k < 3; ++k) clients.push_back(tiny_client(k, 2 + k, 100 + k));
  GlobalState s0{0, build_model(micro(), 7), {}};
  const auto cfg = tiny_train();

  SUBCASE("serial and parallel execution agree bit for bit") {
    const auto a = run_round(s0, clients, cfg, {}, 11, Execution::serial);
    const auto b = run_round(s0, clients, cfg, {}, 11, Execution::parallel, 3);
    CHECK(a.params.bit_equal(b.params));
    CHECK(a.round == 1);
    REQUIRE(a.logs.size() == 1);
    CHECK(a.logs[0].total_samples == 2 + 3 + 4);
    CHECK(a.logs[0].participants == std::vector<std::size_t>{0, 1, 2});
    const auto c = run_round(a, clients, cfg, {}, 11);
    CHECK(c.round == 2);
    CHECK(c.logs.size() == 2);
  }
  SUBCASE("a single participant's update is adopted unchanged") {
    const ParticipationPolicy only1{1.0, 0, {0, 2}};
    const auto r = run_round(s0, clients, cfg, only1, 11);
    const auto local = local_train(s0.params, clients[1], cfg, client_round_seed(11, 0, 1));
    CHECK(r.params.bit_equal(local.params));
    CHECK(r.logs[0].total_samples == 3);
  }
  SUBCASE("dropped clients leave the weights and N_r") {
    const auto r = run_round(s0, clients, cfg, {1.0, 0, {2}}, 11);
    CHECK(r.logs[0].total_samples == 5);
    const auto l0 = local_train(s0.params, clients[0], cfg, client_round_seed(11, 0, 0));
    const auto l1 = local_train(s0.params, clients[1], cfg, client_round_seed(11, 0, 1));
    CHECK(r.params.bit_equal(fedavg_aggregate({{0, 2, l0.params}, {1, 3, l1.params}})));
  }
  SUBCASE("nobody participating is an error and the state is kept") {
    const auto before = s0.params.clone();
    CHECK_THROWS_WITH_AS(run_round(s0, clients, cfg, {1.0, 0, {0, 1, 2}}, 11), doctest::Contains("no participants"),
                         std::invalid_argument);
    CHECK(s0.round == 0);
    CHECK(s0.params.bit_equal(before));
  }
  SUBCASE("round log") {
    const auto r = run_round(s0, clients, cfg, {}, 11);
    const std::string line = round_log_json(r.logs[0], "deadbeef");
    CHECK(line.find("\"config_hash\":\"deadbeef\"") != std::string::npos);
    CHECK(line.find("wall") == std::string::npos);
    CHECK(line.find('\n') == std::string::npos);
  }
}

TEST_CASE("digital twin fine-tuning") {
  const auto client = tiny_client(2, 4, 9);
  const auto global = build_model(micro(), 8);
  const auto snapshot = global.clone();
  const auto cfg = tiny_train();
  const auto dt = fine_tune_digital_twin(global, client, cfg, 1, 21);
  CHECK(global.bit_equal(snapshot));
  CHECK_FALSE(dt.bit_equal(global));
  CHECK(dt.bit_equal(fine_tune_digital_twin(global, client, cfg, 1, 21)));
  CHECK(dt.compatible_with(global));
  CHECK_THROWS_AS(fine_tune_digital_twin(global, client, cfg, 0, 21), std::invalid_argument);
}
