#include <doctest.h>

#include "twinseg/config.hpp"
#include "twinseg/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace twinseg;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Smallest configuration that exercises the full pipeline.
nlohmann::json tiny_run(const fs::path& out) {
  return {{"preset", "desk-ci"},
          {"rounds", 1},
          {"local_epochs", 1},
          {"model", {{"input_extent", 16}, {"encoder_levels", 2}, {"base_channels", 4},
                     {"vit", {{"patch_size", 2}, {"embed_dim", 8}}}}},
          {"cohort", {{"scale", 0.004}, {"min_count", 3}}},
          {"output_dir", out.string()}};
}

}  // namespace

TEST_CASE("presets") {
  const auto desk = preset("desk");
  CHECK(desk.rounds == 10);
  CHECK(desk.local_epochs == 5);
  CHECK(desk.batch_size == 2);
  CHECK(desk.learning_rate == 1e-3);
  CHECK(desk.model.input_extent == 32);
  CHECK(preset("desk-ci").local_epochs == 2);
  CHECK(preset("noniid").cohort.kind == CohortKind::strongly_noniid);
  const auto paper = preset("paper");
  CHECK(paper.model.input_extent == 128);
  CHECK(paper.learning_rate == 1e-4);
  CHECK(ExperimentConfig{}.learning_rate == 1e-4);
  for (const auto& name : preset_names()) CHECK_NOTHROW(preset(name).validate());
  CHECK_THROWS_WITH_AS(preset("huge"), doctest::Contains("unknown preset"), std::invalid_argument);
}

TEST_CASE("config errors name the offending field") {
  auto err = [](const nlohmann::json& doc) {
    try {
      config_from_json(doc);
    } catch (const std::invalid_argument& e) {
      return std::string(e.what());
    }
    return std::string("accepted");
  };
  CHECK(err({{"model", {{"vit", {{"patchsize", 4}}}}}}).find("model.vit.patchsize") != std::string::npos);
  CHECK(err({{"roundz", 3}}).find("roundz") != std::string::npos);
  CHECK(err({{"rounds", "ten"}}).find("rounds") != std::string::npos);
  CHECK(err({{"rounds", 0}}).find("rounds") != std::string::npos);
  CHECK(err({{"loss", "focal"}}).find("loss") != std::string::npos);
  CHECK(err({{"participation", {{"dropped", {12}}}}}).find("participation.dropped") != std::string::npos);
  CHECK(err({{"model", {{"input_extent", 30}}}}).find("model") != std::string::npos);
  CHECK(err({{"dt", {{"epochs", 0}}}}).find("dt.epochs") != std::string::npos);
  CHECK(err({{"rounds", 3}}) == "accepted");
}

TEST_CASE("config json round trip and hash") {
  auto c = config_from_json({{"preset", "desk-ci"}, {"seed", 7}, {"dt", {{"schedule", "per-round"}}}});
  CHECK(c.seed == 7);
  CHECK(c.dt_schedule == DtSchedule::per_round);
  CHECK(c.local_epochs == 2);
  const auto back = config_from_json(to_json(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(to_json(back) == to_json(c));

  const std::string h = config_hash(c);
  CHECK(h.size() == 16);
  CHECK(h.find_first_not_of("0123456789abcdef") == std::string::npos);
  auto moved = c;
  moved.output_dir = "/elsewhere";
  moved.execution = Execution::parallel;
  moved.threads = 3;
  CHECK(config_hash(moved) == h);
  auto reseeded = c;
  reseeded.seed = 8;
  CHECK(config_hash(reseeded) != h);
  CHECK(config_hash(preset("desk")) != config_hash(preset("desk-ci")));
}

TEST_CASE("config files allow comments") {
  const fs::path p = fs::temp_directory_path() / "twinseg_config_test.json";
  {
    std::ofstream out(p);
    out << "{\n  // fewer rounds for a quick look\n  \"preset\": \"noniid\",\n  \"rounds\": 2\n}\n";
  }
  const auto c = load_config(p);
  CHECK(c.rounds == 2);
  CHECK(c.cohort.kind == CohortKind::strongly_noniid);
  fs::remove(p);
  CHECK_THROWS(load_config(p));
}

TEST_CASE("dry-run plan") {
  const auto c = preset("desk-ci");
  const std::string plan = describe_plan(c);
  CHECK(plan.find(config_hash(c)) != std::string::npos);
  CHECK(plan.find("Hospital1") != std::string::npos);
  CHECK(plan.find("Hospital9") != std::string::npos);
}

TEST_CASE("end-to-end run on a micro configuration") {
  const fs::path dir = fs::temp_directory_path() / "twinseg_e2e_test";
  fs::remove_all(dir);
  const auto cfg = config_from_json(tiny_run(dir));
  const auto result = run_experiment(cfg);
  CHECK(result.config_hash == config_hash(cfg));
  CHECK(result.round_mean_dice.size() == 2);
  CHECK(result.global.size() == 9);
  CHECK(result.comparison.rows.size() == 9);
  CHECK_FALSE(fs::exists(dir / "RUN_INCOMPLETE"));
  for (const char* f : {"config.json", "summary.json", "cohort/manifest.json", "logs/rounds.ndjson",
                        "checkpoints/global_round_00.ckpt", "checkpoints/global_round_01.ckpt",
                        "checkpoints/dt/Hospital1.ckpt", "reports/comparison.csv", "reports/metrics_global.json",
                        "reports/metrics_dt.json", "reports/per_class_global.csv", "reports/roc.csv",
                        "reports/rounds.csv", "reports/plot_long.csv"})
    CHECK_MESSAGE(fs::exists(dir / f), f);

  const std::string before = read_file(dir / "reports/comparison.csv");
  const std::string metrics_before = read_file(dir / "reports/metrics_dt.json");
  fs::remove_all(dir / "reports");
  emit_reports(dir);
  CHECK(read_file(dir / "reports/comparison.csv") == before);
  CHECK(read_file(dir / "reports/metrics_dt.json") == metrics_before);

  fs::remove(dir / "checkpoints/dt/Hospital3.ckpt");
  CHECK_THROWS_WITH(emit_reports(dir), doctest::Contains("Hospital3"));
  { std::ofstream(dir / "RUN_INCOMPLETE") << "interrupted\n"; }
  CHECK_THROWS_WITH(emit_reports(dir), doctest::Contains("RUN_INCOMPLETE"));
  fs::remove_all(dir);
}
