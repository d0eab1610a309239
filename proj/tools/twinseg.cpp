// twinseg: federated segmentation experiment driver.
#include "twinseg/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

using namespace twinseg;

namespace {

ExperimentConfig resolve(const std::string& config_path, const std::string& preset_name,
                         const std::optional<std::uint64_t>& seed, const std::string& out) {
  ExperimentConfig cfg = config_path.empty() ? preset(preset_name.empty() ? "desk" : preset_name) : load_config(config_path);
  if (!config_path.empty() && !preset_name.empty())
    throw std::invalid_argument("use either --config or --preset, not both");
  if (seed) cfg.seed = *seed;
  if (!out.empty()) cfg.output_dir = out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated 3D tumour segmentation with per-client digital twins"};
  app.require_subcommand(1);

  std::string config_path, preset_name, out;
  std::optional<std::uint64_t> seed;
  bool dry_run = false, quiet = false;

  auto* run = app.add_subcommand("run", "generate the cohort, train, fine-tune twins, write reports");
  run->add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
  run->add_option("--preset", preset_name, "start from a built-in preset (desk, desk-ci, noniid, paper)");
  run->add_option("--seed", seed, "global seed, overrides the config");
  run->add_option("--out", out, "output directory, overrides the config");
  run->add_flag("--dry-run", dry_run, "validate the config and print the plan");
  run->add_flag("-q,--quiet", quiet, "no progress output");

  std::string run_dir;
  auto* emit = app.add_subcommand("emit-reports", "rebuild reports of a finished run from its checkpoints");
  emit->add_option("dir", run_dir, "run directory")->required();

  bool no_forward = false;
  auto* val = app.add_subcommand("validate", "check the 128^3 paper preset");
  val->add_flag("--no-forward", no_forward, "skip the forward pass");

  auto* show = app.add_subcommand("show-config", "print the resolved config as JSON");
  show->add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
  show->add_option("--preset", preset_name, "built-in preset");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto cfg = resolve(config_path, preset_name, seed, out);
      if (dry_run) {
        std::cout << describe_plan(cfg);
        return 0;
      }
      const auto res = run_experiment(cfg, quiet ? nullptr : &std::cerr);
      std::cout << "run directory      " << res.dir.string() << "\n"
                << "config hash        " << res.config_hash << "\n"
                << "round 0 dice       " << res.round_mean_dice.front() << "\n"
                << "final global dice  " << res.round_mean_dice.back() << "\n"
                << "mean DT - global   " << res.comparison.mean_delta_dice << "\n"
                << "wall time (s)      " << res.seconds << "\n";
    } else if (*emit) {
      const auto res = emit_reports(run_dir, &std::cerr);
      std::cout << "reports written to " << (res.dir / "reports").string() << "\n";
    } else if (*val) {
      const auto v = validate_paper_preset(!no_forward);
      std::cout << "divisibility       " << v.divisibility << "\n"
                << "parameters         " << v.parameters << " trainable (inventory " << v.inventory_parameters
                << "), " << v.buffers << " buffer values\n"
                << "forward            " << (v.forward_ran ? "ran" : "skipped") << " (" << v.note << ")\n"
                << "output shape       " << shape_string(v.output_shape) << "\n";
      return v.divisibility == "ok" && v.parameters == v.inventory_parameters ? 0 : 1;
    } else if (*show) {
      const auto cfg = resolve(config_path, preset_name, std::nullopt, "");
      std::cout << to_json(cfg).dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
