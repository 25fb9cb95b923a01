// Batch experiment runner: synthesis, two-stage training, baselines,
// evaluation, and reporting, driven by an INI config.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include <tspf/tspf.hpp>

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool has_seed = false;
  std::size_t workers = 0;
};

void add_common(CLI::App* sub, CommonFlags& f, bool needs_config) {
  auto* copt = sub->add_option("--config", f.config, "experiment config file (INI)");
  if (needs_config) copt->required();
  sub->add_option("--out", f.out, "output directory (default: config, then $TSPF_OUT_ROOT)");
  sub->add_option("--seed", f.seed, "override the experiment seed")
      ->each([&f](const std::string&) { f.has_seed = true; });
  sub->add_option("--workers", f.workers, "parallel replications (default from config)");
}

tspf::ExperimentConfig load_with_overrides(const CommonFlags& f) {
  tspf::ExperimentConfig cfg = tspf::load_experiment_config(f.config);
  if (f.has_seed) {
    cfg.seed = f.seed;
    cfg.train.seed = f.seed;
  }
  if (f.workers > 0) cfg.workers = f.workers;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage treatment effect estimation pipeline"};
  app.require_subcommand(1);

  CommonFlags run_f, tune_f, synth_f, report_f;
  std::string report_dir;

  auto* cmd_run = app.add_subcommand("run", "train, evaluate, and write a results directory");
  add_common(cmd_run, run_f, true);

  auto* cmd_tune = app.add_subcommand("tune", "grid-search the loss scales");
  add_common(cmd_tune, tune_f, true);

  auto* cmd_report = app.add_subcommand("report", "re-render the table for a results directory");
  cmd_report->add_option("dir", report_dir, "results directory holding metrics.json");
  add_common(cmd_report, report_f, false);

  auto* cmd_synth = app.add_subcommand("synth", "generate and save a dataset bundle");
  add_common(cmd_synth, synth_f, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_run->parsed()) {
      auto cfg = load_with_overrides(run_f);
      const std::string out = tspf::resolve_out_dir(cfg, run_f.out);
      auto result = tspf::run_experiment(cfg, out);
      std::size_t failed = 0;
      for (const auto& oc : result.outcomes)
        if (oc.failed) {
          ++failed;
          std::cerr << "replication " << oc.rep << " failed: " << oc.error << "\n";
        }
      std::cout << tspf::render_table(result.reports);
      std::cout << "(" << (result.outcomes.size() - failed) << "/" << result.outcomes.size()
                << " replications; results in " << out << ")\n";
      return 0;
    }
    if (cmd_tune->parsed()) {
      auto cfg = load_with_overrides(tune_f);
      const std::string out = tspf::resolve_out_dir(cfg, tune_f.out);
      auto tr = tspf::tune_lambdas(cfg, cfg.workers);
      std::filesystem::create_directories(out);
      tspf::save_json(tspf::tune_result_json(tr, tspf::config_hash(cfg)),
                      (std::filesystem::path(out) / "tune.json").string());
      std::cout << "best: lambda1=" << tr.best.lambda1 << " lambda2=" << tr.best.lambda2
                << " lambda3=" << tr.best.lambda3 << " lambda4=" << tr.best.lambda4
                << " (validation loss " << tr.best.score << ")\n"
                << tr.candidates.size() << " candidates scored; written to " << out << "\n";
      return 0;
    }
    if (cmd_report->parsed()) {
      std::string dir = !report_dir.empty() ? report_dir : report_f.out;
      if (dir.empty())
        throw std::runtime_error("report: pass a results directory (positional or --out)");
      std::cout << tspf::report_from_dir(dir);
      return 0;
    }
    if (cmd_synth->parsed()) {
      auto cfg = load_with_overrides(synth_f);
      const std::string out = tspf::resolve_out_dir(cfg, synth_f.out);
      const auto seeds = tspf::replication_seeds(cfg.seed, 0);
      tspf::Tensor cov;
      if (cfg.dataset == "synthetic") {
        cov = tspf::synthetic_covariates(cfg.n, cfg.d, seeds.synth);
      } else {
        const std::size_t expect = cfg.dataset == "ihdp" ? 25 : 17;
        cov = tspf::load_covariates(cfg.covariates_path, expect).x;
      }
      tspf::SynthesisParams params;
      auto bundle = tspf::build_bundle(cfg, cov, seeds, &params);
      tspf::save_bundle(bundle, params, out);
      std::cout << "bundle written to " << out << ": obs_train=" << bundle.obs_train.size()
                << " rct_train=" << bundle.rct_train.size()
                << " validation=" << bundle.validation.size() << " test=" << bundle.test.size()
                << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
