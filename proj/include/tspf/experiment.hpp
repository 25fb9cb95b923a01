#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tspf/baselines.hpp"
#include "tspf/config.hpp"
#include "tspf/data.hpp"
#include "tspf/eval.hpp"
#include "tspf/model.hpp"
#include "tspf/serialize.hpp"

namespace tspf {

// Each replication owns an independent (synthesis, split, init) seed
// triple derived from the experiment seed, so results do not depend on
// worker scheduling.
struct SeedTriple {
  std::uint64_t synth, split, init;
};

inline SeedTriple replication_seeds(std::uint64_t base, std::size_t rep) {
  return {derive_seed(base, 3 * rep), derive_seed(base, 3 * rep + 1),
          derive_seed(base, 3 * rep + 2)};
}

inline Tensor synthetic_covariates(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x636f76ULL));
  Tensor x = Tensor::zeros({n, d});
  for (auto& v : x.values) v = rng.normal(0.0, 1.0);
  return x;
}

inline DatasetBundle build_bundle(const ExperimentConfig& cfg, const Tensor& cov,
                                  const SeedTriple& seeds, SynthesisParams* params_out = nullptr) {
  auto syn = synthesize(cov, cfg.c, seeds.synth);
  if (params_out) *params_out = syn.params;
  auto sp = split(syn.data, seeds.split);
  RctSplit rs = cfg.rct_count > 0
                    ? make_rct_count(sp.train, cfg.rct_count, derive_seed(seeds.split, 1))
                    : make_rct(sp.train, cfg.rct_fraction, derive_seed(seeds.split, 1));
  DatasetBundle b;
  b.obs_train = std::move(rs.obs_train);
  b.rct_train = std::move(rs.rct_train);
  b.validation = rerandomize_validation(sp.validation, derive_seed(seeds.split, 2));
  b.test = std::move(sp.test);
  return b;
}

struct ReplicationOutcome {
  std::size_t rep = 0;
  bool failed = false;
  std::string error;
  std::map<std::string, RunMetrics> metrics;
};

namespace detail {

inline void ensure_finite_metrics(const RunMetrics& m, const std::string& method) {
  for (double v : {m.pehe_in, m.pehe_out, m.ate_in, m.ate_out})
    if (!std::isfinite(v))
      throw std::runtime_error(method + ": non-finite metric; training diverged");
}

inline void write_stage1_history_csv(const Stage1History& h, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,total,factual,reconstruction,balancing,validation,flagged_batches\n";
  for (std::size_t e = 0; e < h.epochs.size(); ++e) {
    const auto& ep = h.epochs[e];
    out << (e + 1) << "," << fmt_g17(ep.total) << "," << fmt_g17(ep.l_f) << ","
        << fmt_g17(ep.l_rec) << "," << fmt_g17(ep.l_unb) << "," << fmt_g17(ep.val) << ","
        << ep.flagged_batches << "\n";
  }
}

inline void write_stage2_history_csv(const Stage2History& h, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,total,prediction,mi_bound,shift,q_objective,validation\n";
  for (std::size_t e = 0; e < h.epochs.size(); ++e) {
    const auto& ep = h.epochs[e];
    out << (e + 1) << "," << fmt_g17(ep.total) << "," << fmt_g17(ep.l_pred) << ","
        << fmt_g17(ep.l_mi) << "," << fmt_g17(ep.l_shift) << "," << fmt_g17(ep.q_obj) << ","
        << fmt_g17(ep.val) << "\n";
  }
}

}  // namespace detail

// Trains TSPF (and optionally the one-stage comparators) on one seeded
// bundle. Failures are captured, not propagated, so sibling replications
// survive a diverging run. Artifacts are written when rep_dir is nonempty.
inline ReplicationOutcome run_replication(const ExperimentConfig& cfg, const Tensor& raw_cov,
                                          std::size_t rep, const std::string& rep_dir) {
  ReplicationOutcome out;
  out.rep = rep;
  const std::string hash = config_hash(cfg);
  try {
    const SeedTriple seeds = replication_seeds(cfg.seed, rep);
    Tensor cov = cfg.dataset == "synthetic" ? synthetic_covariates(cfg.n, cfg.d, seeds.synth)
                                            : raw_cov;
    DatasetBundle bundle = build_bundle(cfg, cov, seeds);

    TrainConfig tc = cfg.train;
    tc.seed = seeds.init;

    namespace fs = std::filesystem;
    if (!rep_dir.empty()) fs::create_directories(rep_dir);

    Stage1Model s1 = init_stage1(bundle.obs_train.dim(), tc);
    Stage1History h1 = train_stage1(s1, bundle.obs_train, tc, &bundle.validation);
    Stage2Model s2 = init_stage2_from_stage1(s1, tc);
    Stage2History h2 = train_stage2(s2, bundle.rct_train, tc, &bundle.validation);

    RunMetrics m = evaluate([&](const Tensor& x) { return predict_cate(s2, x); }, bundle);
    detail::ensure_finite_metrics(m, "tspf");
    out.metrics["tspf"] = m;

    if (!rep_dir.empty()) {
      save_json(stage2_to_json(s2, hash), (fs::path(rep_dir) / "checkpoint_tspf.json").string());
      detail::write_stage1_history_csv(h1, (fs::path(rep_dir) / "history_stage1.csv").string());
      detail::write_stage2_history_csv(h2, (fs::path(rep_dir) / "history_stage2.csv").string());
    }

    if (cfg.run_baselines) {
      Dataset pool = Dataset::concat(bundle.obs_train, bundle.rct_train);
      struct Comp {
        const char* name;
        BaselineModel model;
      };
      std::vector<Comp> comps;
      comps.push_back({"t_learner", train_t_learner(pool, tc, &bundle.validation)});
      comps.push_back({"s_learner", train_s_learner(pool, tc, &bundle.validation)});
      comps.push_back({"stage1_only", train_stage1_only(pool, tc, &bundle.validation)});
      for (auto& c : comps) {
        RunMetrics bm =
            evaluate([&](const Tensor& x) { return c.model.predict_cate(x); }, bundle);
        detail::ensure_finite_metrics(bm, c.name);
        out.metrics[c.name] = bm;
        if (!rep_dir.empty())
          save_json(baseline_to_json(c.model, hash),
                    (fs::path(rep_dir) / ("checkpoint_" + std::string(c.name) + ".json")).string());
      }
    }
  } catch (const std::exception& e) {
    out.failed = true;
    out.error = e.what();
    out.metrics.clear();
  }
  return out;
}

struct ExperimentResult {
  std::string out_dir;
  std::vector<ReplicationOutcome> outcomes;
  std::vector<MetricsReport> reports;  // one per method, name-sorted
  nlohmann::json consolidated;
};

namespace detail {

inline void run_pool(std::size_t jobs, std::size_t workers,
                     const std::function<void(std::size_t)>& body) {
  workers = std::max<std::size_t>(1, std::min(workers, jobs));
  if (workers == 1) {
    for (std::size_t k = 0; k < jobs; ++k) body(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto drain = [&]() {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= jobs) break;
      body(k);
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t w = 1; w < workers; ++w) threads.emplace_back(drain);
  drain();
  for (auto& t : threads) t.join();
}

}  // namespace detail

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  Tensor cov;
  if (cfg.dataset != "synthetic") {
    const std::size_t expect = cfg.dataset == "ihdp" ? 25 : 17;
    cov = load_covariates(cfg.covariates_path, expect).x;
  }

  ExperimentResult result;
  result.out_dir = out_dir;
  result.outcomes.resize(cfg.replications);
  detail::run_pool(cfg.replications, cfg.workers, [&](std::size_t k) {
    const std::string rep_dir = (fs::path(out_dir) / ("rep_" + std::to_string(k))).string();
    result.outcomes[k] = run_replication(cfg, cov, k, rep_dir);
  });

  const std::string hash = config_hash(cfg);
  std::map<std::string, MetricsReport> by_method;
  for (const auto& oc : result.outcomes) {
    if (oc.failed) continue;
    for (const auto& [name, m] : oc.metrics) {
      auto& rep = by_method[name];
      rep.model = name;
      rep.config_hash = hash;
      rep.reps.push_back(m);
    }
  }
  if (by_method.empty()) throw std::runtime_error("run_experiment: every replication failed");

  nlohmann::json methods;
  for (auto& [name, rep] : by_method) {
    rep.finalize();
    methods[name] = metrics_report_json(rep);
    result.reports.push_back(rep);
  }
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& oc : result.outcomes)
    if (oc.failed) failures.push_back({{"rep", oc.rep}, {"error", oc.error}});

  result.consolidated = nlohmann::json{{"config_hash", hash},
                                       {"dataset", cfg.dataset},
                                       {"replications", cfg.replications},
                                       {"failed", failures},
                                       {"methods", methods}};
  save_json(result.consolidated, (fs::path(out_dir) / "metrics.json").string());

  const std::string table = render_table(result.reports);
  std::ofstream tf((fs::path(out_dir) / "table.txt").string());
  tf << table;

  std::ofstream pf((fs::path(out_dir) / "pehe_by_rep.csv").string());
  pf << "rep,method,pehe_out,ate_out\n";
  for (const auto& oc : result.outcomes)
    for (const auto& [name, m] : oc.metrics)
      pf << oc.rep << "," << name << "," << fmt_g17(m.pehe_out) << "," << fmt_g17(m.ate_out)
         << "\n";
  return result;
}

// ---- lambda tuning ----

struct TuneCandidate {
  double lambda1, lambda2, lambda3, lambda4;
  double score = 0.0;  // weighted factual validation loss at the kept epoch
};

struct TuneResult {
  std::vector<TuneCandidate> candidates;
  TuneCandidate best;
};

namespace detail {

// One end-to-end TSPF fit on replication-0 seeds; the score is the best
// stage-2 validation loss. Small by design: tuning cost is per-candidate.
inline double score_lambdas(const ExperimentConfig& cfg, const Tensor& raw_cov, double l1,
                            double l2, double l3, double l4) {
  ExperimentConfig c = cfg;
  c.train.lambda1 = l1;
  c.train.lambda2 = l2;
  c.train.lambda3 = l3;
  c.train.lambda4 = l4;
  const SeedTriple seeds = replication_seeds(c.seed, 0);
  Tensor cov =
      c.dataset == "synthetic" ? synthetic_covariates(c.n, c.d, seeds.synth) : raw_cov;
  DatasetBundle bundle = build_bundle(c, cov, seeds);
  TrainConfig tc = c.train;
  tc.seed = seeds.init;
  Stage1Model s1 = init_stage1(bundle.obs_train.dim(), tc);
  train_stage1(s1, bundle.obs_train, tc, &bundle.validation);
  Stage2Model s2 = init_stage2_from_stage1(s1, tc);
  Stage2History h2 = train_stage2(s2, bundle.rct_train, tc, &bundle.validation);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& ep : h2.epochs) best = std::min(best, ep.val);
  return best;
}

}  // namespace detail

inline TuneResult tune_lambdas(const ExperimentConfig& cfg, std::size_t workers = 1) {
  cfg.validate();
  if (cfg.lambda_grid.empty())
    throw std::invalid_argument("tune_lambdas: the config declares no tuning grid");

  Tensor cov;
  if (cfg.dataset != "synthetic") {
    const std::size_t expect = cfg.dataset == "ihdp" ? 25 : 17;
    cov = load_covariates(cfg.covariates_path, expect).x;
  }

  TuneResult result;
  // Each distinct lambda vector is fitted and reported exactly once, even
  // when coordinate sweeps revisit the incumbent.
  std::map<std::array<double, 4>, double> cache;
  auto eval_many = [&](const std::vector<TuneCandidate>& cands) {
    std::vector<TuneCandidate> scored = cands;
    std::vector<std::size_t> fresh;
    for (std::size_t k = 0; k < scored.size(); ++k) {
      const auto& c = scored[k];
      if (!cache.count({c.lambda1, c.lambda2, c.lambda3, c.lambda4})) {
        cache[{c.lambda1, c.lambda2, c.lambda3, c.lambda4}] = 0.0;
        fresh.push_back(k);
      }
    }
    detail::run_pool(fresh.size(), workers, [&](std::size_t i) {
      auto& c = scored[fresh[i]];
      c.score = detail::score_lambdas(cfg, cov, c.lambda1, c.lambda2, c.lambda3, c.lambda4);
    });
    for (std::size_t i : fresh) {
      const auto& c = scored[i];
      cache[{c.lambda1, c.lambda2, c.lambda3, c.lambda4}] = c.score;
      result.candidates.push_back(c);
    }
    for (auto& c : scored) c.score = cache.at({c.lambda1, c.lambda2, c.lambda3, c.lambda4});
    return scored;
  };
  auto pick_best = [](const std::vector<TuneCandidate>& cands) {
    TuneCandidate best = cands.front();
    for (const auto& c : cands)
      if (c.score < best.score) best = c;
    return best;
  };

  if (cfg.tune_mode == "full") {
    std::vector<TuneCandidate> cands;
    for (double l1 : cfg.lambda_grid)
      for (double l2 : cfg.lambda_grid)
        for (double l3 : cfg.lambda_grid)
          for (double l4 : cfg.lambda_grid) cands.push_back({l1, l2, l3, l4, 0.0});
    result.best = pick_best(eval_many(cands));
    return result;
  }

  // coordinate search: sweep each scale in turn, holding the others at the
  // current incumbent
  TuneCandidate cur{cfg.train.lambda1, cfg.train.lambda2, cfg.train.lambda3, cfg.train.lambda4,
                    0.0};
  for (int axis = 0; axis < 4; ++axis) {
    std::vector<TuneCandidate> cands;
    for (double v : cfg.lambda_grid) {
      TuneCandidate c = cur;
      (axis == 0 ? c.lambda1 : axis == 1 ? c.lambda2 : axis == 2 ? c.lambda3 : c.lambda4) = v;
      cands.push_back(c);
    }
    cur = pick_best(eval_many(cands));
  }
  result.best = cur;
  return result;
}

inline nlohmann::json tune_result_json(const TuneResult& r, const std::string& hash) {
  auto cand = [](const TuneCandidate& c) {
    return nlohmann::json{{"lambda1", c.lambda1},
                          {"lambda2", c.lambda2},
                          {"lambda3", c.lambda3},
                          {"lambda4", c.lambda4},
                          {"score", c.score}};
  };
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : r.candidates) cands.push_back(cand(c));
  return nlohmann::json{{"config_hash", hash}, {"candidates", cands}, {"best", cand(r.best)}};
}

// Re-renders the table from a consolidated metrics file.
inline std::string report_from_dir(const std::string& results_dir) {
  namespace fs = std::filesystem;
  const std::string path = (fs::path(results_dir) / "metrics.json").string();
  nlohmann::json j = load_json(path);
  if (!j.contains("methods") || j["methods"].empty())
    throw std::runtime_error(path + ": no completed runs to report");
  std::vector<MetricsReport> reports;
  for (const auto& [name, jm] : j["methods"].items()) {
    MetricsReport r;
    r.model = name;
    r.config_hash = jm.value("config_hash", "");
    for (const auto& jr : jm.at("replications"))
      r.reps.push_back(RunMetrics{jr.at("pehe_in").get<double>(), jr.at("pehe_out").get<double>(),
                                  jr.at("ate_in").get<double>(), jr.at("ate_out").get<double>()});
    r.finalize();
    reports.push_back(r);
  }
  const std::string table = render_table(reports);
  std::ofstream tf((fs::path(results_dir) / "table.txt").string());
  tf << table;
  return table;
}

// Default output root: $TSPF_OUT_ROOT, else ./results.
inline std::string default_out_root() {
  if (const char* env = std::getenv("TSPF_OUT_ROOT"); env && *env) return env;
  return "results";
}

inline std::string resolve_out_dir(const ExperimentConfig& cfg, const std::string& flag_out) {
  if (!flag_out.empty()) return flag_out;
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  namespace fs = std::filesystem;
  return (fs::path(default_out_root()) / ("run-" + config_hash(cfg))).string();
}

}  // namespace tspf
