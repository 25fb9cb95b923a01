#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tspf/data.hpp"
#include "tspf/tensor.hpp"

namespace tspf {

namespace detail {

inline void check_metric_args(std::size_t nh, std::size_t n1, std::size_t n0, const char* op) {
  if (nh != n1 || nh != n0)
    throw std::invalid_argument(std::string(op) + ": lengths " + std::to_string(nh) + ", " +
                                std::to_string(n1) + ", " + std::to_string(n0) + " differ");
  if (nh == 0) throw std::invalid_argument(std::string(op) + ": empty input");
}

}  // namespace detail

// sqrt( (1/n) sum (tau_hat_i - (y1_i - y0_i))^2 )
inline double pehe(const std::vector<double>& tau_hat, const std::vector<double>& y1,
                   const std::vector<double>& y0) {
  detail::check_metric_args(tau_hat.size(), y1.size(), y0.size(), "pehe");
  double s = 0.0;
  for (std::size_t i = 0; i < tau_hat.size(); ++i) {
    const double r = tau_hat[i] - (y1[i] - y0[i]);
    s += r * r;
  }
  return std::sqrt(s / static_cast<double>(tau_hat.size()));
}

// (1/n) |sum (tau_hat_i - (y1_i - y0_i))|; the absolute value wraps the
// sum, so signed residuals cancel.
inline double ate_error(const std::vector<double>& tau_hat, const std::vector<double>& y1,
                        const std::vector<double>& y0) {
  detail::check_metric_args(tau_hat.size(), y1.size(), y0.size(), "ate_error");
  double s = 0.0;
  for (std::size_t i = 0; i < tau_hat.size(); ++i) s += tau_hat[i] - (y1[i] - y0[i]);
  return std::abs(s) / static_cast<double>(tau_hat.size());
}

struct RunMetrics {
  double pehe_in = 0, pehe_out = 0, ate_in = 0, ate_out = 0;
};

using CatePredictor = std::function<std::vector<double>(const Tensor&)>;

// In-sample: the full training slice (observational plus randomized rows)
// against oracle potentials. Out-of-sample: the untouched test split.
inline RunMetrics evaluate(const CatePredictor& predict, const DatasetBundle& bundle) {
  const Dataset in = Dataset::concat(bundle.obs_train, bundle.rct_train);
  const Dataset& out = bundle.test;
  for (const Dataset* ds : {&in, &out})
    if (ds->y0.size() != ds->size() || ds->y1.size() != ds->size())
      throw std::invalid_argument("evaluate: oracle potential outcomes missing");
  if (in.empty() || out.empty())
    throw std::invalid_argument("evaluate: empty evaluation split");

  RunMetrics m;
  auto tau_in = predict(in.x);
  auto tau_out = predict(out.x);
  m.pehe_in = pehe(tau_in, in.y1, in.y0);
  m.ate_in = ate_error(tau_in, in.y1, in.y0);
  m.pehe_out = pehe(tau_out, out.y1, out.y0);
  m.ate_out = ate_error(tau_out, out.y1, out.y0);
  return m;
}

// ---- replication aggregation ----

struct Aggregate {
  double mean = 0, std = 0;  // sample (n-1) convention; one rep gives std 0
};

inline Aggregate aggregate(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("aggregate: no values");
  Aggregate a;
  for (double x : v) a.mean += x;
  a.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - a.mean) * (x - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return a;
}

struct MetricsReport {
  std::string model;
  std::string config_hash;
  std::vector<RunMetrics> reps;
  Aggregate pehe_in, pehe_out, ate_in, ate_out;

  void finalize() {
    std::vector<double> pi, po, ai, ao;
    for (const auto& r : reps) {
      pi.push_back(r.pehe_in);
      po.push_back(r.pehe_out);
      ai.push_back(r.ate_in);
      ao.push_back(r.ate_out);
    }
    pehe_in = aggregate(pi);
    pehe_out = aggregate(po);
    ate_in = aggregate(ai);
    ate_out = aggregate(ao);
  }
};

inline nlohmann::json metrics_report_json(const MetricsReport& r) {
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& m : r.reps)
    reps.push_back({{"pehe_in", m.pehe_in},
                    {"pehe_out", m.pehe_out},
                    {"ate_in", m.ate_in},
                    {"ate_out", m.ate_out}});
  auto agg = [](const Aggregate& a) {
    return nlohmann::json{{"mean", a.mean}, {"std", a.std}};
  };
  return nlohmann::json{{"model", r.model},
                        {"config_hash", r.config_hash},
                        {"replications", reps},
                        {"pehe_in", agg(r.pehe_in)},
                        {"pehe_out", agg(r.pehe_out)},
                        {"ate_in", agg(r.ate_in)},
                        {"ate_out", agg(r.ate_out)}};
}

// ---- table rendering ----

namespace detail {

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

inline std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace detail

// method x metric table, mean +- std at 2 decimals. The lowest mean per
// column is starred; rows tying on the rounded value share the star.
inline std::string render_table(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("render_table: no reports");
  using Getter = const Aggregate& (*)(const MetricsReport&);
  struct Col {
    const char* label;
    Getter get;
  };
  static const Col cols[] = {
      {"in sqrtPEHE", [](const MetricsReport& r) -> const Aggregate& { return r.pehe_in; }},
      {"in eATE", [](const MetricsReport& r) -> const Aggregate& { return r.ate_in; }},
      {"out sqrtPEHE", [](const MetricsReport& r) -> const Aggregate& { return r.pehe_out; }},
      {"out eATE", [](const MetricsReport& r) -> const Aggregate& { return r.ate_out; }},
  };

  std::size_t name_w = 6;
  for (const auto& r : reports) name_w = std::max(name_w, r.model.size());

  std::string out = "method";
  out.append(name_w - 6, ' ');
  for (const auto& c : cols) {
    out += "  ";
    std::string lbl = c.label;
    out += lbl;
    if (lbl.size() < 16) out.append(16 - lbl.size(), ' ');
  }
  out += "\n";

  double best[4];
  for (int k = 0; k < 4; ++k) {
    best[k] = std::numeric_limits<double>::infinity();
    for (const auto& r : reports) best[k] = std::min(best[k], detail::round2(cols[k].get(r).mean));
  }

  for (const auto& r : reports) {
    out += r.model;
    out.append(name_w - r.model.size(), ' ');
    for (int k = 0; k < 4; ++k) {
      const auto& a = cols[k].get(r);
      std::string cell = detail::fmt2(a.mean) + " +- " + detail::fmt2(a.std);
      if (detail::round2(a.mean) == best[k]) cell += " *";
      out += "  " + cell;
      if (cell.size() < 16) out.append(16 - cell.size(), ' ');
    }
    out += "\n";
  }
  return out;
}

}  // namespace tspf
