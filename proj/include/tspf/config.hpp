#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tspf/model.hpp"

namespace tspf {

struct ExperimentConfig {
  std::string dataset = "synthetic";  // synthetic | ihdp | jobs
  std::string covariates_path;        // required unless synthetic
  std::size_t n = 2000;               // synthetic unit count
  std::size_t d = 10;                 // synthetic covariate dim
  std::size_t c = 30;                 // hidden confounder dim
  std::size_t rct_count = 0;          // exact carve-out size; 0 defers to fraction
  double rct_fraction = 0.1;
  std::size_t replications = 10;
  std::uint64_t seed = 1;
  std::string out_dir;                // empty: resolved from env / cwd by the caller
  std::size_t workers = 1;
  bool run_baselines = true;
  TrainConfig train;
  std::vector<double> lambda_grid;    // tuning candidates, all in [1e-5, 0.1]
  std::string tune_mode = "per_axis"; // per_axis | full

  void validate() const {
    if (dataset != "synthetic" && dataset != "ihdp" && dataset != "jobs")
      throw std::invalid_argument("config: unknown dataset '" + dataset + "'");
    if (dataset != "synthetic" && covariates_path.empty())
      throw std::invalid_argument("config: dataset '" + dataset + "' needs a covariates path");
    if (dataset == "synthetic" && (n < 10 || d < 1))
      throw std::invalid_argument("config: synthetic data needs n >= 10 and d >= 1");
    if (c < 1) throw std::invalid_argument("config: confounder dim must be >= 1");
    if (replications < 1) throw std::invalid_argument("config: replications must be >= 1");
    if (rct_count == 0 && !(rct_fraction > 0.0 && rct_fraction < 1.0))
      throw std::invalid_argument("config: rct_fraction must be in (0,1)");
    for (double v : lambda_grid)
      if (v < 1e-5 || v > 0.1)
        throw std::invalid_argument("config: grid value " + std::to_string(v) +
                                    " outside [1e-5, 0.1]");
    if (tune_mode != "per_axis" && tune_mode != "full")
      throw std::invalid_argument("config: tune mode must be per_axis or full");
    train.validate();
  }
};

namespace detail {

struct ConfigLine {
  std::string key;  // section.name
  std::string value;
  std::size_t lineno;
};

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<ConfigLine> parse_ini(std::istream& in, const std::string& origin) {
  std::vector<ConfigLine> out;
  std::string section, line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                 ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
    out.push_back({section.empty() ? key : section + "." + key, value, lineno});
  }
  return out;
}

inline double to_double(const ConfigLine& l, const std::string& origin) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(l.value, &pos);
    if (pos != l.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(origin + ":" + std::to_string(l.lineno) + ": key '" + l.key +
                             "' needs a number, got '" + l.value + "'");
  }
}

inline std::uint64_t to_uint(const ConfigLine& l, const std::string& origin) {
  try {
    // stoull silently wraps negative input around 2^64; refuse it up front.
    if (!l.value.empty() && l.value[0] == '-') throw std::invalid_argument("negative");
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(l.value, &pos);
    if (pos != l.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(origin + ":" + std::to_string(l.lineno) + ": key '" + l.key +
                             "' needs a non-negative integer, got '" + l.value + "'");
  }
}

inline bool to_bool(const ConfigLine& l, const std::string& origin) {
  if (l.value == "true" || l.value == "1" || l.value == "yes") return true;
  if (l.value == "false" || l.value == "0" || l.value == "no") return false;
  throw std::runtime_error(origin + ":" + std::to_string(l.lineno) + ": key '" + l.key +
                           "' needs true/false, got '" + l.value + "'");
}

inline std::vector<double> to_double_list(const ConfigLine& l, const std::string& origin) {
  std::vector<double> out;
  std::stringstream ss(l.value);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    cell = trim(cell);
    if (cell.empty()) continue;
    ConfigLine fake{l.key, cell, l.lineno};
    out.push_back(to_double(fake, origin));
  }
  return out;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(std::istream& in, const std::string& origin) {
  ExperimentConfig cfg;
  for (const auto& l : detail::parse_ini(in, origin)) {
    const std::string& k = l.key;
    if (k == "experiment.dataset") cfg.dataset = l.value;
    else if (k == "experiment.covariates") cfg.covariates_path = l.value;
    else if (k == "experiment.n") cfg.n = detail::to_uint(l, origin);
    else if (k == "experiment.d") cfg.d = detail::to_uint(l, origin);
    else if (k == "experiment.c") cfg.c = detail::to_uint(l, origin);
    else if (k == "experiment.rct_count") cfg.rct_count = detail::to_uint(l, origin);
    else if (k == "experiment.rct_fraction") cfg.rct_fraction = detail::to_double(l, origin);
    else if (k == "experiment.replications") cfg.replications = detail::to_uint(l, origin);
    else if (k == "experiment.seed") cfg.seed = detail::to_uint(l, origin);
    else if (k == "experiment.out") cfg.out_dir = l.value;
    else if (k == "experiment.workers") cfg.workers = detail::to_uint(l, origin);
    else if (k == "experiment.baselines") cfg.run_baselines = detail::to_bool(l, origin);
    else if (k == "train.lambda1") cfg.train.lambda1 = detail::to_double(l, origin);
    else if (k == "train.lambda2") cfg.train.lambda2 = detail::to_double(l, origin);
    else if (k == "train.lambda3") cfg.train.lambda3 = detail::to_double(l, origin);
    else if (k == "train.lambda4") cfg.train.lambda4 = detail::to_double(l, origin);
    else if (k == "train.lr") cfg.train.lr = detail::to_double(l, origin);
    else if (k == "train.epochs_stage1") cfg.train.epochs_stage1 = detail::to_uint(l, origin);
    else if (k == "train.epochs_stage2") cfg.train.epochs_stage2 = detail::to_uint(l, origin);
    else if (k == "train.patience") cfg.train.patience = detail::to_uint(l, origin);
    else if (k == "train.batch_size") cfg.train.batch_size = detail::to_uint(l, origin);
    else if (k == "train.r") cfg.train.r = detail::to_uint(l, origin);
    else if (k == "train.r_u") cfg.train.r_u = detail::to_uint(l, origin);
    else if (k == "train.l_p") cfg.train.l_p = detail::to_uint(l, origin);
    else if (k == "train.hidden_phi") cfg.train.hidden_phi = detail::to_uint(l, origin);
    else if (k == "train.hidden_h") cfg.train.hidden_h = detail::to_uint(l, origin);
    else if (k == "train.hidden_g") cfg.train.hidden_g = detail::to_uint(l, origin);
    else if (k == "train.hidden_u") cfg.train.hidden_u = detail::to_uint(l, origin);
    else if (k == "train.hidden_q") cfg.train.hidden_q = detail::to_uint(l, origin);
    else if (k == "train.q_inner_steps") cfg.train.q_inner_steps = detail::to_uint(l, origin);
    else if (k == "train.sinkhorn_eps") cfg.train.sinkhorn_eps = detail::to_double(l, origin);
    else if (k == "train.sinkhorn_iters")
      cfg.train.sinkhorn_iters = static_cast<int>(detail::to_uint(l, origin));
    else if (k == "train.activation") cfg.train.activation = activation_from_name(l.value);
    else if (k == "tune.grid") cfg.lambda_grid = detail::to_double_list(l, origin);
    else if (k == "tune.mode") cfg.tune_mode = l.value;
    else
      throw std::runtime_error(origin + ":" + std::to_string(l.lineno) + ": unknown key '" + k +
                               "'");
  }
  cfg.train.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  return parse_experiment_config(in, path);
}

// FNV-1a over the canonical field ordering; stable across runs and
// platforms, used to stamp checkpoints and reports.
inline std::string config_hash(const ExperimentConfig& cfg) {
  std::ostringstream ss;
  const auto& t = cfg.train;
  ss << cfg.dataset << '|' << cfg.covariates_path << '|' << cfg.n << '|' << cfg.d << '|' << cfg.c
     << '|' << cfg.rct_count << '|' << cfg.rct_fraction << '|' << cfg.replications << '|'
     << cfg.seed << '|' << cfg.run_baselines << '|' << t.lambda1 << '|' << t.lambda2 << '|'
     << t.lambda3 << '|' << t.lambda4 << '|' << t.lr << '|' << t.epochs_stage1 << '|'
     << t.epochs_stage2 << '|' << t.patience << '|' << t.batch_size << '|' << t.r << '|' << t.r_u
     << '|' << t.l_p << '|' << t.hidden_phi << '|' << t.hidden_h << '|' << t.hidden_g << '|'
     << t.hidden_u << '|' << t.hidden_q << '|' << t.q_inner_steps << '|' << t.sinkhorn_eps << '|'
     << t.sinkhorn_iters << '|' << activation_name(t.activation);
  for (double v : cfg.lambda_grid) ss << '|' << v;
  ss << '|' << cfg.tune_mode;
  const std::string s = ss.str();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace tspf
