#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tspf/rng.hpp"
#include "tspf/tensor.hpp"

namespace tspf {

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Sample {
  std::vector<double> x;
  int t = 0;
  double y = 0.0;
  int g = 0;  // 0 observational, 1 randomized
  double y0 = 0.0;
  double y1 = 0.0;
};

// Column-oriented sample collection. x is n rows by d columns. y0/y1 are
// oracle potential outcomes carried for evaluation; the hidden confounder
// itself is never stored here.
struct Dataset {
  Tensor x;  // {n, d}
  std::vector<int> t;
  std::vector<double> y;
  std::vector<int> g;
  std::vector<double> y0;
  std::vector<double> y1;

  std::size_t size() const { return t.size(); }
  std::size_t dim() const { return x.shape.size() == 2 ? x.shape[1] : 0; }
  bool empty() const { return t.empty(); }

  Sample sample(std::size_t i) const {
    Sample s;
    s.x.assign(x.values.begin() + static_cast<std::ptrdiff_t>(i * dim()),
               x.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim()));
    s.t = t[i];
    s.y = y[i];
    s.g = g[i];
    s.y0 = y0[i];
    s.y1 = y1[i];
    return s;
  }

  static Dataset with_dims(std::size_t n, std::size_t d) {
    Dataset ds;
    ds.x = Tensor::zeros({n, d});
    ds.t.assign(n, 0);
    ds.y.assign(n, 0.0);
    ds.g.assign(n, 0);
    ds.y0.assign(n, 0.0);
    ds.y1.assign(n, 0.0);
    return ds;
  }

  Dataset gather(const std::vector<std::size_t>& idx) const {
    Dataset out = with_dims(idx.size(), dim());
    const std::size_t d = dim();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::size_t i = idx[r];
      for (std::size_t j = 0; j < d; ++j) out.x.values[r * d + j] = x.values[i * d + j];
      out.t[r] = t[i];
      out.y[r] = y[i];
      out.g[r] = g[i];
      out.y0[r] = y0[i];
      out.y1[r] = y1[i];
    }
    return out;
  }

  Tensor x_rows(const std::vector<std::size_t>& idx) const {
    const std::size_t d = dim();
    Tensor out = Tensor::zeros({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) out.values[r * d + j] = x.values[idx[r] * d + j];
    return out;
  }

  static Dataset concat(const Dataset& a, const Dataset& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    if (a.dim() != b.dim())
      throw std::invalid_argument("Dataset::concat: dims " + std::to_string(a.dim()) + " vs " +
                                  std::to_string(b.dim()));
    Dataset out = with_dims(a.size() + b.size(), a.dim());
    auto copy_into = [&](const Dataset& src, std::size_t off) {
      const std::size_t d = src.dim();
      for (std::size_t i = 0; i < src.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j)
          out.x.values[(off + i) * d + j] = src.x.values[i * d + j];
        out.t[off + i] = src.t[i];
        out.y[off + i] = src.y[i];
        out.g[off + i] = src.g[i];
        out.y0[off + i] = src.y0[i];
        out.y1[off + i] = src.y1[i];
      }
    };
    copy_into(a, 0);
    copy_into(b, a.size());
    return out;
  }
};

struct SynthesisParams {
  std::vector<double> w1, w2, w3, w4, w5, w6;  // dims d,c,d,c,d,c
  std::size_t c = 30;
  std::uint64_t seed = 0;
};

// The confounder draws live here, outside the Dataset, so models can never
// see them; evaluation code may.
struct SynthesisResult {
  Dataset data;
  SynthesisParams params;
  Tensor u;  // {n, c}
};

struct DatasetBundle {
  Dataset obs_train;
  Dataset rct_train;
  Dataset validation;
  Dataset test;
};

// ---- covariate loading ----

struct ColumnStats {
  std::string name;
  double mean = 0.0;
  double std = 1.0;
  bool binary = false;
};

struct CovariateTable {
  Tensor x;  // standardized, {n, d}
  std::vector<double> t;  // original columns when present, else empty
  std::vector<double> y;
  std::vector<ColumnStats> stats;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ' || cell.back() == '\t'))
      cell.pop_back();
    std::size_t b = 0;
    while (b < cell.size() && (cell[b] == ' ' || cell[b] == '\t')) ++b;
    out.push_back(cell.substr(b));
  }
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

inline double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(cell, &pos);
    if (pos != cell.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("non-numeric cell '" + cell + "' at row " + std::to_string(row) +
                             ", column " + std::to_string(col));
  }
}

}  // namespace detail

// Reads a headered CSV of covariates (columns x1..xd; optional t and y
// columns are captured but typically overwritten by synthesis). Continuous
// columns are z-scored with whole-file statistics; exact {0,1} columns pass
// through. Row/column numbers in errors are 1-based including the header.
inline CovariateTable load_covariates(const std::string& path, std::size_t expect_dims = 0) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open covariate file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty covariate file: " + path);
  auto header = detail::split_csv_line(line);
  std::vector<std::size_t> xcols;
  std::ptrdiff_t tcol = -1, ycol = -1;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "t") tcol = static_cast<std::ptrdiff_t>(c);
    else if (header[c] == "y") ycol = static_cast<std::ptrdiff_t>(c);
    else xcols.push_back(c);
  }
  if (xcols.empty()) throw std::runtime_error("no covariate columns in " + path);
  if (expect_dims && xcols.size() != expect_dims)
    throw std::runtime_error(path + ": expected " + std::to_string(expect_dims) +
                             " covariate columns, found " + std::to_string(xcols.size()));

  std::vector<std::vector<double>> rows;
  std::vector<double> tvals, yvals;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw std::runtime_error(path + ": ragged row " + std::to_string(lineno) + " has " +
                               std::to_string(cells.size()) + " cells, expected " +
                               std::to_string(header.size()));
    std::vector<double> r(xcols.size());
    for (std::size_t k = 0; k < xcols.size(); ++k)
      r[k] = detail::parse_cell(cells[xcols[k]], lineno, xcols[k] + 1);
    rows.push_back(std::move(r));
    if (tcol >= 0) tvals.push_back(detail::parse_cell(cells[static_cast<std::size_t>(tcol)], lineno,
                                                      static_cast<std::size_t>(tcol) + 1));
    if (ycol >= 0) yvals.push_back(detail::parse_cell(cells[static_cast<std::size_t>(ycol)], lineno,
                                                      static_cast<std::size_t>(ycol) + 1));
  }
  if (rows.empty()) throw std::runtime_error("no data rows in " + path);

  const std::size_t n = rows.size(), d = xcols.size();
  CovariateTable out;
  out.x = Tensor::zeros({n, d});
  out.t = std::move(tvals);
  out.y = std::move(yvals);
  out.stats.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    auto& st = out.stats[j];
    st.name = header[xcols[j]];
    bool binary = true;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = rows[i][j];
      if (v != 0.0 && v != 1.0) binary = false;
      s += v;
    }
    st.mean = s / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dlt = rows[i][j] - st.mean;
      ss += dlt * dlt;
    }
    st.std = std::sqrt(ss / static_cast<double>(n));
    st.binary = binary;
    for (std::size_t i = 0; i < n; ++i) {
      double v = rows[i][j];
      if (!binary) v = st.std > 0.0 ? (v - st.mean) / st.std : v - st.mean;
      out.x.values[i * d + j] = v;
    }
  }
  return out;
}

// ---- synthesis ----

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Outcome noise: the generative model is N(mean, variance) with variance
// 0.1, so the sampling std is sqrt(0.1).
inline constexpr double kOutcomeNoiseVar = 0.1;

// Draw order is pinned: W1..W6 first, then per unit U_i, T_i, Y0_i, Y1_i.
// Changing it silently changes every seeded dataset.
inline SynthesisResult synthesize(const Tensor& cov, std::size_t c, std::uint64_t seed) {
  if (c < 1) throw std::invalid_argument("synthesize: confounder dim must be >= 1");
  if (cov.shape.size() != 2 || cov.shape[0] == 0)
    throw std::invalid_argument("synthesize: covariates must be a nonempty matrix");
  if (!cov.all_finite()) throw std::invalid_argument("synthesize: covariates must be finite");

  const std::size_t n = cov.shape[0], d = cov.shape[1];
  Rng rng(seed);

  SynthesisParams p;
  p.c = c;
  p.seed = seed;
  auto draw_normal = [&](std::size_t k, double mean, double var) {
    std::vector<double> v(k);
    const double sd = std::sqrt(var);
    for (auto& e : v) e = rng.normal(mean, sd);
    return v;
  };
  auto draw_uniform = [&](std::size_t k, double lo, double hi) {
    std::vector<double> v(k);
    for (auto& e : v) e = rng.uniform(lo, hi);
    return v;
  };
  p.w1 = draw_normal(d, 0.0, 0.1);
  p.w2 = draw_normal(c, 0.02, 0.1);
  p.w3 = draw_normal(d, 0.1, 1.0);
  p.w4 = draw_normal(c, 0.1, 1.0);
  p.w5 = draw_uniform(d, 0.0, 0.2);
  p.w6 = draw_uniform(c, 0.0, 0.2);

  SynthesisResult res;
  res.data = Dataset::with_dims(n, d);
  res.data.x = cov;
  res.params = p;
  res.u = Tensor::zeros({n, c});

  const double noise_sd = std::sqrt(kOutcomeNoiseVar);
  for (std::size_t i = 0; i < n; ++i) {
    double* ui = res.u.values.data() + i * c;
    for (std::size_t k = 0; k < c; ++k) ui[k] = rng.uniform(0.0, 0.2);

    const double* xi = cov.values.data() + i * d;
    double xw1 = 0.0, xw3 = 0.0, xw5 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      xw1 += p.w1[j] * xi[j];
      xw3 += p.w3[j] * xi[j];
      xw5 += p.w5[j] * xi[j];
    }
    double uw2 = 0.0, uw4 = 0.0, uw6 = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      uw2 += p.w2[k] * ui[k];
      uw4 += p.w4[k] * ui[k];
      uw6 += p.w6[k] * ui[k];
    }

    const int t = rng.bernoulli(sigmoid(xw1 + uw2));
    const double mu0 = xw3 + uw4;
    const double mu1 = xw5 + uw6 + 4.0;
    const double y0 = rng.normal(mu0, noise_sd);
    const double y1 = rng.normal(mu1, noise_sd);

    res.data.t[i] = t;
    res.data.y0[i] = y0;
    res.data.y1[i] = y1;
    res.data.y[i] = t ? y1 : y0;
    res.data.g[i] = 0;
  }
  return res;
}

// ---- splits ----

struct SplitResult {
  Dataset train;
  Dataset validation;
  Dataset test;
};

// 63/27/10 by seeded permutation; train and validation take the floors,
// test takes the remainder.
inline SplitResult split(const Dataset& ds, std::uint64_t seed) {
  if (ds.empty()) throw std::invalid_argument("split: empty dataset");
  const std::size_t n = ds.size();
  Rng rng(seed);
  auto perm = permutation(n, rng);
  const std::size_t n_train = static_cast<std::size_t>(std::floor(0.63 * static_cast<double>(n)));
  const std::size_t n_val = static_cast<std::size_t>(std::floor(0.27 * static_cast<double>(n)));
  std::vector<std::size_t> itr(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> iva(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                               perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  std::vector<std::size_t> ite(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val),
                               perm.end());
  return {ds.gather(itr), ds.gather(iva), ds.gather(ite)};
}

namespace detail {

// In place: T_new fair coin, Y_new switched to the potential outcome that
// matches T_new. Consistency survives by construction.
inline void rerandomize_rows(Dataset& ds, const std::vector<std::size_t>& rows, Rng& rng,
                             int new_g) {
  for (std::size_t i : rows) {
    const int t_new = rng.bernoulli(0.5);
    ds.t[i] = t_new;
    ds.y[i] = t_new ? ds.y1[i] : ds.y0[i];
    ds.g[i] = new_g;
  }
}

inline void require_potentials(const Dataset& ds, const char* op) {
  if (ds.y0.size() != ds.size() || ds.y1.size() != ds.size())
    throw std::logic_error(std::string(op) + ": oracle potential outcomes missing");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double yf = ds.t[i] ? ds.y1[i] : ds.y0[i];
    if (ds.y[i] != yf)
      throw std::logic_error(std::string(op) + ": sample " + std::to_string(i) +
                             " violates consistency; potentials look stale");
  }
}

}  // namespace detail

struct RctSplit {
  Dataset obs_train;
  Dataset rct_train;
};

inline RctSplit make_rct(const Dataset& train, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw std::invalid_argument("make_rct: fraction must be in (0,1), got " +
                                std::to_string(fraction));
  detail::require_potentials(train, "make_rct");
  const std::size_t n = train.size();
  const std::size_t m = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  Rng rng(seed);
  auto perm = permutation(n, rng);
  std::vector<std::size_t> ir(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
  std::vector<std::size_t> io(perm.begin() + static_cast<std::ptrdiff_t>(m), perm.end());

  RctSplit out;
  out.rct_train = train.gather(ir);
  out.obs_train = train.gather(io);
  std::vector<std::size_t> all(out.rct_train.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  detail::rerandomize_rows(out.rct_train, all, rng, 1);
  for (auto& gv : out.obs_train.g) gv = 0;
  return out;
}

// Same count-based carve-out, for configs that pin m directly.
inline RctSplit make_rct_count(const Dataset& train, std::size_t m, std::uint64_t seed) {
  if (m == 0 || m >= train.size())
    throw std::invalid_argument("make_rct_count: need 0 < m < n, got m=" + std::to_string(m) +
                                ", n=" + std::to_string(train.size()));
  detail::require_potentials(train, "make_rct_count");
  Rng rng(seed);
  auto perm = permutation(train.size(), rng);
  std::vector<std::size_t> ir(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
  std::vector<std::size_t> io(perm.begin() + static_cast<std::ptrdiff_t>(m), perm.end());
  RctSplit out;
  out.rct_train = train.gather(ir);
  out.obs_train = train.gather(io);
  std::vector<std::size_t> all(out.rct_train.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  detail::rerandomize_rows(out.rct_train, all, rng, 1);
  for (auto& gv : out.obs_train.g) gv = 0;
  return out;
}

inline Dataset rerandomize_validation(const Dataset& val, std::uint64_t seed) {
  if (val.empty()) return val;
  detail::require_potentials(val, "rerandomize_validation");
  Dataset out = val;
  Rng rng(seed);
  std::vector<std::size_t> all(out.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  detail::rerandomize_rows(out, all, rng, 1);
  return out;
}

// ---- batching ----

inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                                     std::uint64_t seed, std::size_t epoch) {
  if (batch_size < 2)
    throw std::invalid_argument("batches: batch_size must be >= 2, got " +
                                std::to_string(batch_size));
  Rng rng(derive_seed(seed, 0x6261746368ULL ^ epoch));  // "batch"
  auto perm = permutation(n, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size) {
    const std::size_t e = std::min(n, b + batch_size);
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b),
                     perm.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> batches(const Dataset& ds, std::size_t batch_size,
                                                     std::uint64_t seed, std::size_t epoch) {
  return batches(ds.size(), batch_size, seed, epoch);
}

// ---- bundle I/O ----

inline void save_dataset_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  const std::size_t d = ds.dim();
  for (std::size_t j = 0; j < d; ++j) out << "x" << (j + 1) << ",";
  out << "t,y,g,y0,y1\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out << fmt_g17(ds.x.values[i * d + j]) << ",";
    out << ds.t[i] << "," << fmt_g17(ds.y[i]) << "," << ds.g[i] << "," << fmt_g17(ds.y0[i]) << ","
        << fmt_g17(ds.y1[i]) << "\n";
  }
}

inline Dataset load_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty dataset file: " + path);
  auto header = detail::split_csv_line(line);
  if (header.size() < 6 || header[header.size() - 5] != "t")
    throw std::runtime_error(path + ": expected columns x1..xd,t,y,g,y0,y1");
  const std::size_t d = header.size() - 5;

  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw std::runtime_error(path + ": ragged row " + std::to_string(lineno));
    std::vector<double> r(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c)
      r[c] = detail::parse_cell(cells[c], lineno, c + 1);
    rows.push_back(std::move(r));
  }
  Dataset ds = Dataset::with_dims(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) ds.x.values[i * d + j] = rows[i][j];
    ds.t[i] = static_cast<int>(rows[i][d]);
    ds.y[i] = rows[i][d + 1];
    ds.g[i] = static_cast<int>(rows[i][d + 2]);
    ds.y0[i] = rows[i][d + 3];
    ds.y1[i] = rows[i][d + 4];
  }
  return ds;
}

inline nlohmann::json synthesis_params_json(const SynthesisParams& p) {
  return nlohmann::json{{"seed", p.seed}, {"c", p.c},  {"w1", p.w1}, {"w2", p.w2},
                        {"w3", p.w3},     {"w4", p.w4}, {"w5", p.w5}, {"w6", p.w6}};
}

inline void save_bundle(const DatasetBundle& b, const SynthesisParams& p,
                        const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_dataset_csv(b.obs_train, (fs::path(dir) / "obs_train.csv").string());
  save_dataset_csv(b.rct_train, (fs::path(dir) / "rct_train.csv").string());
  save_dataset_csv(b.validation, (fs::path(dir) / "validation.csv").string());
  save_dataset_csv(b.test, (fs::path(dir) / "test.csv").string());
  std::ofstream side((fs::path(dir) / "synthesis.json").string());
  if (!side) throw std::runtime_error("cannot write synthesis sidecar in " + dir);
  side << synthesis_params_json(p).dump(2) << "\n";
}

}  // namespace tspf
