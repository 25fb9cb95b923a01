#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "tspf/nn.hpp"
#include "tspf/tensor.hpp"

namespace tspf {

// ---- balancing weights ----

struct BalancingWeights {
  double u = 0.5;           // treated fraction after clamping
  std::vector<double> w;    // one weight per sample

  std::vector<double> gather(const std::vector<std::size_t>& idx) const {
    std::vector<double> out(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) out[k] = w[idx[k]];
    return out;
  }
};

// w_i = t_i/(2u) + (1-t_i)/(2(1-u)) with u the clamped treated fraction.
// mean(w) == 1 exactly when no clamping engages.
inline BalancingWeights balancing_weights(const std::vector<int>& t) {
  if (t.empty()) throw std::invalid_argument("balancing_weights: empty treatment vector");
  double s = 0.0;
  for (int ti : t) s += static_cast<double>(ti);
  double u = s / static_cast<double>(t.size());
  u = std::clamp(u, 1e-3, 1.0 - 1e-3);
  BalancingWeights bw;
  bw.u = u;
  bw.w.resize(t.size());
  const double wt = 1.0 / (2.0 * u), wc = 1.0 / (2.0 * (1.0 - u));
  for (std::size_t i = 0; i < t.size(); ++i) bw.w[i] = t[i] ? wt : wc;
  return bw;
}

// ---- outcome / reconstruction ----

namespace detail {

inline void check_pred_rows(const ad::Var& pred, std::size_t n, const char* op) {
  const auto& s = pred.shape();
  const bool ok = (s.size() == 1 && s[0] == n) || (s.size() == 2 && s[0] == n && s[1] == 1);
  if (!ok)
    throw std::invalid_argument(std::string(op) + ": prediction shape " + shape_str(s) +
                                " does not match " + std::to_string(n) + " targets");
}

}  // namespace detail

// (1/n) * sum_i w_i * (y_i - pred_i)^2
inline ad::Var factual_loss(const ad::Var& pred, const std::vector<double>& y,
                            const std::vector<double>& w) {
  if (y.size() != w.size())
    throw std::invalid_argument("factual_loss: " + std::to_string(y.size()) + " targets vs " +
                                std::to_string(w.size()) + " weights");
  if (y.empty()) throw std::invalid_argument("factual_loss: empty batch");
  detail::check_pred_rows(pred, y.size(), "factual_loss");
  const std::size_t n = y.size();
  ad::Var flat = pred.shape().size() == 2 ? ad::reshape(pred, {n}) : pred;
  ad::Var resid = ad::sub(flat, ad::Var::constant(Tensor({n}, std::vector<double>(y))));
  ad::Var weighted = ad::mul(ad::mul(resid, resid), ad::Var::constant(Tensor({n}, std::vector<double>(w))));
  return ad::scale(ad::sum(weighted), 1.0 / static_cast<double>(n));
}

// (1/n) * sum_i ||xhat_i - x_i||^2
inline ad::Var reconstruction_loss(const ad::Var& x_hat, const Tensor& x) {
  if (x_hat.shape() != x.shape)
    throw std::invalid_argument("reconstruction_loss: shape " + shape_str(x_hat.shape()) + " vs " +
                                shape_str(x.shape));
  if (x.shape.empty() || x.shape[0] == 0)
    throw std::invalid_argument("reconstruction_loss: empty batch");
  ad::Var resid = ad::sub(x_hat, ad::Var::constant(x));
  return ad::scale(ad::sum_squares(resid), 1.0 / static_cast<double>(x.shape[0]));
}

// ---- entropic optimal transport ----

// Entropic Wasserstein between two empirical point clouds: uniform
// marginals, Euclidean ground cost, log-domain Sinkhorn, returns <P, C>.
// Dual updates are simultaneous (both read the previous iterate) so the
// computation is exactly transposition-symmetric in its arguments.
// Differentiable through the iterations. Empty side gives 0.
inline ad::Var ipm_wasserstein(const ad::Var& a, const ad::Var& b, double eps = 0.1,
                               int iters = 50) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw std::invalid_argument("ipm_wasserstein: expected point matrices");
  const std::size_t na = a.shape()[0], nb = b.shape()[0];
  if (na == 0 || nb == 0) return ad::Var::constant(Tensor::scalar(0.0));
  if (eps <= 0.0 || iters < 1)
    throw std::invalid_argument("ipm_wasserstein: need eps > 0 and iters >= 1");

  ad::Var cost = ad::pairwise_euclidean(a, b);
  if (!cost.value().all_finite())
    throw std::runtime_error("ipm_wasserstein: non-finite ground cost");

  const double log_mu = -std::log(static_cast<double>(na));
  const double log_nu = -std::log(static_cast<double>(nb));
  ad::Var neg_c_eps = ad::scale(cost, -1.0 / eps);
  // Symmetric damped updates: both duals move half-way toward their exact
  // update of the other side's previous value. Unlike the alternating
  // sweep this treats the two clouds identically, so swapping the inputs
  // transposes every iterate; unlike the undamped simultaneous sweep it
  // cannot settle into a two-cycle.
  ad::Var f = ad::Var::constant(Tensor::zeros({na}));
  ad::Var g = ad::Var::constant(Tensor::zeros({nb}));
  for (int it = 0; it < iters; ++it) {
    ad::Var lse_f = ad::logsumexp_rows(ad::add_rowvec(neg_c_eps, ad::scale(g, 1.0 / eps)));
    ad::Var lse_g = ad::logsumexp_cols(ad::add_colvec(neg_c_eps, ad::scale(f, 1.0 / eps)));
    f = ad::scale(ad::add(f, ad::scale(ad::add_scalar(ad::neg(lse_f), log_mu), eps)), 0.5);
    g = ad::scale(ad::add(g, ad::scale(ad::add_scalar(ad::neg(lse_g), log_nu), eps)), 0.5);
  }
  ad::Var log_plan = ad::scale(ad::add_colvec(ad::add_rowvec(ad::neg(cost), g), f), 1.0 / eps);
  return ad::sum(ad::mul(ad::exp(log_plan), cost));
}

// ---- CLUB mutual-information bound ----

// Diagonal-Gaussian conditional q(z_u | z) with separate mean and log
// variance heads. Fresh nets are 2 layers each.
struct VariationalCond {
  Mlp mean_net;
  Mlp logvar_net;

  VariationalCond() = default;
  VariationalCond(std::size_t in_dim, std::size_t out_dim, std::size_t hidden, Activation act,
                  Rng& rng)
      : mean_net({in_dim, hidden, out_dim}, act, rng),
        logvar_net({in_dim, hidden, out_dim}, act, rng) {}
  VariationalCond(Mlp mean, Mlp logvar)
      : mean_net(std::move(mean)), logvar_net(std::move(logvar)) {
    if (mean_net.in_dim() != logvar_net.in_dim() || mean_net.out_dim() != logvar_net.out_dim())
      throw std::invalid_argument("VariationalCond: mean/logvar net dims disagree");
  }

  std::vector<ad::Var> params() const {
    auto out = mean_net.params();
    auto lv = logvar_net.params();
    out.insert(out.end(), lv.begin(), lv.end());
    return out;
  }
  void set_frozen(bool frozen) {
    mean_net.set_frozen(frozen);
    logvar_net.set_frozen(frozen);
  }
};

namespace detail {

inline void check_aligned_rows(const ad::Var& z, const ad::Var& z_u, const char* op) {
  if (z.shape().size() != 2 || z_u.shape().size() != 2 || z.shape()[0] != z_u.shape()[0])
    throw std::invalid_argument(std::string(op) + ": row mismatch " + shape_str(z.shape()) +
                                " vs " + shape_str(z_u.shape()));
  if (z.shape()[0] == 0) throw std::invalid_argument(std::string(op) + ": empty batch");
}

}  // namespace detail

// (1/m) sum_i [ L_ii - (1/m) sum_j L_ij ] for a log-density matrix with
// L_ij = log q(z_u_j | z_i); the collapsed form, which equals the
// double-sum (1/m^2) form identically.
inline ad::Var club_from_logdensity(const ad::Var& logq) {
  if (logq.shape().size() != 2 || logq.shape()[0] != logq.shape()[1])
    throw std::invalid_argument("club_from_logdensity: expected square matrix, got " +
                                shape_str(logq.shape()));
  return ad::sub(ad::mean(ad::diag(logq)), ad::mean(logq));
}

inline ad::Var club_mi(const ad::Var& z, const ad::Var& z_u, const VariationalCond& q_net) {
  detail::check_aligned_rows(z, z_u, "club_mi");
  ad::Var mu = q_net.mean_net.forward(z);
  ad::Var lv = q_net.logvar_net.forward(z);
  return club_from_logdensity(ad::gauss_logdensity_pairs(mu, lv, z_u));
}

// -(1/m) sum_i log q(z_u_i | z_i); the variational net's own objective.
inline ad::Var q_nll(const ad::Var& z, const ad::Var& z_u, const VariationalCond& q_net) {
  detail::check_aligned_rows(z, z_u, "q_nll");
  const std::size_t m = z.shape()[0];
  ad::Var mu = q_net.mean_net.forward(z);
  ad::Var lv = q_net.logvar_net.forward(z);
  if (mu.shape() != z_u.shape())
    throw std::invalid_argument("q_nll: conditional dim " + shape_str(mu.shape()) +
                                " vs targets " + shape_str(z_u.shape()));
  constexpr double kHalfLog2Pi = 0.9189385332046727;
  ad::Var d = ad::sub(z_u, mu);
  ad::Var quad = ad::mul(ad::mul(d, d), ad::exp(ad::neg(lv)));
  ad::Var per_elem = ad::add(ad::scale(quad, 0.5), ad::scale(lv, 0.5));
  ad::Var total = ad::add_scalar(ad::scale(ad::sum(per_elem), 1.0 / static_cast<double>(m)),
                                 kHalfLog2Pi * static_cast<double>(mu.shape()[1]));
  return total;
}

// ---- finetuning anchor penalty ----

using MlpSnapshot = std::vector<Tensor>;

inline MlpSnapshot snapshot(const Mlp& net) {
  MlpSnapshot out;
  for (const auto& p : net.params()) out.push_back(p.value());
  return out;
}

namespace detail {

inline ad::Var shift_term(const Mlp& net, const MlpSnapshot& init, const char* which) {
  auto params = net.params();
  if (params.size() != init.size())
    throw std::invalid_argument(std::string("shift_loss: ") + which + " has " +
                                std::to_string(params.size()) + " tensors, snapshot has " +
                                std::to_string(init.size()));
  ad::Var acc = ad::Var::constant(Tensor::scalar(0.0));
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].shape() != init[p].shape)
      throw std::invalid_argument(std::string("shift_loss: ") + which + " tensor " +
                                  std::to_string(p) + " shape " + shape_str(params[p].shape()) +
                                  " vs snapshot " + shape_str(init[p].shape));
    ad::Var flat = ad::reshape(params[p], {params[p].numel()});
    ad::Var ref = ad::Var::constant(Tensor({init[p].numel()}, init[p].values));
    acc = ad::add(acc, ad::sum_squares(ad::sub(flat, ref)));
  }
  return acc;
}

}  // namespace detail

// ||theta_g0 - theta_g0_init||^2 + ||theta_g1 - theta_g1_init||^2 over all
// weights and biases.
inline ad::Var shift_loss(const Mlp& g0, const MlpSnapshot& g0_init, const Mlp& g1,
                          const MlpSnapshot& g1_init) {
  return ad::add(detail::shift_term(g0, g0_init, "g0"), detail::shift_term(g1, g1_init, "g1"));
}

}  // namespace tspf
