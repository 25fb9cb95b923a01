#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tspf/data.hpp"
#include "tspf/losses.hpp"
#include "tspf/nn.hpp"
#include "tspf/optim.hpp"
#include "tspf/rng.hpp"
#include "tspf/tensor.hpp"

namespace tspf {

struct TrainConfig {
  double lambda1 = 1e-2;  // reconstruction
  double lambda2 = 1e-2;  // covariate balancing
  double lambda3 = 1e-2;  // mutual-information bound
  double lambda4 = 1e-2;  // finetuning anchor
  double lr = 1e-3;
  std::size_t epochs_stage1 = 300;
  std::size_t epochs_stage2 = 300;
  std::size_t patience = 30;  // early-stop patience on validation loss
  std::size_t batch_size = 128;
  std::size_t r = 64;       // shared representation width
  std::size_t r_u = 16;     // adapter representation width
  std::size_t l_p = 2;      // prediction-head depth
  std::size_t hidden_phi = 64;
  std::size_t hidden_h = 64;
  std::size_t hidden_g = 80;
  std::size_t hidden_u = 16;
  std::size_t hidden_q = 32;
  std::size_t q_inner_steps = 5;
  double sinkhorn_eps = 0.1;
  int sinkhorn_iters = 50;
  Activation activation = Activation::kRelu;
  std::uint64_t seed = 0;

  void validate() const {
    if (r < 1 || r_u < 1) throw std::invalid_argument("TrainConfig: r and r_u must be >= 1");
    if (l_p < 1) throw std::invalid_argument("TrainConfig: head depth must be >= 1");
    if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch_size must be >= 2");
    if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda4 < 0)
      throw std::invalid_argument("TrainConfig: loss scales must be non-negative");
    if (hidden_phi < 1 || hidden_h < 1 || hidden_u < 1 || hidden_q < 1)
      throw std::invalid_argument("TrainConfig: hidden widths must be >= 1");
    if (l_p > 1 && hidden_g < hidden_h)
      throw std::invalid_argument("TrainConfig: stage-2 head width " + std::to_string(hidden_g) +
                                  " must be >= stage-1 head width " + std::to_string(hidden_h));
  }

  std::vector<std::size_t> head_dims_stage1() const {
    std::vector<std::size_t> d{r};
    for (std::size_t l = 0; l + 1 < l_p; ++l) d.push_back(hidden_h);
    d.push_back(1);
    return d;
  }
  std::vector<std::size_t> head_dims_stage2() const {
    std::vector<std::size_t> d{r + r_u};
    for (std::size_t l = 0; l + 1 < l_p; ++l) d.push_back(hidden_g);
    d.push_back(1);
    return d;
  }
};

// ---- stage 1 ----

struct Stage1Model {
  Mlp phi;  // d -> r
  Mlp psi;  // r -> d
  Mlp h0;   // r -> 1
  Mlp h1;   // r -> 1
  std::size_t d = 0;

  std::vector<ad::Var> params() const {
    std::vector<ad::Var> out;
    for (const auto* net : {&phi, &psi, &h0, &h1})
      for (auto& p : net->params()) out.push_back(p);
    return out;
  }
};

struct Stage1Forward {
  ad::Var z, x_hat, y0_tilde, y1_tilde;
};

inline Stage1Model init_stage1(std::size_t d, const TrainConfig& cfg) {
  if (d < 1) throw std::invalid_argument("init_stage1: covariate dim must be >= 1");
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, 0x7331ULL));
  Stage1Model m;
  m.d = d;
  m.phi = Mlp({d, cfg.hidden_phi, cfg.r}, cfg.activation, rng);
  m.psi = Mlp({cfg.r, cfg.hidden_phi, d}, cfg.activation, rng);
  m.h0 = Mlp(cfg.head_dims_stage1(), cfg.activation, rng);
  m.h1 = Mlp(cfg.head_dims_stage1(), cfg.activation, rng);
  return m;
}

inline Stage1Forward stage1_forward(const Stage1Model& m, const ad::Var& x) {
  Stage1Forward f;
  f.z = m.phi.forward(x);
  f.x_hat = m.psi.forward(f.z);
  f.y0_tilde = m.h0.forward(f.z);
  f.y1_tilde = m.h1.forward(f.z);
  return f;
}

inline Stage1Forward stage1_forward(const Stage1Model& m, const Tensor& x) {
  return stage1_forward(m, ad::Var::constant(x));
}

// ---- histories ----

struct Stage1History {
  struct Epoch {
    double total = 0, l_f = 0, l_rec = 0, l_unb = 0, val = 0;
    std::size_t flagged_batches = 0;  // batches where one arm was empty
  };
  std::vector<Epoch> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
};

struct Stage2History {
  struct Epoch {
    double total = 0, l_pred = 0, l_mi = 0, l_shift = 0, q_obj = 0, val = 0;
  };
  std::vector<Epoch> epochs;
  std::size_t best_epoch = 0;
};

namespace detail {

// pred_i for the sample's own arm: t*y1 + (1-t)*y0, with t as a constant
// mask so gradients reach only the factual head per row.
inline ad::Var select_factual(const ad::Var& y0, const ad::Var& y1, const std::vector<int>& t) {
  const std::size_t n = t.size();
  std::vector<double> mask(n), inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = static_cast<double>(t[i]);
    inv[i] = 1.0 - mask[i];
  }
  ad::Var y0f = ad::reshape(y0, {n});
  ad::Var y1f = ad::reshape(y1, {n});
  ad::Var picked1 = ad::mul(y1f, ad::Var::constant(Tensor({n}, std::move(mask))));
  ad::Var picked0 = ad::mul(y0f, ad::Var::constant(Tensor({n}, std::move(inv))));
  return ad::add(picked1, picked0);
}

inline std::vector<std::size_t> arm_rows(const std::vector<int>& t, int arm) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] == arm) out.push_back(i);
  return out;
}

template <typename PredFn>
inline double weighted_factual_value(const Dataset& ds, const BalancingWeights& bw, PredFn&& fn) {
  ad::Var pred = fn(ds.x);
  ad::Var loss = factual_loss(pred, ds.y, bw.w);
  return loss.scalar();
}

inline MlpSnapshot take_snapshot(const std::vector<const Mlp*>& nets) {
  MlpSnapshot out;
  for (const auto* n : nets)
    for (const auto& p : n->params()) out.push_back(p.value());
  return out;
}

inline void restore_snapshot(const std::vector<Mlp*>& nets, const MlpSnapshot& snap) {
  std::size_t k = 0;
  for (auto* n : nets)
    for (auto& p : n->params()) p.mutable_value() = snap[k++];
}

}  // namespace detail

// Pretraining: minimizes factual + lambda1 * reconstruction + lambda2 *
// balancing on observational data. Weights are computed once on the full
// sample and indexed per batch. When a validation set is given, the epoch
// minimizing its weighted factual loss is kept, with early stopping.
inline Stage1History train_stage1(Stage1Model& m, const Dataset& obs, const TrainConfig& cfg,
                                  const Dataset* validation = nullptr) {
  cfg.validate();
  for (std::size_t i = 0; i < obs.size(); ++i)
    if (obs.g[i] != 0)
      throw std::invalid_argument("train_stage1: sample " + std::to_string(i) +
                                  " is not observational (g=1)");
  if (obs.empty()) throw std::invalid_argument("train_stage1: empty dataset");
  if (obs.dim() != m.d)
    throw std::invalid_argument("train_stage1: data dim " + std::to_string(obs.dim()) +
                                " vs model dim " + std::to_string(m.d));

  Stage1History hist;
  if (cfg.epochs_stage1 == 0) return hist;

  const BalancingWeights bw = balancing_weights(obs.t);
  BalancingWeights bw_val;
  if (validation && !validation->empty()) bw_val = balancing_weights(validation->t);

  Adam opt(m.params(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  const std::uint64_t batch_seed = derive_seed(cfg.seed, 0x5331ULL);

  double best_val = std::numeric_limits<double>::infinity();
  MlpSnapshot best;
  std::size_t stall = 0;
  const bool selecting = validation && !validation->empty();

  for (std::size_t epoch = 0; epoch < cfg.epochs_stage1; ++epoch) {
    Stage1History::Epoch ep;
    auto plan = batches(obs.size(), cfg.batch_size, batch_seed, epoch);
    for (const auto& idx : plan) {
      Tensor xb = obs.x_rows(idx);
      std::vector<int> tb(idx.size());
      std::vector<double> yb(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) {
        tb[k] = obs.t[idx[k]];
        yb[k] = obs.y[idx[k]];
      }
      auto fwd = stage1_forward(m, xb);
      ad::Var pred = detail::select_factual(fwd.y0_tilde, fwd.y1_tilde, tb);
      ad::Var l_f = factual_loss(pred, yb, bw.gather(idx));
      ad::Var l_rec = reconstruction_loss(fwd.x_hat, xb);

      auto rows_t = detail::arm_rows(tb, 1);
      auto rows_c = detail::arm_rows(tb, 0);
      ad::Var l_unb;
      if (rows_t.empty() || rows_c.empty()) {
        l_unb = ad::Var::constant(Tensor::scalar(0.0));
        ++ep.flagged_batches;
      } else {
        l_unb = ipm_wasserstein(ad::take_rows(fwd.z, rows_t), ad::take_rows(fwd.z, rows_c),
                                cfg.sinkhorn_eps, cfg.sinkhorn_iters);
      }

      ad::Var total = ad::add(l_f, ad::add(ad::scale(l_rec, cfg.lambda1),
                                           ad::scale(l_unb, cfg.lambda2)));
      opt.zero_grad();
      ad::backward(total);
      opt.step();

      const double bf = static_cast<double>(idx.size()) / static_cast<double>(obs.size());
      ep.l_f += l_f.scalar() * bf;
      ep.l_rec += l_rec.scalar() * bf;
      ep.l_unb += l_unb.scalar() * bf;
      ep.total += total.scalar() * bf;
    }

    if (selecting) {
      ep.val = detail::weighted_factual_value(*validation, bw_val, [&](const Tensor& x) {
        auto f = stage1_forward(m, x);
        return detail::select_factual(f.y0_tilde, f.y1_tilde, validation->t);
      });
      if (ep.val < best_val) {
        best_val = ep.val;
        best = detail::take_snapshot({&m.phi, &m.psi, &m.h0, &m.h1});
        hist.best_epoch = epoch + 1;
        stall = 0;
      } else if (++stall >= cfg.patience) {
        hist.epochs.push_back(ep);
        break;
      }
    }
    hist.epochs.push_back(ep);
  }

  if (selecting && !best.empty())
    detail::restore_snapshot({&m.phi, &m.psi, &m.h0, &m.h1}, best);
  else
    hist.best_epoch = hist.epochs.size();
  return hist;
}

// ---- stage 2 ----

struct Stage2Model {
  Mlp phi;    // frozen copy of the stage-1 representation
  Mlp phi_u;  // d -> r_u adapter
  Mlp g0;     // (r + r_u) -> 1
  Mlp g1;
  VariationalCond q_net;  // r -> r_u
  MlpSnapshot g0_init;    // anchor for the shift penalty
  MlpSnapshot g1_init;
  std::size_t d = 0;

  std::vector<ad::Var> trainable_params() const {
    std::vector<ad::Var> out;
    for (const auto* net : {&phi_u, &g0, &g1})
      for (auto& p : net->params()) out.push_back(p);
    return out;
  }
};

struct Stage2Forward {
  ad::Var z, z_u, y0_hat, y1_hat;
};

namespace detail {

// [W_h 0; 0 0] block layout with b = [b_h; 0]: the retained pathway keeps
// stage-1 arithmetic exactly; zero blocks sever the new inputs and units.
inline Mlp widen_head(const Mlp& h, const std::vector<std::size_t>& g_dims, Activation act,
                      int which) {
  const auto& h_dims = h.dims();
  if (g_dims.size() != h_dims.size())
    throw std::invalid_argument("init_stage2_from_stage1: g" + std::to_string(which) + " depth " +
                                std::to_string(g_dims.size() - 1) + " vs h depth " +
                                std::to_string(h_dims.size() - 1));
  for (std::size_t l = 0; l < g_dims.size(); ++l)
    if (g_dims[l] < h_dims[l])
      throw std::invalid_argument("init_stage2_from_stage1: layer " + std::to_string(l) +
                                  " width " + std::to_string(g_dims[l]) +
                                  " is narrower than stage-1 width " + std::to_string(h_dims[l]));
  std::vector<Tensor> ws, bs;
  for (std::size_t l = 0; l + 1 < g_dims.size(); ++l) {
    const std::size_t gi = g_dims[l], go = g_dims[l + 1];
    const std::size_t hi = h_dims[l], ho = h_dims[l + 1];
    Tensor w = Tensor::zeros({go, gi});
    const Tensor& hw = h.weight(l).value();
    for (std::size_t o = 0; o < ho; ++o)
      for (std::size_t i = 0; i < hi; ++i) w.values[o * gi + i] = hw.values[o * hi + i];
    Tensor b = Tensor::zeros({go});
    const Tensor& hb = h.bias(l).value();
    for (std::size_t o = 0; o < ho; ++o) b.values[o] = hb.values[o];
    ws.push_back(std::move(w));
    bs.push_back(std::move(b));
  }
  return Mlp(std::move(ws), std::move(bs), act);
}

inline Mlp clone_mlp(const Mlp& src) {
  std::vector<Tensor> ws, bs;
  for (std::size_t l = 0; l < src.layer_count(); ++l) {
    ws.push_back(src.weight(l).value());
    bs.push_back(src.bias(l).value());
  }
  return Mlp(std::move(ws), std::move(bs), src.activation());
}

}  // namespace detail

inline Stage2Model init_stage2_from_stage1(const Stage1Model& s1, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.r != s1.phi.out_dim())
    throw std::invalid_argument("init_stage2_from_stage1: config r " + std::to_string(cfg.r) +
                                " vs stage-1 representation width " +
                                std::to_string(s1.phi.out_dim()));
  Stage2Model m;
  m.d = s1.d;
  m.phi = detail::clone_mlp(s1.phi);
  m.phi.set_frozen(true);
  m.g0 = detail::widen_head(s1.h0, cfg.head_dims_stage2(), s1.h0.activation(), 0);
  m.g1 = detail::widen_head(s1.h1, cfg.head_dims_stage2(), s1.h1.activation(), 1);
  Rng rng(derive_seed(cfg.seed, 0x7332ULL));
  m.phi_u = Mlp({s1.d, cfg.hidden_u, cfg.r_u}, cfg.activation, rng);
  m.q_net = VariationalCond(cfg.r, cfg.r_u, cfg.hidden_q, cfg.activation, rng);
  m.g0_init = snapshot(m.g0);
  m.g1_init = snapshot(m.g1);
  return m;
}

inline Stage2Forward stage2_forward(const Stage2Model& m, const ad::Var& x) {
  Stage2Forward f;
  f.z = m.phi.forward(x);  // phi is frozen: no graph edges into its params
  f.z_u = m.phi_u.forward(x);
  ad::Var cat = ad::concat_cols(f.z, f.z_u);
  f.y0_hat = m.g0.forward(cat);
  f.y1_hat = m.g1.forward(cat);
  return f;
}

inline Stage2Forward stage2_forward(const Stage2Model& m, const Tensor& x) {
  return stage2_forward(m, ad::Var::constant(x));
}

// Finetuning: minimizes prediction + lambda3 * MI bound + lambda4 * shift
// on randomized data, with the representation frozen. The variational net
// is refit by q_inner_steps before each main step and held fixed during it.
inline Stage2History train_stage2(Stage2Model& m, const Dataset& rct, const TrainConfig& cfg,
                                  const Dataset* validation = nullptr) {
  cfg.validate();
  for (std::size_t i = 0; i < rct.size(); ++i)
    if (rct.g[i] != 1)
      throw std::invalid_argument("train_stage2: sample " + std::to_string(i) +
                                  " is not randomized (g=0)");
  if (rct.empty()) throw std::invalid_argument("train_stage2: empty dataset");
  if (rct.dim() != m.d)
    throw std::invalid_argument("train_stage2: data dim " + std::to_string(rct.dim()) +
                                " vs model dim " + std::to_string(m.d));

  Stage2History hist;
  if (cfg.epochs_stage2 == 0) return hist;

  const BalancingWeights bw = balancing_weights(rct.t);
  BalancingWeights bw_val;
  if (validation && !validation->empty()) bw_val = balancing_weights(validation->t);

  Adam opt_main(m.trainable_params(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  Adam opt_q(m.q_net.params(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  const std::uint64_t batch_seed = derive_seed(cfg.seed, 0x5332ULL);

  double best_val = std::numeric_limits<double>::infinity();
  MlpSnapshot best;
  std::size_t stall = 0;
  const bool selecting = validation && !validation->empty();

  // The starting point is the converged stage-1 function, so it competes
  // for selection like any epoch. best_epoch stays 0 when no update beats
  // it and the finetuned model falls back to its initialization.
  if (selecting) {
    best_val = detail::weighted_factual_value(*validation, bw_val, [&](const Tensor& x) {
      auto f = stage2_forward(m, x);
      return detail::select_factual(f.y0_hat, f.y1_hat, validation->t);
    });
    best = detail::take_snapshot({&m.phi_u, &m.g0, &m.g1});
  }

  for (std::size_t epoch = 0; epoch < cfg.epochs_stage2; ++epoch) {
    Stage2History::Epoch ep;
    auto plan = batches(rct.size(), cfg.batch_size, batch_seed, epoch);
    for (const auto& idx : plan) {
      Tensor xb = rct.x_rows(idx);
      std::vector<int> tb(idx.size());
      std::vector<double> yb(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) {
        tb[k] = rct.t[idx[k]];
        yb[k] = rct.y[idx[k]];
      }

      ad::Var xv = ad::Var::constant(xb);
      ad::Var z = m.phi.forward(xv);
      ad::Var z_u = m.phi_u.forward(xv);

      // variational refit on detached representations
      ad::Var z_u_det = ad::detach(z_u);
      double q_obj_last = 0.0;
      for (std::size_t s = 0; s < cfg.q_inner_steps; ++s) {
        ad::Var nll = q_nll(z, z_u_det, m.q_net);
        opt_q.zero_grad();
        ad::backward(nll);
        opt_q.step();
        q_obj_last = nll.scalar();
      }

      // main step with the variational net held fixed
      m.q_net.set_frozen(true);
      ad::Var cat = ad::concat_cols(z, z_u);
      ad::Var pred = detail::select_factual(m.g0.forward(cat), m.g1.forward(cat), tb);
      ad::Var l_pred = factual_loss(pred, yb, bw.gather(idx));
      ad::Var l_mi = club_mi(z, z_u, m.q_net);
      ad::Var l_shift = shift_loss(m.g0, m.g0_init, m.g1, m.g1_init);
      ad::Var total = ad::add(l_pred, ad::add(ad::scale(l_mi, cfg.lambda3),
                                              ad::scale(l_shift, cfg.lambda4)));
      opt_main.zero_grad();
      ad::backward(total);
      opt_main.step();
      m.q_net.set_frozen(false);

      const double bf = static_cast<double>(idx.size()) / static_cast<double>(rct.size());
      ep.l_pred += l_pred.scalar() * bf;
      ep.l_mi += l_mi.scalar() * bf;
      ep.l_shift += l_shift.scalar() * bf;
      ep.total += total.scalar() * bf;
      ep.q_obj += q_obj_last * bf;
    }

    if (selecting) {
      ep.val = detail::weighted_factual_value(*validation, bw_val, [&](const Tensor& x) {
        auto f = stage2_forward(m, x);
        return detail::select_factual(f.y0_hat, f.y1_hat, validation->t);
      });
      if (ep.val < best_val) {
        best_val = ep.val;
        best = detail::take_snapshot({&m.phi_u, &m.g0, &m.g1});
        hist.best_epoch = epoch + 1;
        stall = 0;
      } else if (++stall >= cfg.patience) {
        hist.epochs.push_back(ep);
        break;
      }
    }
    hist.epochs.push_back(ep);
  }

  if (selecting && !best.empty())
    detail::restore_snapshot({&m.phi_u, &m.g0, &m.g1}, best);
  else
    hist.best_epoch = hist.epochs.size();
  return hist;
}

inline std::vector<double> predict_cate(const Stage2Model& m, const Tensor& x) {
  auto f = stage2_forward(m, x);
  const std::size_t n = x.shape[0];
  std::vector<double> tau(n);
  for (std::size_t i = 0; i < n; ++i)
    tau[i] = f.y1_hat.value().values[i] - f.y0_hat.value().values[i];
  return tau;
}

inline std::vector<double> predict_cate_stage1(const Stage1Model& m, const Tensor& x) {
  auto f = stage1_forward(m, x);
  const std::size_t n = x.shape[0];
  std::vector<double> tau(n);
  for (std::size_t i = 0; i < n; ++i)
    tau[i] = f.y1_tilde.value().values[i] - f.y0_tilde.value().values[i];
  return tau;
}

}  // namespace tspf
