#pragma once

#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "tspf/data.hpp"
#include "tspf/losses.hpp"
#include "tspf/model.hpp"
#include "tspf/nn.hpp"
#include "tspf/optim.hpp"

namespace tspf {

enum class BaselineKind { kTLearner, kSLearner, kStage1Only };

inline const char* baseline_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::kTLearner: return "t_learner";
    case BaselineKind::kSLearner: return "s_learner";
    case BaselineKind::kStage1Only: return "stage1_only";
  }
  return "?";
}

// One-stage comparators trained on the pooled OBS+RCT rows.
struct BaselineModel {
  BaselineKind kind = BaselineKind::kTLearner;
  std::vector<Mlp> nets;  // t_learner: {control, treated}; s_learner: {net}
  Stage1Model s1;         // stage1_only only
  TrainConfig config;

  std::vector<double> predict_cate(const Tensor& x) const {
    const std::size_t n = x.shape[0];
    std::vector<double> tau(n);
    switch (kind) {
      case BaselineKind::kTLearner: {
        auto y0 = nets[0].forward(x);
        auto y1 = nets[1].forward(x);
        for (std::size_t i = 0; i < n; ++i)
          tau[i] = y1.value().values[i] - y0.value().values[i];
        return tau;
      }
      case BaselineKind::kSLearner: {
        const std::size_t d = x.shape[1];
        Tensor x0 = Tensor::zeros({n, d + 1});
        Tensor x1 = Tensor::zeros({n, d + 1});
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < d; ++j) {
            x0.values[i * (d + 1) + j] = x.values[i * d + j];
            x1.values[i * (d + 1) + j] = x.values[i * d + j];
          }
          x1.values[i * (d + 1) + d] = 1.0;
        }
        auto y0 = nets[0].forward(x0);
        auto y1 = nets[0].forward(x1);
        for (std::size_t i = 0; i < n; ++i)
          tau[i] = y1.value().values[i] - y0.value().values[i];
        return tau;
      }
      case BaselineKind::kStage1Only:
        return predict_cate_stage1(s1, x);
    }
    throw std::logic_error("unreachable");
  }
};

namespace detail {

inline void check_both_arms(const Dataset& pool, const char* op) {
  bool has0 = false, has1 = false;
  for (int t : pool.t) (t ? has1 : has0) = true;
  if (!has0 || !has1)
    throw std::invalid_argument(std::string(op) + ": pooled data must contain both arms");
}

// Epoch-loop scaffold shared by the meta-learners: run `train_epoch`, then
// keep the checkpoint minimizing the weighted factual validation loss.
template <typename EpochFn, typename ValFn>
inline void fit_with_selection(std::vector<Mlp*> nets, std::size_t epochs, std::size_t patience,
                               const Dataset* validation, EpochFn&& train_epoch, ValFn&& val_loss) {
  const bool selecting = validation && !validation->empty();
  double best_val = std::numeric_limits<double>::infinity();
  MlpSnapshot best;
  std::size_t stall = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    train_epoch(epoch);
    if (!selecting) continue;
    const double v = val_loss();
    if (v < best_val) {
      best_val = v;
      best = take_snapshot({nets.begin(), nets.end()});
      stall = 0;
    } else if (++stall >= patience) {
      break;
    }
  }
  if (selecting && !best.empty()) restore_snapshot(nets, best);
}

inline void mse_step(Adam& opt, Mlp& net, const Tensor& xb, const std::vector<double>& yb) {
  ad::Var pred = net.forward(xb);
  std::vector<double> ones(yb.size(), 1.0);
  ad::Var loss = factual_loss(pred, yb, ones);
  opt.zero_grad();
  ad::backward(loss);
  opt.step();
}

}  // namespace detail

inline BaselineModel train_t_learner(const Dataset& pool, const TrainConfig& cfg,
                                     const Dataset* validation = nullptr) {
  cfg.validate();
  detail::check_both_arms(pool, "train_t_learner");
  const std::size_t d = pool.dim();

  Rng rng(derive_seed(cfg.seed, 0x743031ULL));
  BaselineModel m;
  m.kind = BaselineKind::kTLearner;
  m.config = cfg;
  m.nets.emplace_back(std::vector<std::size_t>{d, cfg.hidden_h, 1}, cfg.activation, rng);
  m.nets.emplace_back(std::vector<std::size_t>{d, cfg.hidden_h, 1}, cfg.activation, rng);

  auto rows0 = detail::arm_rows(pool.t, 0);
  auto rows1 = detail::arm_rows(pool.t, 1);
  Adam opt0(m.nets[0].params(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  Adam opt1(m.nets[1].params(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  const std::uint64_t seed0 = derive_seed(cfg.seed, 0x743032ULL);
  const std::uint64_t seed1 = derive_seed(cfg.seed, 0x743033ULL);

  BalancingWeights bw_val;
  if (validation && !validation->empty()) bw_val = balancing_weights(validation->t);

  auto arm_epoch = [&](Adam& opt, Mlp& net, const std::vector<std::size_t>& rows,
                       std::uint64_t seed, std::size_t epoch) {
    if (rows.size() < 2) {  // degenerate arm after pre-check: single full batch
      std::vector<double> yb{pool.y[rows[0]]};
      detail::mse_step(opt, net, pool.x_rows(rows), yb);
      return;
    }
    for (const auto& within : batches(rows.size(), std::min(cfg.batch_size, rows.size()), seed,
                                      epoch)) {
      std::vector<std::size_t> idx(within.size());
      std::vector<double> yb(within.size());
      for (std::size_t k = 0; k < within.size(); ++k) {
        idx[k] = rows[within[k]];
        yb[k] = pool.y[idx[k]];
      }
      detail::mse_step(opt, net, pool.x_rows(idx), yb);
    }
  };

  detail::fit_with_selection(
      {&m.nets[0], &m.nets[1]}, cfg.epochs_stage1, cfg.patience, validation,
      [&](std::size_t epoch) {
        arm_epoch(opt0, m.nets[0], rows0, seed0, epoch);
        arm_epoch(opt1, m.nets[1], rows1, seed1, epoch);
      },
      [&]() {
        auto y0 = m.nets[0].forward(validation->x);
        auto y1 = m.nets[1].forward(validation->x);
        ad::Var pred = detail::select_factual(y0, y1, validation->t);
        return factual_loss(pred, validation->y, bw_val.w).scalar();
      });
  return m;
}

inline BaselineModel train_s_learner(const Dataset& pool, const TrainConfig& cfg,
                                     const Dataset* validation = nullptr) {
  cfg.validate();
  detail::check_both_arms(pool, "train_s_learner");
  const std::size_t d = pool.dim(), n = pool.size();

  Rng rng(derive_seed(cfg.seed, 0x733031ULL));
  BaselineModel m;
  m.kind = BaselineKind::kSLearner;
  m.config = cfg;
  m.nets.emplace_back(std::vector<std::size_t>{d + 1, cfg.hidden_h, 1}, cfg.activation, rng);

  Tensor xaug = Tensor::zeros({n, d + 1});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) xaug.values[i * (d + 1) + j] = pool.x.values[i * d + j];
    xaug.values[i * (d + 1) + d] = static_cast<double>(pool.t[i]);
  }

  Adam opt(m.nets[0].params(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  const std::uint64_t seed = derive_seed(cfg.seed, 0x733032ULL);

  BalancingWeights bw_val;
  Tensor val_aug;
  if (validation && !validation->empty()) {
    bw_val = balancing_weights(validation->t);
    const std::size_t nv = validation->size();
    val_aug = Tensor::zeros({nv, d + 1});
    for (std::size_t i = 0; i < nv; ++i) {
      for (std::size_t j = 0; j < d; ++j)
        val_aug.values[i * (d + 1) + j] = validation->x.values[i * d + j];
      val_aug.values[i * (d + 1) + d] = static_cast<double>(validation->t[i]);
    }
  }

  detail::fit_with_selection(
      {&m.nets[0]}, cfg.epochs_stage1, cfg.patience, validation,
      [&](std::size_t epoch) {
        for (const auto& idx : batches(n, cfg.batch_size, seed, epoch)) {
          const std::size_t b = idx.size();
          Tensor xb = Tensor::zeros({b, d + 1});
          std::vector<double> yb(b);
          for (std::size_t k = 0; k < b; ++k) {
            for (std::size_t j = 0; j <= d; ++j)
              xb.values[k * (d + 1) + j] = xaug.values[idx[k] * (d + 1) + j];
            yb[k] = pool.y[idx[k]];
          }
          detail::mse_step(opt, m.nets[0], xb, yb);
        }
      },
      [&]() {
        ad::Var pred = m.nets[0].forward(val_aug);
        return factual_loss(pred, validation->y, bw_val.w).scalar();
      });
  return m;
}

// Ablation: the pretraining objective alone on the pooled rows; the group
// flag is cleared on a copy since pretraining rejects randomized rows.
inline BaselineModel train_stage1_only(const Dataset& pool, const TrainConfig& cfg,
                                       const Dataset* validation = nullptr) {
  cfg.validate();
  detail::check_both_arms(pool, "train_stage1_only");
  Dataset obs = pool;
  for (auto& gv : obs.g) gv = 0;
  BaselineModel m;
  m.kind = BaselineKind::kStage1Only;
  m.config = cfg;
  m.s1 = init_stage1(obs.dim(), cfg);
  train_stage1(m.s1, obs, cfg, validation);
  return m;
}

}  // namespace tspf
