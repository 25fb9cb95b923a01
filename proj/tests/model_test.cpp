#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tspf/model.hpp"

namespace tspf {
namespace {

using testutil::random_tensor;

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.r = 5;
  cfg.r_u = 3;
  cfg.l_p = 2;
  cfg.hidden_phi = 6;
  cfg.hidden_h = 4;
  cfg.hidden_g = 6;
  cfg.hidden_u = 3;
  cfg.hidden_q = 4;
  cfg.batch_size = 32;
  cfg.sinkhorn_iters = 15;
  cfg.seed = 11;
  return cfg;
}

// Linear-truth world. When `obs_bias` is nonzero the observational arm gap
// is truth + obs_bias, standing in for confounding; the randomized world
// keeps the true gap of 4.
Dataset linear_world(std::size_t n, std::size_t d, double obs_bias, int g, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(d);
  for (auto& v : w) v = rng.normal(0.0, 0.5);
  Dataset ds = Dataset::with_dims(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double base = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double xv = rng.normal(0.0, 1.0);
      ds.x.values[i * d + j] = xv;
      base += w[j] * xv;
    }
    ds.t[i] = rng.bernoulli(0.5);
    ds.y0[i] = base + rng.normal(0.0, std::sqrt(0.1));
    ds.y1[i] = base + 4.0 + obs_bias + rng.normal(0.0, std::sqrt(0.1));
    ds.y[i] = ds.t[i] ? ds.y1[i] : ds.y0[i];
    ds.g[i] = g;
  }
  return ds;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

TEST(Stage1InitTest, module_shapes_follow_config) {
  TrainConfig cfg = tiny_config();
  Stage1Model m = init_stage1(7, cfg);
  EXPECT_EQ(m.phi.dims(), (std::vector<std::size_t>{7, 6, 5}));
  EXPECT_EQ(m.psi.dims(), (std::vector<std::size_t>{5, 6, 7}));
  EXPECT_EQ(m.h0.dims(), (std::vector<std::size_t>{5, 4, 1}));
  EXPECT_EQ(m.h1.dims(), (std::vector<std::size_t>{5, 4, 1}));
  EXPECT_EQ(m.params().size(), 16u);
  EXPECT_THROW(init_stage1(0, cfg), std::invalid_argument);
}

TEST(Stage1InitTest, seed_determines_every_parameter) {
  TrainConfig cfg = tiny_config();
  Stage1Model a = init_stage1(7, cfg);
  Stage1Model b = init_stage1(7, cfg);
  cfg.seed = 12;
  Stage1Model c = init_stage1(7, cfg);
  EXPECT_EQ(a.phi.weight(0).value().values, b.phi.weight(0).value().values);
  EXPECT_EQ(a.h1.weight(1).value().values, b.h1.weight(1).value().values);
  EXPECT_NE(a.phi.weight(0).value().values, c.phi.weight(0).value().values);
}

TEST(TrainConfigTest, head_dims_track_depth) {
  TrainConfig cfg = tiny_config();
  cfg.l_p = 1;
  EXPECT_EQ(cfg.head_dims_stage1(), (std::vector<std::size_t>{5, 1}));
  EXPECT_EQ(cfg.head_dims_stage2(), (std::vector<std::size_t>{8, 1}));
  cfg.l_p = 3;
  EXPECT_EQ(cfg.head_dims_stage1(), (std::vector<std::size_t>{5, 4, 4, 1}));
  EXPECT_EQ(cfg.head_dims_stage2(), (std::vector<std::size_t>{8, 6, 6, 1}));
}

TEST(TrainConfigTest, validation_catches_bad_settings) {
  TrainConfig cfg = tiny_config();
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.hidden_g = 3;  // narrower than hidden_h with a real hidden layer
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.lambda3 = -0.1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Stage2InitTest, widened_heads_reproduce_stage1_outputs_exactly) {
  for (Activation act : {Activation::kRelu, Activation::kTanh}) {
    TrainConfig cfg = tiny_config();
    cfg.activation = act;
    const std::size_t d = 7;
    Stage1Model s1 = init_stage1(d, cfg);
    Stage2Model s2 = init_stage2_from_stage1(s1, cfg);

    Tensor x = random_tensor({1000, d}, 91, -2.0, 2.0);
    auto f1 = stage1_forward(s1, x);
    auto f2 = stage2_forward(s2, x);
    double worst = 0.0;
    for (std::size_t i = 0; i < 1000; ++i) {
      worst = std::max(worst, std::fabs(f1.y0_tilde.value().values[i] - f2.y0_hat.value().values[i]));
      worst = std::max(worst, std::fabs(f1.y1_tilde.value().values[i] - f2.y1_hat.value().values[i]));
    }
    EXPECT_EQ(worst, 0.0) << activation_name(act);

    auto tau1 = predict_cate_stage1(s1, x);
    auto tau2 = predict_cate(s2, x);
    EXPECT_EQ(tau1, tau2) << activation_name(act);
  }
}

TEST(Stage2InitTest, widening_validates_depth_and_width) {
  Rng rng(5);
  Mlp h({3, 4, 1}, Activation::kRelu, rng);
  try {
    detail::widen_head(h, {3, 2, 1}, Activation::kRelu, 0);
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("layer 1"), std::string::npos);
    EXPECT_NE(msg.find("narrower"), std::string::npos);
  }
  EXPECT_THROW(detail::widen_head(h, {3, 1}, Activation::kRelu, 1), std::invalid_argument);

  TrainConfig cfg = tiny_config();
  Stage1Model s1 = init_stage1(4, cfg);
  cfg.r = 6;  // no longer matches the trained representation
  EXPECT_THROW(init_stage2_from_stage1(s1, cfg), std::invalid_argument);
}

TEST(Stage2InitTest, shift_penalty_is_zero_at_the_anchor) {
  TrainConfig cfg = tiny_config();
  Stage1Model s1 = init_stage1(4, cfg);
  Stage2Model s2 = init_stage2_from_stage1(s1, cfg);
  EXPECT_DOUBLE_EQ(shift_loss(s2.g0, s2.g0_init, s2.g1, s2.g1_init).scalar(), 0.0);
  s2.g0.weight(0).mutable_value().values[0] += 1.0;
  EXPECT_GT(shift_loss(s2.g0, s2.g0_init, s2.g1, s2.g1_init).scalar(), 0.0);
}

TEST(Stage2InitTest, representation_arrives_frozen) {
  TrainConfig cfg = tiny_config();
  Stage1Model s1 = init_stage1(4, cfg);
  Stage2Model s2 = init_stage2_from_stage1(s1, cfg);
  EXPECT_TRUE(s2.phi.frozen());
  EXPECT_FALSE(s2.phi_u.frozen());
  EXPECT_FALSE(s2.g0.frozen());
  // Trainable set is exactly the adapter and both heads.
  EXPECT_EQ(s2.trainable_params().size(),
            s2.phi_u.params().size() + s2.g0.params().size() + s2.g1.params().size());
}

TEST(Stage1TrainTest, zero_epochs_leave_parameters_untouched) {
  TrainConfig cfg = tiny_config();
  cfg.epochs_stage1 = 0;
  Stage1Model m = init_stage1(3, cfg);
  const auto before = m.phi.weight(0).value().values;
  Dataset obs = linear_world(40, 3, 0.0, 0, 1);
  auto hist = train_stage1(m, obs, cfg);
  EXPECT_TRUE(hist.epochs.empty());
  EXPECT_EQ(m.phi.weight(0).value().values, before);
}

TEST(Stage1TrainTest, rejects_randomized_rows_and_dim_mismatch) {
  TrainConfig cfg = tiny_config();
  Stage1Model m = init_stage1(3, cfg);
  Dataset obs = linear_world(10, 3, 0.0, 0, 2);
  obs.g[4] = 1;
  try {
    train_stage1(m, obs, cfg);
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("sample 4"), std::string::npos);
  }
  Dataset wide = linear_world(10, 5, 0.0, 0, 3);
  EXPECT_THROW(train_stage1(m, wide, cfg), std::invalid_argument);
  EXPECT_THROW(train_stage1(m, Dataset{}, cfg), std::invalid_argument);
}

TEST(Stage1TrainTest, fits_a_noisy_linear_world) {
  TrainConfig cfg = tiny_config();
  cfg.r = 8;
  cfg.hidden_phi = 8;
  cfg.hidden_h = 8;
  cfg.hidden_g = 10;
  cfg.lr = 1e-2;
  cfg.epochs_stage1 = 200;
  cfg.batch_size = 64;
  cfg.seed = 21;
  Dataset obs = linear_world(256, 3, 0.0, 0, 4);
  Stage1Model m = init_stage1(3, cfg);
  auto hist = train_stage1(m, obs, cfg);
  ASSERT_EQ(hist.epochs.size(), 200u);

  const auto bw = balancing_weights(obs.t);
  auto f = stage1_forward(m, obs.x);
  ad::Var pred = detail::select_factual(f.y0_tilde, f.y1_tilde, obs.t);
  const double rmse = std::sqrt(factual_loss(pred, obs.y, bw.w).scalar());
  EXPECT_LE(rmse, 0.4);  // noise floor is sqrt(0.1) ~ 0.316

  // Loss trajectory: the tail sits well below the head.
  double head = 0.0, tail = 0.0;
  for (std::size_t e = 0; e < 10; ++e) {
    head += hist.epochs[e].total;
    tail += hist.epochs[hist.epochs.size() - 1 - e].total;
  }
  EXPECT_LT(tail, head * 0.5);
}

TEST(Stage1TrainTest, validation_selection_stops_early_and_restores_best) {
  TrainConfig cfg = tiny_config();
  cfg.epochs_stage1 = 400;
  cfg.patience = 5;
  cfg.lr = 1e-2;
  cfg.seed = 31;
  Dataset obs = linear_world(128, 3, 0.0, 0, 5);
  Dataset val = linear_world(64, 3, 0.0, 1, 6);  // randomized validation
  Stage1Model m = init_stage1(3, cfg);
  auto hist = train_stage1(m, obs, cfg, &val);
  EXPECT_LT(hist.epochs.size(), 400u);
  ASSERT_GT(hist.best_epoch, 0u);
  EXPECT_LE(hist.best_epoch, hist.epochs.size());

  // The restored parameters reproduce the best recorded validation loss.
  const auto bw_val = balancing_weights(val.t);
  auto f = stage1_forward(m, val.x);
  ad::Var pred = detail::select_factual(f.y0_tilde, f.y1_tilde, val.t);
  const double val_now = factual_loss(pred, val.y, bw_val.w).scalar();
  double best_seen = hist.epochs[0].val;
  for (const auto& ep : hist.epochs) best_seen = std::min(best_seen, ep.val);
  EXPECT_NEAR(val_now, best_seen, 1e-12);
}

TEST(Stage1TrainTest, deterministic_for_fixed_seed) {
  TrainConfig cfg = tiny_config();
  cfg.epochs_stage1 = 8;
  Dataset obs = linear_world(64, 3, 0.0, 0, 7);
  Stage1Model a = init_stage1(3, cfg);
  Stage1Model b = init_stage1(3, cfg);
  train_stage1(a, obs, cfg);
  train_stage1(b, obs, cfg);
  EXPECT_EQ(a.phi.weight(0).value().values, b.phi.weight(0).value().values);
  EXPECT_EQ(a.h0.bias(1).value().values, b.h0.bias(1).value().values);
}

TEST(Stage2TrainTest, rejects_observational_rows) {
  TrainConfig cfg = tiny_config();
  Stage1Model s1 = init_stage1(3, cfg);
  Stage2Model s2 = init_stage2_from_stage1(s1, cfg);
  Dataset rct = linear_world(10, 3, 0.0, 1, 8);
  rct.g[2] = 0;
  try {
    train_stage2(s2, rct, cfg);
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("sample 2"), std::string::npos);
  }
}

TEST(Stage2TrainTest, zero_epochs_keep_stage1_predictions) {
  TrainConfig cfg = tiny_config();
  cfg.epochs_stage2 = 0;
  Stage1Model s1 = init_stage1(3, cfg);
  Stage2Model s2 = init_stage2_from_stage1(s1, cfg);
  Dataset rct = linear_world(20, 3, 0.0, 1, 9);
  auto hist = train_stage2(s2, rct, cfg);
  EXPECT_TRUE(hist.epochs.empty());
  Tensor x = random_tensor({50, 3}, 10);
  EXPECT_EQ(predict_cate(s2, x), predict_cate_stage1(s1, x));
}

TEST(Stage2TrainTest, representation_stays_bitwise_frozen_through_training) {
  TrainConfig cfg = tiny_config();
  cfg.epochs_stage2 = 6;
  Stage1Model s1 = init_stage1(3, cfg);
  Stage2Model s2 = init_stage2_from_stage1(s1, cfg);
  std::vector<std::vector<double>> before;
  for (const auto& p : s2.phi.params()) before.push_back(p.value().values);
  Dataset rct = linear_world(48, 3, 0.0, 1, 12);
  train_stage2(s2, rct, cfg);
  auto params = s2.phi.params();
  for (std::size_t k = 0; k < params.size(); ++k)
    EXPECT_EQ(params[k].value().values, before[k]) << "phi tensor " << k;
  // The adapter did move.
  EXPECT_NE(s2.phi_u.weight(0).value().values, init_stage2_from_stage1(s1, cfg).phi_u.weight(0).value().values);
}

TEST(Stage2TrainTest, finetuning_objective_has_no_path_into_the_representation) {
  TrainConfig cfg = tiny_config();
  Stage1Model s1 = init_stage1(3, cfg);
  Stage2Model s2 = init_stage2_from_stage1(s1, cfg);
  Dataset rct = linear_world(16, 3, 0.0, 1, 13);

  // Mirror of the trainer's main objective on one batch.
  s2.q_net.set_frozen(true);
  ad::Var xv = ad::Var::constant(rct.x);
  ad::Var z = s2.phi.forward(xv);
  ad::Var z_u = s2.phi_u.forward(xv);
  ad::Var cat = ad::concat_cols(z, z_u);
  ad::Var pred = detail::select_factual(s2.g0.forward(cat), s2.g1.forward(cat), rct.t);
  const auto bw = balancing_weights(rct.t);
  ad::Var total = ad::add(factual_loss(pred, rct.y, bw.w),
                          ad::add(ad::scale(club_mi(z, z_u, s2.q_net), cfg.lambda3),
                                  ad::scale(shift_loss(s2.g0, s2.g0_init, s2.g1, s2.g1_init),
                                            cfg.lambda4)));
  s2.q_net.set_frozen(false);

  auto seen = ad::reachable_nodes(total);
  for (const auto& p : s2.phi.params())
    EXPECT_EQ(seen.count(p.node().get()), 0u) << "frozen representation leaked into the graph";
  for (const auto& p : s2.q_net.params())
    EXPECT_EQ(seen.count(p.node().get()), 0u) << "held-fixed variational net leaked into the graph";
  bool any_trainable = false;
  for (const auto& p : s2.trainable_params()) any_trainable |= seen.count(p.node().get()) > 0;
  EXPECT_TRUE(any_trainable);
}

TEST(Stage2TrainTest, corrects_a_biased_pretraining_world) {
  TrainConfig cfg = tiny_config();
  cfg.r = 8;
  cfg.hidden_phi = 8;
  cfg.hidden_h = 8;
  cfg.hidden_g = 10;
  cfg.lr = 1e-2;
  cfg.epochs_stage1 = 150;
  cfg.epochs_stage2 = 200;
  cfg.batch_size = 64;
  cfg.seed = 41;

  // Observational gap 6, true randomized gap 4.
  Dataset obs = linear_world(300, 3, 2.0, 0, 14);
  Dataset rct = linear_world(150, 3, 0.0, 1, 15);
  Dataset val = linear_world(100, 3, 0.0, 1, 16);

  Stage1Model s1 = init_stage1(3, cfg);
  train_stage1(s1, obs, cfg);
  Stage2Model s2 = init_stage2_from_stage1(s1, cfg);
  train_stage2(s2, rct, cfg, &val);

  Tensor x_test = random_tensor({400, 3}, 17, -2.0, 2.0);
  const double tau1 = mean_of(predict_cate_stage1(s1, x_test));
  const double tau2 = mean_of(predict_cate(s2, x_test));
  EXPECT_LT(std::fabs(tau2 - 4.0), std::fabs(tau1 - 4.0));
  EXPECT_LE(std::fabs(tau2 - 4.0), 1.0);
}

TEST(Stage2TrainTest, huge_anchor_scale_pins_the_heads) {
  TrainConfig cfg = tiny_config();
  cfg.lambda4 = 1e6;
  cfg.epochs_stage2 = 30;
  cfg.seed = 51;
  Stage1Model s1 = init_stage1(3, cfg);
  Stage2Model s2 = init_stage2_from_stage1(s1, cfg);
  Dataset rct = linear_world(64, 3, 0.0, 1, 18);
  train_stage2(s2, rct, cfg);
  EXPECT_LE(shift_loss(s2.g0, s2.g0_init, s2.g1, s2.g1_init).scalar(), 1e-2);
}

TEST(Stage2TrainTest, deterministic_for_fixed_seed) {
  TrainConfig cfg = tiny_config();
  cfg.epochs_stage1 = 5;
  cfg.epochs_stage2 = 5;
  Dataset obs = linear_world(64, 3, 0.0, 0, 19);
  Dataset rct = linear_world(32, 3, 0.0, 1, 20);
  Tensor x = random_tensor({30, 3}, 21);

  auto run = [&] {
    Stage1Model s1 = init_stage1(3, cfg);
    train_stage1(s1, obs, cfg);
    Stage2Model s2 = init_stage2_from_stage1(s1, cfg);
    train_stage2(s2, rct, cfg);
    return predict_cate(s2, x);
  };
  EXPECT_EQ(run(), run());
}

TEST(Stage2TrainTest, predictions_are_row_independent) {
  TrainConfig cfg = tiny_config();
  Stage1Model s1 = init_stage1(3, cfg);
  Stage2Model s2 = init_stage2_from_stage1(s1, cfg);
  Tensor x = random_tensor({10, 3}, 22);
  auto tau = predict_cate(s2, x);
  // Reverse the rows; predictions must follow the permutation.
  Tensor rev = Tensor::zeros({10, 3});
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 3; ++j) rev.values[i * 3 + j] = x.values[(9 - i) * 3 + j];
  auto tau_rev = predict_cate(s2, rev);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(tau_rev[i], tau[9 - i]);
}

TEST(SelectFactualTest, picks_the_observed_arm_per_row) {
  ad::Var y0 = ad::Var::constant(Tensor::matrix(2, 1, {1.0, 2.0}));
  ad::Var y1 = ad::Var::constant(Tensor::matrix(2, 1, {10.0, 20.0}));
  auto picked = detail::select_factual(y0, y1, {1, 0});
  EXPECT_EQ(picked.value().values, (std::vector<double>{10.0, 2.0}));
}

}  // namespace
}  // namespace tspf
