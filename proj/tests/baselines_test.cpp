#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tspf/baselines.hpp"

namespace tspf {
namespace {

using testutil::random_tensor;

TrainConfig fast_config() {
  TrainConfig cfg;
  cfg.r = 8;
  cfg.r_u = 3;
  cfg.hidden_phi = 8;
  cfg.hidden_h = 8;
  cfg.hidden_g = 10;
  cfg.hidden_u = 3;
  cfg.hidden_q = 4;
  cfg.lr = 1e-2;
  cfg.epochs_stage1 = 200;
  cfg.batch_size = 64;
  cfg.sinkhorn_iters = 15;
  cfg.seed = 7;
  return cfg;
}

// Pooled sample with a constant additive effect of 4 and light noise.
Dataset effect_world(std::size_t n, std::size_t d, std::uint64_t seed) {
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
    ds.y1[i] = base + 4.0 + rng.normal(0.0, std::sqrt(0.1));
    ds.y[i] = ds.t[i] ? ds.y1[i] : ds.y0[i];
    ds.g[i] = i % 3 == 0 ? 1 : 0;
  }
  return ds;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

TEST(BaselineNameTest, names_are_stable) {
  EXPECT_STREQ(baseline_name(BaselineKind::kTLearner), "t_learner");
  EXPECT_STREQ(baseline_name(BaselineKind::kSLearner), "s_learner");
  EXPECT_STREQ(baseline_name(BaselineKind::kStage1Only), "stage1_only");
}

TEST(SLearnerTest, treatment_column_augmentation_is_the_last_input) {
  // Hand-built single-layer net over [x, t]: y = x + 10 t, so tau is 10.
  BaselineModel m;
  m.kind = BaselineKind::kSLearner;
  std::vector<Tensor> ws{Tensor::matrix(1, 2, {1.0, 10.0})};
  std::vector<Tensor> bs{Tensor::zeros({1})};
  m.nets.emplace_back(std::move(ws), std::move(bs), Activation::kIdentity);
  Tensor x = random_tensor({12, 1}, 3);
  for (double tau : m.predict_cate(x)) EXPECT_DOUBLE_EQ(tau, 10.0);
}

TEST(TLearnerTest, recovers_a_constant_effect) {
  TrainConfig cfg = fast_config();
  Dataset pool = effect_world(256, 3, 100);
  BaselineModel m = train_t_learner(pool, cfg);
  Tensor x_test = random_tensor({400, 3}, 101, -2.0, 2.0);
  EXPECT_NEAR(mean_of(m.predict_cate(x_test)), 4.0, 0.2);
}

TEST(SLearnerTest, recovers_a_constant_effect) {
  TrainConfig cfg = fast_config();
  Dataset pool = effect_world(256, 3, 102);
  BaselineModel m = train_s_learner(pool, cfg);
  Tensor x_test = random_tensor({400, 3}, 103, -2.0, 2.0);
  EXPECT_NEAR(mean_of(m.predict_cate(x_test)), 4.0, 0.3);
}

TEST(TLearnerTest, single_row_arm_still_trains) {
  TrainConfig cfg = fast_config();
  cfg.epochs_stage1 = 4;
  Dataset pool = effect_world(31, 2, 104);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    pool.t[i] = i == 0 ? 0 : 1;
    pool.y[i] = pool.t[i] ? pool.y1[i] : pool.y0[i];
  }
  BaselineModel m = train_t_learner(pool, cfg);
  for (double tau : m.predict_cate(pool.x)) EXPECT_TRUE(std::isfinite(tau));
}

TEST(BaselineTest, one_armed_pools_are_rejected) {
  TrainConfig cfg = fast_config();
  Dataset pool = effect_world(20, 2, 105);
  for (std::size_t i = 0; i < pool.size(); ++i) pool.t[i] = 1;
  EXPECT_THROW(train_t_learner(pool, cfg), std::invalid_argument);
  EXPECT_THROW(train_s_learner(pool, cfg), std::invalid_argument);
  EXPECT_THROW(train_stage1_only(pool, cfg), std::invalid_argument);
  try {
    train_t_learner(pool, cfg);
    FAIL() << "expected invalid_argument";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("both arms"), std::string::npos);
  }
}

TEST(BaselineTest, deterministic_for_fixed_seed) {
  TrainConfig cfg = fast_config();
  cfg.epochs_stage1 = 6;
  Dataset pool = effect_world(64, 2, 106);
  Tensor x = random_tensor({20, 2}, 107);
  EXPECT_EQ(train_t_learner(pool, cfg).predict_cate(x), train_t_learner(pool, cfg).predict_cate(x));
  EXPECT_EQ(train_s_learner(pool, cfg).predict_cate(x), train_s_learner(pool, cfg).predict_cate(x));
}

TEST(Stage1OnlyTest, matches_pretraining_on_a_group_cleared_copy) {
  TrainConfig cfg = fast_config();
  cfg.epochs_stage1 = 5;
  Dataset pool = effect_world(64, 2, 108);  // mixed g flags
  const auto g_before = pool.g;
  BaselineModel m = train_stage1_only(pool, cfg);
  EXPECT_EQ(pool.g, g_before);  // caller's copy is untouched

  Dataset cleared = pool;
  for (auto& gv : cleared.g) gv = 0;
  Stage1Model ref = init_stage1(cleared.dim(), cfg);
  train_stage1(ref, cleared, cfg);

  Tensor x = random_tensor({30, 2}, 109);
  EXPECT_EQ(m.predict_cate(x), predict_cate_stage1(ref, x));
}

TEST(Stage1OnlyTest, validation_guides_selection) {
  TrainConfig cfg = fast_config();
  cfg.epochs_stage1 = 40;
  cfg.patience = 4;
  Dataset pool = effect_world(64, 2, 110);
  Dataset val = effect_world(32, 2, 111);
  BaselineModel m = train_stage1_only(pool, cfg, &val);
  for (double tau : m.predict_cate(val.x)) EXPECT_TRUE(std::isfinite(tau));
}

}  // namespace
}  // namespace tspf
