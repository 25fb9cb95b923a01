// Minimal end-to-end run: generate a confounded sample, pretrain on the
// observational slice, finetune on the randomized carve-out, and score
// the effect estimates against the oracle potentials.

#include <cstdio>

#include <tspf/tspf.hpp>

int main() {
  tspf::ExperimentConfig cfg;
  cfg.n = 600;
  cfg.d = 6;
  cfg.c = 12;
  cfg.rct_fraction = 0.15;
  cfg.seed = 3;
  cfg.train.r = 16;
  cfg.train.r_u = 4;
  cfg.train.hidden_phi = 16;
  cfg.train.hidden_h = 16;
  cfg.train.hidden_g = 20;
  cfg.train.hidden_u = 8;
  cfg.train.hidden_q = 8;
  cfg.train.lr = 3e-3;
  cfg.train.epochs_stage1 = 40;
  cfg.train.epochs_stage2 = 40;
  cfg.train.batch_size = 64;
  cfg.train.sinkhorn_iters = 20;

  const tspf::SeedTriple seeds = tspf::replication_seeds(cfg.seed, 0);
  tspf::Tensor cov = tspf::synthetic_covariates(cfg.n, cfg.d, seeds.synth);
  tspf::DatasetBundle bundle = tspf::build_bundle(cfg, cov, seeds);
  std::printf("observational %zu, randomized %zu, validation %zu, test %zu\n",
              bundle.obs_train.size(), bundle.rct_train.size(), bundle.validation.size(),
              bundle.test.size());

  tspf::TrainConfig tc = cfg.train;
  tc.seed = seeds.init;

  tspf::Stage1Model s1 = tspf::init_stage1(cfg.d, tc);
  tspf::Stage1History h1 = tspf::train_stage1(s1, bundle.obs_train, tc, &bundle.validation);
  std::printf("stage 1: %zu epochs, best %zu, final total %.4f\n", h1.epochs.size(),
              h1.best_epoch, h1.epochs.back().total);

  tspf::Stage2Model s2 = tspf::init_stage2_from_stage1(s1, tc);
  tspf::Stage2History h2 = tspf::train_stage2(s2, bundle.rct_train, tc, &bundle.validation);
  std::printf("stage 2: %zu epochs, best %zu, final total %.4f\n", h2.epochs.size(),
              h2.best_epoch, h2.epochs.back().total);

  auto pretrained = tspf::evaluate(
      [&](const tspf::Tensor& x) { return tspf::predict_cate_stage1(s1, x); }, bundle);
  auto finetuned =
      tspf::evaluate([&](const tspf::Tensor& x) { return tspf::predict_cate(s2, x); }, bundle);
  std::printf("out-of-sample sqrtPEHE: pretrained %.3f, finetuned %.3f\n", pretrained.pehe_out,
              finetuned.pehe_out);
  std::printf("out-of-sample eATE:     pretrained %.3f, finetuned %.3f\n", pretrained.ate_out,
              finetuned.ate_out);

  auto tau = tspf::predict_cate(s2, bundle.test.x);
  std::printf("first effects: ");
  for (std::size_t i = 0; i < 5 && i < tau.size(); ++i) std::printf("%.2f ", tau[i]);
  std::printf("(oracle: ");
  for (std::size_t i = 0; i < 5 && i < bundle.test.size(); ++i)
    std::printf("%.2f ", bundle.test.y1[i] - bundle.test.y0[i]);
  std::printf(")\n");
  return 0;
}
