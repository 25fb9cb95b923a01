// The two distribution-handling primitives in isolation: inverse-frequency
// balancing weights for an unbalanced assignment, and the entropic
// transport distance between representation clouds.

#include <cstdio>
#include <vector>

#include <tspf/losses.hpp>
#include <tspf/rng.hpp>

int main() {
  // 3:1 treated sample: treated rows are downweighted, controls upweighted,
  // and the weights always average to one.
  std::vector<int> t{1, 1, 1, 0, 1, 1, 0, 1};
  auto bw = tspf::balancing_weights(t);
  std::printf("treated fraction u = %.3f\n", bw.u);
  double mean = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::printf("  t=%d  w=%.4f\n", t[i], bw.w[i]);
    mean += bw.w[i];
  }
  std::printf("mean weight = %.12f\n", mean / static_cast<double>(t.size()));

  // Transport distance: zero for identical clouds, grows with separation.
  tspf::Rng rng(5);
  auto cloud = [&](std::size_t n, double shift) {
    tspf::Tensor m = tspf::Tensor::zeros({n, 2});
    for (auto& v : m.values) v = rng.normal(0.0, 0.3);
    for (std::size_t i = 0; i < n; ++i) m.values[i * 2] += shift;
    return m;
  };
  tspf::Tensor base = cloud(12, 0.0);
  for (double shift : {0.0, 0.5, 1.0, 2.0, 4.0}) {
    tspf::Tensor moved = cloud(12, shift);
    const double d = tspf::ipm_wasserstein(tspf::ad::Var::constant(base),
                                           tspf::ad::Var::constant(moved))
                         .scalar();
    std::printf("shift %.1f -> distance %.4f\n", shift, d);
  }

  const double self = tspf::ipm_wasserstein(tspf::ad::Var::constant(base),
                                            tspf::ad::Var::constant(base))
                          .scalar();
  std::printf("identical clouds -> %.2e\n", self);
  return 0;
}
