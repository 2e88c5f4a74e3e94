#include "bmds/backbone.hpp"
#include "test_util.hpp"

#include <doctest.h>

using namespace bmds;
using bmds::test::bit_equal;
using bmds::test::randn;

namespace {

Model make(bool mmcf, bool dds, double alpha = 0.0, double gamma = 0.1, std::uint64_t seed = 3) {
  ModelConfig c;
  c.flags = ablation_config(mmcf, dds);
  c.alpha_init = alpha;
  c.gamma_init = gamma;
  c.seed = seed;
  return build_model(c);
}

std::int64_t conv_params(std::int64_t co, std::int64_t ci, std::int64_t k) { return co * ci * k * k * k + co; }

// Hand count of the architecture: encoder, downsamplers, bottleneck,
// decoder (upsampled + skip channels in), three heads, optional modules.
std::int64_t expected_parameters(bool mmcf, bool dds) {
  std::int64_t n = 0;
  n += conv_params(16, 4, 3) + conv_params(16, 16, 3);
  n += conv_params(32, 16, 3) + conv_params(32, 32, 3);
  n += conv_params(64, 32, 3) + conv_params(64, 64, 3);
  n += conv_params(16, 16, 3) + conv_params(32, 32, 3) + conv_params(64, 64, 3);
  n += 2 * conv_params(64, 64, 3);
  n += conv_params(64, 64 + 64, 3) + conv_params(64, 64, 3);
  n += conv_params(32, 64 + 32, 3) + conv_params(32, 32, 3);
  n += conv_params(16, 32 + 16, 3) + conv_params(16, 16, 3);
  n += conv_params(3, 16, 1) + conv_params(3, 64, 1) + conv_params(3, 32, 1);
  if (mmcf) n += conv_params(8, 4, 3) + conv_params(8, 8, 3) + conv_params(4, 8, 1) + conv_params(1, 8, 1) + 1;
  if (dds) n += conv_params(64, 1, 1) + conv_params(32, 1, 1) + conv_params(16, 1, 1) + 1;
  return n;
}

struct Interval {
  std::int64_t lo, hi;
};

// Outputs of a 3-wide, padding-1 convolution that read any input in `iv`.
Interval conv_reach(Interval iv, std::int64_t n_in, std::int64_t stride) {
  const std::int64_t n_out = (n_in - 1) / stride + 1;
  auto ceil_div = [](std::int64_t a, std::int64_t b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); };
  return {std::max<std::int64_t>(0, ceil_div(iv.lo - 1, stride)), std::min(n_out - 1, (iv.hi + 1) / stride)};
}

// Outputs of a half-pixel linear resize with a nonzero weight on `iv`.
Interval resize_reach(Interval iv, std::int64_t n_in, std::int64_t n_out) {
  Interval r{n_out, -1};
  for (std::int64_t f = 0; f < n_out; ++f) {
    double s = (f + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    if (s < 0) s = 0;
    const auto lo = std::min<std::int64_t>(static_cast<std::int64_t>(s), n_in - 1);
    const auto hi = std::min(lo + 1, n_in - 1);
    const double frac = s - static_cast<double>(lo);
    const bool hit = (frac < 1.0 && lo >= iv.lo && lo <= iv.hi) || (frac > 0.0 && hi >= iv.lo && hi <= iv.hi);
    if (hit) r = {std::min(r.lo, f), std::max(r.hi, f)};
  }
  return r;
}

Interval join(Interval a, Interval b) { return {std::min(a.lo, b.lo), std::max(a.hi, b.hi)}; }

// Per-axis support of one perturbed input index through the baseline wiring.
Interval baseline_support(std::int64_t at, std::int64_t S) {
  Interval iv{at, at};
  std::array<Interval, 3> skip{};
  std::int64_t n = S;
  for (int i = 0; i < 3; ++i) {
    iv = conv_reach(conv_reach(iv, n, 1), n, 1);
    skip[i] = iv;
    iv = conv_reach(iv, n, 2);
    n /= 2;
  }
  iv = conv_reach(conv_reach(iv, n, 1), n, 1);
  for (int i = 0; i < 3; ++i) {
    iv = join(resize_reach(iv, n, n * 2), skip[2 - i]);
    n *= 2;
    iv = conv_reach(conv_reach(iv, n, 1), n, 1);
  }
  return iv;
}

}  // namespace

TEST_CASE("ablation wiring names and flags") {
  CHECK(variant_name(ablation_config(false, false)) == "baseline");
  CHECK(variant_name(ablation_config(true, false)) == "mmcf_only");
  CHECK(variant_name(ablation_config(false, true)) == "dds_only");
  CHECK(variant_name(ablation_config(true, true)) == "bmds_net");
  CHECK(all_ablation_variants().size() == 4);
  const Model base = make(false, false);
  CHECK_FALSE(base.mmcf.alpha.defined());
  CHECK_FALSE(base.dds.gamma.defined());
  const Model full = make(true, true);
  CHECK(full.mmcf.alpha.item() == 0.0);
  CHECK(full.dds.gamma.item() == 0.1);
}

TEST_CASE("parameter count matches a hand count for every wiring") {
  for (const auto& f : all_ablation_variants()) {
    const Model m = make(f.use_mmcf, f.use_dds);
    CHECK(parameter_count(m.named_parameters()) == expected_parameters(f.use_mmcf, f.use_dds));
  }
  CHECK(expected_parameters(false, false) == 1053385);
}

TEST_CASE("output shapes: main at input size, aux at S/4 and S/2") {
  const Model m = make(true, true);
  Rng rng(1);
  const Tensor x = randn(rng, {1, 4, 16, 16, 16});
  const NetOutput o = forward(m, x);
  CHECK(o.logits_main.shape() == Shape{1, 3, 16, 16, 16});
  CHECK(o.logits_aux[0].shape() == Shape{1, 3, 4, 4, 4});
  CHECK(o.logits_aux[1].shape() == Shape{1, 3, 8, 8, 8});
  REQUIRE(o.d_refined.size() == 3);
  CHECK(o.d_refined[0].dim(1) == 64);
  CHECK(o.d_refined[2].dim(1) == 16);
  CHECK(o.u_map.shape() == Shape{1, 1, 16, 16, 16});
}

TEST_CASE("invalid inputs are rejected") {
  const Model m = make(true, true);
  CHECK_THROWS_AS(forward(m, Tensor({1, 4, 12, 16, 16})), std::invalid_argument);
  CHECK_THROWS_AS(forward(m, Tensor({1, 3, 16, 16, 16})), DimensionError);
}

TEST_CASE("zero-init identity: alpha 0 (and gamma 0) match the plain backbone bit-exactly") {
  const Model base = make(false, false);
  const Model mmcf = make(true, false);
  const Model full = make(true, true, 0.0, 0.0);
  Rng rng(2);
  for (int t = 0; t < 3; ++t) {
    const Tensor x = randn(rng, {1, 4, 8, 8, 8}, 1.5);
    const Tensor ref = forward(base, x).logits_main;
    CHECK(bit_equal(forward(mmcf, x).logits_main, ref));
    CHECK(bit_equal(forward(full, x).logits_main, ref));
    CHECK(bit_equal(forward(full, x).logits_aux[0], forward(base, x).logits_aux[0]));
  }
  // the nonzero default gamma is not an identity
  const Tensor x = randn(rng, {1, 4, 8, 8, 8});
  CHECK_FALSE(bit_equal(forward(make(true, true), x).logits_main, forward(base, x).logits_main));
}

TEST_CASE("dds-only wiring gates on a constant 0.5 map") {
  const Model m = make(false, true);
  Rng rng(3);
  const NetOutput o = forward(m, randn(rng, {1, 4, 8, 8, 8}));
  for (double v : o.m_att.data()) CHECK(v == 0.5);
  CHECK_FALSE(o.u_map.defined());
}

TEST_CASE("initial weights of a layer do not depend on the wiring") {
  const auto a = make(false, false).named_parameters();
  const auto b = make(true, true).named_parameters();
  for (const auto& [name, t] : a) {
    auto it = std::find_if(b.begin(), b.end(), [&](const auto& p) { return p.first == name; });
    REQUIRE(it != b.end());
    CHECK(bit_equal(t, it->second));
  }
}

TEST_CASE("batch independence: a batch of 2 equals two batches of 1") {
  const Model m = make(true, true, 0.4, 0.1);
  Rng rng(4);
  const Tensor a = randn(rng, {1, 4, 8, 8, 8}), b = randn(rng, {1, 4, 8, 8, 8});
  const NetOutput both = forward(m, cat({a, b}, 0));
  const Tensor split = cat({forward(m, a).logits_main, forward(m, b).logits_main}, 0);
  CHECK(bit_equal(both.logits_main, split));
}

TEST_CASE("forward is deterministic") {
  const Model m = make(true, true, 0.2);
  Rng rng(5);
  const Tensor x = randn(rng, {1, 4, 8, 8, 8});
  CHECK(bit_equal(forward(m, x).logits_main, forward(m, x).logits_main));
}

TEST_CASE("receptive field: a voxel perturbation stays inside the analytic support") {
  const std::int64_t S = 64;
  const Interval sup = baseline_support(0, S);
  CHECK(sup.lo == 0);
  CHECK(sup.hi == 60);
  const Model m = make(false, false);
  Rng rng(6);
  NoGradGuard g;
  const Tensor x = randn(rng, {1, 4, S, S, S});
  Tensor y = x.clone();
  y.data()[0] += 5.0;
  const Tensor a = forward(m, x).logits_main, b = forward(m, y).logits_main;
  double outside = 0.0, edge = 0.0;
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < S; ++i)
      for (std::int64_t j = 0; j < S; ++j)
        for (std::int64_t k = 0; k < S; ++k) {
          const auto idx = static_cast<std::size_t>(((c * S + i) * S + j) * S + k);
          const double d = std::abs(a[idx] - b[idx]);
          if (i > sup.hi || j > sup.hi || k > sup.hi) outside = std::max(outside, d);
          if (i == sup.hi || j == sup.hi || k == sup.hi) edge = std::max(edge, d);
        }
  CHECK(outside == 0.0);
  CHECK(edge > 0.0);
}
