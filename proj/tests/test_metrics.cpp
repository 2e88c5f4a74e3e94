#include "bmds/metrics.hpp"
#include "metric_oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace bmds;

namespace {

Mask3 single(std::array<std::int64_t, 3> dims, std::array<std::int64_t, 3> at) {
  Mask3 m(dims);
  m.voxels[static_cast<std::size_t>(m.index(at[0], at[1], at[2]))] = 1;
  return m;
}

}  // namespace

TEST_CASE("dice_score: conventions and the half-overlap example") {
  Mask3 g({2, 2, 2}, std::vector<std::uint8_t>(8, 1));
  Mask3 p({2, 2, 2}, {1, 1, 1, 1, 0, 0, 0, 0});
  CHECK(dice_score(g, g) == 1.0);
  CHECK(dice_score(p, g) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  Mask3 q({2, 2, 2}, {0, 0, 0, 0, 1, 1, 1, 1});
  CHECK(dice_score(p, q) == 0.0);
  CHECK(dice_score(Mask3({2, 2, 2}), Mask3({2, 2, 2})) == 1.0);
  CHECK_THROWS(dice_score(Mask3({2, 2, 2}), Mask3({2, 2, 1})));
}

TEST_CASE("dice_score: brute-force oracle, symmetry and permutation invariance") {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto dims = oracle::random_dims(rng);
    const Mask3 a = oracle::random_mask(rng, dims, rng.uniform(0.0, 0.6));
    const Mask3 b = oracle::random_mask(rng, dims, rng.uniform(0.0, 0.6));
    CHECK(dice_score(a, b) == oracle::dice(a, b));
    CHECK(dice_score(a, b) == dice_score(b, a));
    Mask3 ra = a, rb = b;
    std::reverse(ra.voxels.begin(), ra.voxels.end());
    std::reverse(rb.voxels.begin(), rb.voxels.end());
    CHECK(dice_score(ra, rb) == dice_score(a, b));
  }
}

TEST_CASE("threshold_mask: p >= threshold is foreground") {
  const std::vector<double> p{0.1, 0.5, 0.49999, 0.9};
  const Mask3 m = threshold_mask(p, {1, 2, 2});
  CHECK(m.voxels == std::vector<std::uint8_t>{0, 1, 0, 1});
}

TEST_CASE("boundary_voxels: six-connected surface") {
  Mask3 cube({5, 5, 5});
  for (int i = 1; i < 4; ++i)
    for (int j = 1; j < 4; ++j)
      for (int k = 1; k < 4; ++k) cube.voxels[static_cast<std::size_t>(cube.index(i, j, k))] = 1;
  CHECK(boundary_voxels(cube).size() == 26);  // 27 minus the hidden centre
  CHECK(boundary_voxels(Mask3({2, 2, 2}, std::vector<std::uint8_t>(8, 1))).size() == 8);
  Rng rng(2);
  for (int t = 0; t < 30; ++t) {
    const Mask3 m = oracle::random_mask(rng, oracle::random_dims(rng), 0.6);
    CHECK(boundary_voxels(m) == oracle::boundary(m));
  }
}

TEST_CASE("squared_distance_transform: exact against brute force") {
  Rng rng(3);
  for (int t = 0; t < 30; ++t) {
    const auto dims = oracle::random_dims(rng);
    const Mask3 m = oracle::random_mask(rng, dims, 0.1);
    if (m.empty()) continue;
    const auto dt = squared_distance_transform(m);
    for (std::int64_t i = 0; i < dims[0]; ++i)
      for (std::int64_t j = 0; j < dims[1]; ++j)
        for (std::int64_t k = 0; k < dims[2]; ++k) {
          double best = INFINITY;
          for (std::int64_t a = 0; a < dims[0]; ++a)
            for (std::int64_t b = 0; b < dims[1]; ++b)
              for (std::int64_t c = 0; c < dims[2]; ++c)
                if (m.at(a, b, c))
                  best = std::min(best, static_cast<double>((i - a) * (i - a) + (j - b) * (j - b) + (k - c) * (k - c)));
          CHECK(dt[static_cast<std::size_t>(m.index(i, j, k))] == best);
        }
  }
}

TEST_CASE("nearest_rank_index: ceil(q n / 100) - 1") {
  CHECK(nearest_rank_index(1, 95) == 0);
  CHECK(nearest_rank_index(20, 95) == 18);
  CHECK(nearest_rank_index(21, 95) == 19);
  CHECK(nearest_rank_index(100, 95) == 94);
  CHECK_THROWS(nearest_rank_index(0, 95));
}

TEST_CASE("hd95: examples and conventions") {
  Rng rng(4);
  const Mask3 m = oracle::random_mask(rng, {6, 6, 6}, 0.4);
  CHECK(hd95(m, m) == 0.0);
  CHECK(*hd95(single({8, 8, 8}, {0, 0, 0}), single({8, 8, 8}, {3, 4, 0})) == 5.0);
  CHECK(*hd95(Mask3({3, 3, 3}), Mask3({3, 3, 3})) == 0.0);
  CHECK_FALSE(hd95(m, Mask3({6, 6, 6})).has_value());
  CHECK_FALSE(hd95(Mask3({6, 6, 6}), m).has_value());
}

TEST_CASE("hd95: exhaustive oracle, symmetry and translation invariance") {
  Rng rng(5);
  for (int t = 0; t < 60; ++t) {
    const auto dims = oracle::random_dims(rng);
    const Mask3 a = oracle::random_mask(rng, dims, rng.uniform(0.0, 0.5));
    const Mask3 b = oracle::random_mask(rng, dims, rng.uniform(0.0, 0.5));
    const auto got = hd95(a, b), want = oracle::hd95(a, b);
    REQUIRE(got.has_value() == want.has_value());
    if (got) CHECK(*got == *want);
    CHECK(hd95(a, b) == hd95(b, a));
  }
  // shift two interior masks by the same offset inside a larger grid
  const Mask3 a = oracle::random_mask(rng, {4, 4, 4}, 0.5), b = oracle::random_mask(rng, {4, 4, 4}, 0.5);
  auto embed = [](const Mask3& m, std::int64_t off) {
    Mask3 big({10, 10, 10});
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = 0; j < 4; ++j)
        for (std::int64_t k = 0; k < 4; ++k)
          big.voxels[static_cast<std::size_t>(big.index(i + off, j + off, k + off))] = m.at(i, j, k);
    return big;
  };
  CHECK(hd95(embed(a, 1), embed(b, 1)) == hd95(embed(a, 5), embed(b, 5)));
}

TEST_CASE("ece: examples") {
  const std::vector<double> ones(10, 1.0);
  const std::vector<std::uint8_t> all1(10, 1);
  CHECK(ece(ones, all1) == 0.0);

  std::vector<double> p9(10, 0.9);
  std::vector<std::uint8_t> ninety(10, 1);
  ninety[3] = 0;
  CHECK(ece(p9, ninety, 1) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(std::abs(ece(p9, ninety, 1)) < 1e-15);
  CHECK(ece(p9, all1, 1) == doctest::Approx(0.1).epsilon(1e-14));
  // p = 0.1 predicts background with confidence 0.9
  const std::vector<double> p1(10, 0.1);
  CHECK(ece(p1, std::vector<std::uint8_t>(10, 0), 1) == doctest::Approx(0.1).epsilon(1e-14));
  CHECK_THROWS(ece(p9, all1, 0));
  CHECK_THROWS(ece(std::vector<double>{1.5}, std::vector<std::uint8_t>{1}));
}

TEST_CASE("ece: binned reference on random data") {
  Rng rng(6);
  std::vector<double> p(2000);
  std::vector<std::uint8_t> y(2000);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = rng.uniform();
    y[i] = rng.bernoulli(p[i]) ? 1 : 0;
  }
  const int B = 10;
  std::vector<double> n(B), acc(B), conf(B);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double c = std::max(p[i], 1 - p[i]);
    const bool correct = (p[i] >= 0.5) == (y[i] == 1);
    int b = static_cast<int>((c - 0.5) / 0.5 * B);
    b = std::min(b, B - 1);
    n[static_cast<std::size_t>(b)] += 1;
    acc[static_cast<std::size_t>(b)] += correct;
    conf[static_cast<std::size_t>(b)] += c;
  }
  double want = 0;
  for (int b = 0; b < B; ++b)
    if (n[static_cast<std::size_t>(b)] > 0)
      want += std::abs(acc[static_cast<std::size_t>(b)] - conf[static_cast<std::size_t>(b)]) / static_cast<double>(p.size());
  CHECK(ece(p, y, B) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("nll: examples and scalar oracle") {
  const std::vector<std::uint8_t> y{1, 0, 1, 1};
  const std::vector<double> sure{1 - 1e-7, 1e-7, 1 - 1e-7, 1 - 1e-7};
  CHECK(nll(sure, y) == doctest::Approx(1e-7).epsilon(1e-6));
  CHECK(nll(std::vector<double>(4, 0.5), y) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  CHECK(std::isfinite(nll(std::vector<double>{0.0, 1.0}, std::vector<std::uint8_t>{1, 0})));
  Rng rng(7);
  std::vector<double> p(500);
  std::vector<std::uint8_t> lab(500);
  double want = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = rng.uniform(0.01, 0.99);
    lab[i] = rng.bernoulli(0.5);
    want += -(lab[i] ? std::log(p[i]) : std::log(1 - p[i]));
  }
  CHECK(std::abs(nll(p, lab) - want / 500) < 1e-12);
}

TEST_CASE("uncertainty_error_auc: examples, degenerate input and the pairwise oracle") {
  const std::vector<std::uint8_t> err{1, 0, 1, 0, 0};
  CHECK(uncertainty_error_auc(std::vector<double>{0.9, 0.1, 0.8, 0.2, 0.3}, err) == 1.0);
  CHECK(uncertainty_error_auc(std::vector<double>(5, 0.4), err) == 0.5);
  CHECK_THROWS(uncertainty_error_auc(std::vector<double>(3, 0.1), std::vector<std::uint8_t>(3, 1)));
  CHECK_THROWS(uncertainty_error_auc(std::vector<double>(3, 0.1), std::vector<std::uint8_t>(3, 0)));
  Rng rng(8);
  for (int t = 0; t < 5; ++t) {
    std::vector<double> s(1000);
    std::vector<std::uint8_t> e(1000);
    for (std::size_t i = 0; i < s.size(); ++i) {
      // coarse scores force many ties
      s[i] = std::floor(rng.uniform() * 20) / 20;
      e[i] = rng.bernoulli(0.2 + 0.5 * s[i]);
    }
    CHECK(std::abs(uncertainty_error_auc(s, e) - oracle::auc(s, e)) < 1e-12);
  }
}
