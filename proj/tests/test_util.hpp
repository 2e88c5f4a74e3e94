#pragma once

#include "bmds/rng.hpp"
#include "bmds/tensor.hpp"

#include <cmath>
#include <vector>

namespace bmds::test {

inline Tensor randn(Rng& rng, const Shape& shape, double sd = 1.0, bool requires_grad = false) {
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor(shape, std::move(v), requires_grad);
}

inline Tensor randu(Rng& rng, const Shape& shape, double lo, double hi, bool requires_grad = false) {
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v), requires_grad);
}

inline Tensor randbin(Rng& rng, const Shape& shape, double p = 0.5) {
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = rng.bernoulli(p) ? 1.0 : 0.0;
  return Tensor(shape, std::move(v));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

inline double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace bmds::test
