#pragma once

#include "bmds/layers.hpp"
#include "bmds/rng.hpp"
#include "bmds/tensor.hpp"

namespace bmds {

/// Mean-field Gaussian posterior over a 1^3 conv output layer.
/// sigma = softplus(rho); the prior is N(0, 1) on every weight and bias.
struct VariationalConvParams {
  Tensor mu_weight;   // [Co, Ci, 1, 1, 1]
  Tensor mu_bias;     // [Co]
  Tensor rho_weight;  // same shape as mu_weight
  Tensor rho_bias;    // same shape as mu_bias
  double kl_beta = 1e-5;

  std::vector<Tensor> parameters() const { return {mu_weight, mu_bias, rho_weight, rho_bias}; }
  void collect(const std::string& prefix, NamedParams& out) const;
};

inline constexpr double kDefaultRhoInit = -5.0;

/// mu copied from the deterministic head, rho filled with `rho_init`.
VariationalConvParams init_bayes_head(const Conv3d& deterministic_head, double rho_init,
                                      double kl_beta);

/// Standard-normal draws with the same shapes as (weight, bias).
struct WeightNoise {
  Tensor weight;
  Tensor bias;
};

WeightNoise draw_noise(const VariationalConvParams& vp, Rng& rng);

struct SampledWeights {
  Tensor weight;
  Tensor bias;
};

/// W = mu + softplus(rho) (.) eps, differentiable in (mu, rho) with eps fixed.
SampledWeights sample_weights(const VariationalConvParams& vp, const WeightNoise& noise);
SampledWeights sample_weights(const VariationalConvParams& vp, Rng& rng);

/// KL(q || N(0, 1)) summed over all weights and biases:
/// sum of -log sigma + (sigma^2 + mu^2) / 2 - 1/2.
Tensor kl_to_prior(const VariationalConvParams& vp);

}  // namespace bmds
