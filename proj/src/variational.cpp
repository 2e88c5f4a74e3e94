#include "bmds/variational.hpp"

#include <stdexcept>

namespace bmds {

void VariationalConvParams::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".mu.weight", mu_weight);
  out.emplace_back(prefix + ".mu.bias", mu_bias);
  out.emplace_back(prefix + ".rho.weight", rho_weight);
  out.emplace_back(prefix + ".rho.bias", rho_bias);
}

VariationalConvParams init_bayes_head(const Conv3d& head, double rho_init, double kl_beta) {
  if (!head.weight.defined() || head.weight.ndim() != 5 || head.kernel() != 1) {
    throw DimensionError("init_bayes_head: expected a 1^3 conv head");
  }
  if (!head.bias.defined() || head.bias.ndim() != 1 || head.bias.dim(0) != head.weight.dim(0)) {
    throw DimensionError("init_bayes_head: bias shape does not match head weight");
  }
  VariationalConvParams vp;
  vp.mu_weight = head.weight.detach();
  vp.mu_weight.set_requires_grad(true);
  vp.mu_bias = head.bias.detach();
  vp.mu_bias.set_requires_grad(true);
  vp.rho_weight = Tensor(head.weight.shape(), rho_init, true);
  vp.rho_bias = Tensor(head.bias.shape(), rho_init, true);
  vp.kl_beta = kl_beta;
  return vp;
}

WeightNoise draw_noise(const VariationalConvParams& vp, Rng& rng) {
  WeightNoise n{Tensor(vp.mu_weight.shape()), Tensor(vp.mu_bias.shape())};
  for (auto& v : n.weight.data()) v = rng.normal();
  for (auto& v : n.bias.data()) v = rng.normal();
  return n;
}

SampledWeights sample_weights(const VariationalConvParams& vp, const WeightNoise& noise) {
  if (noise.weight.shape() != vp.mu_weight.shape() || noise.bias.shape() != vp.mu_bias.shape()) {
    throw DimensionError("sample_weights: noise shape does not match posterior");
  }
  return {vp.mu_weight + softplus(vp.rho_weight) * noise.weight,
          vp.mu_bias + softplus(vp.rho_bias) * noise.bias};
}

SampledWeights sample_weights(const VariationalConvParams& vp, Rng& rng) {
  return sample_weights(vp, draw_noise(vp, rng));
}

namespace {

Tensor kl_term(const Tensor& mu, const Tensor& rho) {
  const Tensor sigma = softplus(rho);
  return sum(0.5 * (square(sigma) + square(mu)) - log(sigma) - 0.5);
}

}  // namespace

Tensor kl_to_prior(const VariationalConvParams& vp) {
  return kl_term(vp.mu_weight, vp.rho_weight) + kl_term(vp.mu_bias, vp.rho_bias);
}

}  // namespace bmds
