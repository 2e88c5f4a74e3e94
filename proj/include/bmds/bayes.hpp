#pragma once

#include "bmds/backbone.hpp"
#include "bmds/rng.hpp"
#include "bmds/variational.hpp"

#include <cstdint>
#include <vector>

namespace bmds {

/// Swaps the deterministic main head for a variational one initialized at it.
void attach_bayes_head(Model& model, double rho_init, double kl_beta);

struct ElboTerms {
  Tensor total;
  Tensor data;  // DiceCE averaged over the weight draws
  Tensor kl;
};

/// DiceCE under sampled output weights plus kl_beta * KL, with the trunk
/// features given (the trunk is frozen during fine-tuning). One draw per
/// entry of `noise`.
ElboTerms elbo_from_features(const Tensor& features, const Tensor& target,
                             const VariationalConvParams& vp, const std::vector<WeightNoise>& noise,
                             double dice_smooth = 1e-5);

/// Full-model ELBO with `draws` fresh samples from the stream `seed`.
ElboTerms elbo_loss(const Model& model, const Tensor& x, const Tensor& target,
                    std::uint64_t seed, int draws = 1, double dice_smooth = 1e-5);

struct PredictiveOutput {
  Tensor mean_prob;  // mean of per-draw sigmoid probabilities
  Tensor variance;   // population variance over draws
  int samples_used = 0;
};

/// Mean and population variance (divisor T) of a set of probability maps.
PredictiveOutput predictive_moments(const std::vector<Tensor>& probs);

/// Monte-Carlo prediction: draw t uses the stream derive_seed(seed, "mc", t),
/// so the result does not depend on evaluation order. A deterministic
/// model returns its point prediction with zero variance.
PredictiveOutput mc_predict(const Model& model, const Tensor& x, int draws, std::uint64_t seed);

/// Same, from precomputed finest-decoder features.
PredictiveOutput mc_predict_features(const Model& model, const Tensor& features, int draws,
                                     std::uint64_t seed);

}  // namespace bmds
