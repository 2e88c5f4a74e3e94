#include "bmds/bayes.hpp"

#include "bmds/losses.hpp"

#include <stdexcept>

namespace bmds {

void attach_bayes_head(Model& model, double rho_init, double kl_beta) {
  model.bayes_head = init_bayes_head(model.backbone.main_head, rho_init, kl_beta);
}

ElboTerms elbo_from_features(const Tensor& features, const Tensor& target,
                             const VariationalConvParams& vp, const std::vector<WeightNoise>& noise,
                             double dice_smooth) {
  if (noise.empty()) throw std::invalid_argument("elbo: at least one weight draw is required");
  Tensor data;
  for (const auto& eps : noise) {
    const auto w = sample_weights(vp, eps);
    const Tensor term = dice_ce(apply_head(features, w.weight, w.bias), target, dice_smooth);
    data = data.defined() ? data + term : term;
  }
  if (noise.size() > 1) data = data * (1.0 / static_cast<double>(noise.size()));
  ElboTerms t;
  t.data = data;
  t.kl = kl_to_prior(vp);
  t.total = data + vp.kl_beta * t.kl;
  return t;
}

ElboTerms elbo_loss(const Model& model, const Tensor& x, const Tensor& target, std::uint64_t seed,
                    int draws, double dice_smooth) {
  if (!model.bayes_head) throw std::logic_error("elbo_loss: model has no Bayesian head");
  if (draws < 1) throw std::invalid_argument("elbo_loss: draws must be >= 1");
  Tensor features;
  {
    NoGradGuard guard;
    features = forward_trunk(model, x).d_refined.back();
  }
  std::vector<WeightNoise> noise;
  for (int t = 0; t < draws; ++t) {
    Rng rng(derive_seed(seed, "elbo", static_cast<std::uint64_t>(t)));
    noise.push_back(draw_noise(*model.bayes_head, rng));
  }
  return elbo_from_features(features, target, *model.bayes_head, noise, dice_smooth);
}

PredictiveOutput predictive_moments(const std::vector<Tensor>& probs) {
  if (probs.empty()) throw std::invalid_argument("predictive_moments: no samples");
  const Shape& shape = probs.front().shape();
  const auto n = static_cast<std::size_t>(numel_of(shape));
  const double T = static_cast<double>(probs.size());
  // Mean accumulated as offsets from the first draw: identical draws give
  // exactly that draw back, hence exactly zero variance.
  const Tensor& first = probs.front();
  std::vector<double> m(n, 0.0), v(n, 0.0);
  for (const auto& p : probs) {
    if (p.shape() != shape) throw DimensionError("predictive_moments: sample shapes differ");
    for (std::size_t i = 0; i < n; ++i) m[i] += p[i] - first[i];
  }
  for (std::size_t i = 0; i < n; ++i) m[i] = first[i] + m[i] / T;
  for (const auto& p : probs) {
    for (std::size_t i = 0; i < n; ++i) {
      const double d = p[i] - m[i];
      v[i] += d * d;
    }
  }
  for (auto& e : v) e /= T;
  return {Tensor(shape, std::move(m)), Tensor(shape, std::move(v)), static_cast<int>(probs.size())};
}

PredictiveOutput mc_predict_features(const Model& model, const Tensor& features, int draws,
                                     std::uint64_t seed) {
  if (draws < 1) throw std::invalid_argument("mc_predict: T must be >= 1");
  NoGradGuard guard;
  if (!model.bayes_head) {
    const Tensor p = sigmoid(model.backbone.main_head(features));
    return {p, Tensor(p.shape(), 0.0), draws};
  }
  std::vector<Tensor> probs;
  probs.reserve(static_cast<std::size_t>(draws));
  for (int t = 0; t < draws; ++t) {
    Rng rng(derive_seed(seed, "mc", static_cast<std::uint64_t>(t)));
    const auto w = sample_weights(*model.bayes_head, rng);
    probs.push_back(sigmoid(apply_head(features, w.weight, w.bias)));
  }
  return predictive_moments(probs);
}

PredictiveOutput mc_predict(const Model& model, const Tensor& x, int draws, std::uint64_t seed) {
  if (draws < 1) throw std::invalid_argument("mc_predict: T must be >= 1");
  Tensor features;
  {
    NoGradGuard guard;
    features = forward_trunk(model, x).d_refined.back();
  }
  return mc_predict_features(model, features, draws, seed);
}

}  // namespace bmds
