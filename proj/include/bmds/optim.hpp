#pragma once

#include "bmds/tensor.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace bmds {

struct AdamWOptions {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions options);

  /// One update from the gradients currently stored on the parameters.
  /// Parameters without a gradient are treated as having a zero gradient.
  void step();
  void zero_grad();

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  std::int64_t steps() const { return step_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor> params_;
  AdamWOptions options_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// Cosine decay from `lr0` at epoch 0 to `min_ratio * lr0` at `total_epochs`.
double cosine_lr(double lr0, std::int64_t epoch, std::int64_t total_epochs, double min_ratio = 0.01);

struct GradCheckOptions {
  double h = 1e-5;
  /// Elements checked per parameter tensor; 0 checks every element.
  std::size_t max_elements_per_param = 0;
  std::uint64_t seed = 0;
  /// Replace probes that straddle a non-differentiable point (relu), where a
  /// central difference is meaningless. A probe is a kink when its slope jump
  /// exceeds `kink_tolerance` (relative to the gradient scale) and does not
  /// behave like curvature under halving h. The analytic gradient is never
  /// consulted.
  bool skip_kinks = false;
  double kink_tolerance = 1e-5;
  /// Output: probes replaced because of a kink.
  std::size_t* kinks_skipped = nullptr;
};

/// Norm-wise relative error, maximized over parameter tensors:
/// max_i |analytic_i - central_i| / max(1e-12, max |analytic|, max |central|),
/// i over the probed elements, max |analytic| over the whole tensor.
/// `f` must build a fresh scalar graph on every call. Throws if two
/// evaluations at the same point disagree, or if more than a quarter of
/// the probes of one tensor straddle kinks.
double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                  const GradCheckOptions& options = {});

}  // namespace bmds
