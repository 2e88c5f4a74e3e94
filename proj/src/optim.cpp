#include "bmds/optim.hpp"

#include "bmds/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace bmds {

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void AdamW::step() {
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto data = p.data();
    const bool has_grad = p.has_grad();
    auto grad = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      data[i] -= options_.lr * options_.weight_decay * data[i];
      data[i] -= options_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double cosine_lr(double lr0, std::int64_t epoch, std::int64_t total_epochs, double min_ratio) {
  if (total_epochs <= 0) return lr0;
  const double lr_min = min_ratio * lr0;
  const double t = std::clamp(static_cast<double>(epoch) / static_cast<double>(total_epochs), 0.0, 1.0);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                  const GradCheckOptions& options) {
  for (auto& p : params) {
    if (!p.requires_grad()) throw std::invalid_argument("grad_check: parameter does not require grad");
    p.zero_grad();
  }
  const Tensor loss = f();
  if (loss.numel() != 1) throw DimensionError("grad_check: f must be scalar-valued");
  const double f0 = loss.item();
  loss.backward();
  {
    NoGradGuard guard;
    const double again = f().item();
    if (again != f0) {
      throw std::runtime_error("grad_check: f is not deterministic (" + std::to_string(f0) +
                               " vs " + std::to_string(again) + ")");
    }
  }

  Rng rng(derive_seed(options.seed, "grad_check"));
  double worst = 0.0;
  NoGradGuard guard;
  for (auto& p : params) {
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                     : std::vector<double>(static_cast<std::size_t>(p.numel()), 0.0);
    std::vector<std::size_t> idx(static_cast<std::size_t>(p.numel()));
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i + 1 < idx.size(); ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    const std::size_t wanted = options.max_elements_per_param > 0
                                   ? std::min(idx.size(), options.max_elements_per_param)
                                   : idx.size();
    double scale = 0.0;
    for (double g : analytic) scale = std::max(scale, std::abs(g));
    auto data = p.data();
    double diff = 0.0;
    std::size_t probed = 0, kinks = 0;
    // Central difference and slope jump |f(x+h) - 2 f(x) + f(x-h)| / h.
    auto probe = [&](std::size_t i, double h) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = f().item();
      data[i] = orig - h;
      const double fm = f().item();
      data[i] = orig;
      return std::pair{(fp - fm) / (2.0 * h), std::abs(fp - 2.0 * f0 + fm) / h};
    };
    for (std::size_t k = 0; k < idx.size() && probed < wanted; ++k) {
      const std::size_t i = idx[k];
      const auto [numeric, jump] = probe(i, options.h);
      if (options.skip_kinks) {
        // Smooth: the jump is curvature * h, so it halves with h and the
        // central difference is stable. A kink within h breaks one of the two.
        const double tol = options.kink_tolerance * std::max({1e-12, scale, std::abs(numeric)});
        if (jump > tol) {
          const auto [numeric_half, jump_half] = probe(i, options.h / 2.0);
          if (std::abs(numeric - numeric_half) > tol || std::abs(jump_half - jump / 2.0) > tol) {
            ++kinks;
            continue;
          }
        }
      }
      ++probed;
      diff = std::max(diff, std::abs(analytic[i] - numeric));
      scale = std::max(scale, std::abs(numeric));
    }
    if (options.kinks_skipped) *options.kinks_skipped += kinks;
    if (4 * kinks > wanted) {
      throw std::runtime_error("grad_check: " + std::to_string(kinks) + " of " + std::to_string(wanted) +
                               " probes straddle kinks");
    }
    worst = std::max(worst, diff / std::max(1e-12, scale));
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

}  // namespace bmds
