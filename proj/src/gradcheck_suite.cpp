#include "bmds/gradcheck_suite.hpp"

#include "bmds/bayes.hpp"
#include "bmds/losses.hpp"
#include "bmds/optim.hpp"
#include "bmds/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace bmds {

namespace {

// Values in [lo, hi) with a random sign when `signed_values`.
Tensor random_tensor(Rng& rng, const Shape& shape, double lo, double hi, bool signed_values, bool rg = true) {
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) {
    x = rng.uniform(lo, hi);
    if (signed_values && rng.bernoulli(0.5)) x = -x;
  }
  return Tensor(shape, std::move(v), rg);
}

Tensor normal_tensor(Rng& rng, const Shape& shape, double sd, bool rg = true) {
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor(shape, std::move(v), rg);
}

Tensor binary_tensor(Rng& rng, const Shape& shape) {
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = rng.bernoulli(0.4) ? 1.0 : 0.0;
  return Tensor(shape, std::move(v));
}

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : seed_(seed) {}

  Rng rng(const std::string& name) { return Rng(derive_seed(seed_, name)); }

  void check(const std::string& name, const std::function<Tensor()>& f, const std::vector<Tensor>& params,
             std::size_t max_elements = 0, bool skip_kinks = false) {
    GradCheckOptions opt;
    opt.skip_kinks = skip_kinks;
    opt.h = 1e-5;
    opt.max_elements_per_param = max_elements;
    opt.seed = derive_seed(seed_, name);
    GradCheckEntry e;
    e.name = name;
    opt.kinks_skipped = &e.kinks_skipped;
    e.max_rel_error = grad_check(f, params, opt);
    for (const auto& p : params) {
      const auto n = static_cast<std::size_t>(p.numel());
      e.elements += max_elements > 0 ? std::min(n, max_elements) : n;
    }
    out_.push_back(e);
  }

  // sum(op(x) * w) with a fixed random weighting so every output element
  // contributes a distinct amount.
  void weighted(const std::string& name, const std::function<Tensor()>& op, const std::vector<Tensor>& params) {
    Tensor probe;
    {
      NoGradGuard g;
      probe = op();
    }
    Rng r = rng(name + "/w");
    const Tensor w = random_tensor(r, probe.shape(), 0.5, 1.5, true, false);
    check(name, [op, w] { return sum(op() * w); }, params);
  }

  std::vector<GradCheckEntry> take() { return std::move(out_); }

 private:
  std::uint64_t seed_;
  std::vector<GradCheckEntry> out_;
};

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed) {
  Suite s(seed);
  const Shape small{2, 3, 2, 2, 2};

  {
    Rng r = s.rng("binary");
    const Tensor a = random_tensor(r, small, 0.2, 1.5, true);
    const Tensor b = random_tensor(r, small, 0.5, 1.5, true);
    const Tensor c = random_tensor(r, {1}, 0.5, 1.5, true);
    s.weighted("add", [=] { return a + b; }, {a, b});
    s.weighted("sub", [=] { return a - b; }, {a, b});
    s.weighted("mul", [=] { return a * b; }, {a, b});
    s.weighted("div", [=] { return a / b; }, {a, b});
    s.weighted("add_broadcast", [=] { return a + c; }, {a, c});
    s.weighted("mul_broadcast", [=] { return c * a; }, {a, c});
    s.weighted("div_broadcast", [=] { return a / c; }, {a, c});
    s.weighted("scalar_mul", [=] { return a * 1.7; }, {a});
    s.weighted("add_scalar", [=] { return a + 0.3; }, {a});
    s.weighted("neg", [=] { return -a; }, {a});
  }
  {
    Rng r = s.rng("unary");
    const Tensor x = random_tensor(r, small, 0.1, 2.0, true);
    const Tensor pos = random_tensor(r, small, 0.3, 2.0, false);
    s.weighted("sigmoid", [=] { return sigmoid(x); }, {x});
    s.weighted("relu", [=] { return relu(x); }, {x});
    s.weighted("softplus", [=] { return softplus(x * 3.0); }, {x});
    s.weighted("exp", [=] { return exp(x); }, {x});
    s.weighted("log", [=] { return log(pos); }, {pos});
    s.weighted("square", [=] { return square(x); }, {x});
    s.weighted("sqrt", [=] { return sqrt(pos); }, {pos});
  }
  {
    Rng r = s.rng("reduce");
    const Tensor x = normal_tensor(r, small, 1.0);
    s.check("sum", [=] { return sum(x) * 0.7; }, {x});
    s.check("mean", [=] { return mean(square(x)); }, {x});
    s.weighted("sum_axes", [=] { return sum(x, {0, 2}); }, {x});
    s.weighted("mean_axes", [=] { return mean(x, {1}); }, {x});
    s.weighted("var_axes", [=] { return var(x, {2, 3, 4}); }, {x});
  }
  {
    Rng r = s.rng("channel");
    const Tensor x = normal_tensor(r, {2, 3, 3, 3, 3}, 1.0);
    s.weighted("channel_l2_norm", [=] { return channel_l2_norm(x); }, {x});
    s.weighted("channel_mean", [=] { return channel_mean(x); }, {x});
    s.weighted("channel_softmax", [=] { return channel_softmax(x); }, {x});
    s.weighted("minmax_normalize", [=] { return minmax_normalize(x, 1e-6); }, {x});
    s.weighted("reshape", [=] { return reshape(x, {6, 27}); }, {x});
    const Tensor y = normal_tensor(r, {2, 2, 3, 3, 3}, 1.0);
    s.weighted("cat", [=] { return cat({x, y}, 1); }, {x, y});
    s.weighted("slice_batch", [=] { return slice_batch(x, 1, 2); }, {x});
  }
  {
    Rng r = s.rng("conv");
    const Tensor x = normal_tensor(r, {2, 2, 4, 4, 4}, 1.0);
    const Tensor w3 = normal_tensor(r, {3, 2, 3, 3, 3}, 0.3);
    const Tensor w1 = normal_tensor(r, {3, 2, 1, 1, 1}, 0.5);
    const Tensor b = normal_tensor(r, {3}, 0.5);
    s.weighted("conv3d_k3_s1_p1", [=] { return conv3d(x, w3, b, 1, 1); }, {x, w3, b});
    s.weighted("conv3d_k3_s2_p1", [=] { return conv3d(x, w3, b, 2, 1); }, {x, w3, b});
    s.weighted("conv3d_k3_s1_p0", [=] { return conv3d(x, w3, Tensor(), 1, 0); }, {x, w3});
    s.weighted("conv3d_k1", [=] { return conv3d(x, w1, b, 1, 0); }, {x, w1, b});
  }
  {
    Rng r = s.rng("interp");
    const Tensor x = normal_tensor(r, {1, 2, 3, 3, 3}, 1.0);
    s.weighted("interp3d_trilinear_up", [=] { return interp3d(x, {4, 5, 6}, InterpMode::trilinear); }, {x});
    s.weighted("interp3d_trilinear_down", [=] { return interp3d(x, {2, 2, 2}, InterpMode::trilinear); }, {x});
    s.weighted("interp3d_nearest", [=] { return interp3d(x, {6, 4, 3}, InterpMode::nearest); }, {x});
  }
  {
    Rng r = s.rng("losses");
    const Tensor logits = normal_tensor(r, {2, 3, 4, 4, 4}, 1.5);
    const Tensor target = binary_tensor(r, {2, 3, 4, 4, 4});
    s.check("dice_ce", [=] { return dice_ce(logits, target); }, {logits});
    const Tensor d0 = normal_tensor(r, {1, 4, 2, 2, 2}, 1.0);
    const Tensor d1 = normal_tensor(r, {1, 3, 4, 4, 4}, 1.0);
    const Tensor att = random_tensor(r, {1, 4, 4, 4, 4}, 0.05, 0.95, false);
    s.check("distill_loss", [=] { return distill_loss({d0, d1}, att); }, {d0, d1, att});
  }
  {
    Rng r = s.rng("variational");
    VariationalConvParams vp;
    vp.mu_weight = normal_tensor(r, {3, 4, 1, 1, 1}, 0.5);
    vp.mu_bias = normal_tensor(r, {3}, 0.5);
    vp.rho_weight = random_tensor(r, {3, 4, 1, 1, 1}, -3.0, 1.0, false);
    vp.rho_bias = random_tensor(r, {3}, -3.0, 1.0, false);
    vp.kl_beta = 0.05;
    s.check("kl_to_prior", [=] { return kl_to_prior(vp); }, vp.parameters());
    const Tensor feats = normal_tensor(r, {1, 4, 3, 3, 3}, 1.0, false);
    const Tensor target = binary_tensor(r, {1, 3, 3, 3, 3});
    std::vector<WeightNoise> noise;
    for (int t = 0; t < 2; ++t) noise.push_back(draw_noise(vp, r));
    s.check("elbo", [=] { return elbo_from_features(feats, target, vp, noise).total; }, vp.parameters());
  }
  {
    Rng r = s.rng("fusion");
    MmcfState m = make_mmcf(4, seed, 0.6);
    const Tensor x = normal_tensor(r, {1, 4, 4, 4, 4}, 1.0);
    NamedParams np;
    m.collect(np);
    std::vector<Tensor> params{x};
    for (auto& [n, t] : np) params.push_back(t);
    s.weighted("mmcf_forward", [=] { return mmcf_forward(m, x).x_fused; }, params);
    DdsState d = make_dds({3}, seed, 0.4);
    const Tensor feat = normal_tensor(r, {1, 3, 2, 2, 2}, 1.0);
    const Tensor att = random_tensor(r, {1, 4, 4, 4, 4}, 0.05, 0.95, false);
    NamedParams dp;
    d.collect(dp);
    std::vector<Tensor> dparams{feat, att};
    for (auto& [n, t] : dp) dparams.push_back(t);
    s.weighted("dds_gate", [=] { return dds_gate(d, feat, att, 0); }, dparams);
  }
  for (double alpha : {0.0, 0.5}) {
    ModelConfig mc;
    mc.alpha_init = alpha;
    mc.seed = seed;
    const Model model = build_model(mc);
    Rng r = s.rng("composite");
    const Tensor x = normal_tensor(r, {1, 4, 8, 8, 8}, 1.0, false);
    const Tensor y = binary_tensor(r, {1, 3, 8, 8, 8});
    const LossWeights w;
    auto f = [=] { return total_loss_stage1(forward(model, x), y, w, true).total; };
    const std::string tag = "stage1_total_loss(alpha=" + std::string(alpha == 0.0 ? "0" : "0.5") + ")";
    // The network contains relu, so probes that straddle a kink are replaced.
    s.check(tag + "[alpha,gamma]", f, {model.mmcf.alpha, model.dds.gamma}, 0, true);
    s.check(tag + "[sampled]", f, model.trainable_parameters(), 4, true);
  }
  return s.take();
}

}  // namespace bmds
