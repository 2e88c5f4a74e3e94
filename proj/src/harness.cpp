#include "bmds/harness.hpp"

#include "bmds/losses.hpp"
#include "bmds/metrics.hpp"
#include "bmds/optim.hpp"
#include "bmds/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace bmds {

namespace {

void emit(const LogFn& log, const std::string& msg) {
  if (log) log(msg);
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

Tensor batch_of(const std::vector<Tensor>& items) {
  std::vector<Tensor> parts;
  parts.reserve(items.size());
  for (const auto& t : items) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    parts.push_back(reshape(t, s));
  }
  return parts.size() == 1 ? parts.front() : cat(parts, 0);
}

Tensor unsqueeze0(const Tensor& t) {
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  return reshape(t, s);
}

using Snapshot = std::vector<std::vector<double>>;

Snapshot snapshot(const NamedParams& named) {
  Snapshot s;
  s.reserve(named.size());
  for (const auto& [name, t] : named) s.emplace_back(t.data().begin(), t.data().end());
  return s;
}

void restore(const NamedParams& named, const Snapshot& s) {
  for (std::size_t i = 0; i < named.size(); ++i) {
    Tensor t = named[i].second;
    std::copy(s[i].begin(), s[i].end(), t.data().begin());
  }
}

std::int64_t resolve_threads(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("BMDS_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return v;
  }
  return std::max<std::int64_t>(1, cfg.threads);
}

// Runs fn(i) for i in [0, n); results are keyed by index so the outcome
// does not depend on scheduling.
void parallel_for(std::size_t n, std::int64_t threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double pop_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

// Dataset ---------------------------------------------------------------

PhantomSpec phantom_spec(const ExperimentConfig& cfg) {
  PhantomSpec s;
  s.size = cfg.data.size;
  s.num_modalities = cfg.data.modalities;
  s.num_regions = cfg.data.regions;
  s.noise_std = cfg.data.noise_std;
  s.informative_channel = cfg.data.informative_channel;
  s.seed = cfg.data.seed < 0 ? cfg.seed : static_cast<std::uint64_t>(cfg.data.seed);
  return s;
}

std::uint64_t split_seed(const ExperimentConfig& cfg) {
  return cfg.data.split_seed < 0 ? cfg.seed : static_cast<std::uint64_t>(cfg.data.split_seed);
}

DatasetFiles generate_dataset_files(const ExperimentConfig& cfg) {
  return {generate(phantom_spec(cfg), cfg.data.n_samples), assign_splits(cfg.data.n_samples, split_seed(cfg))};
}

Dataset make_dataset(const DatasetFiles& files) {
  Dataset d;
  for (std::size_t i = 0; i < files.samples.size(); ++i) {
    const Sample& s = files.samples[i];
    Sample n{znorm(s.volume), s.label, s.id};
    switch (files.splits[i]) {
      case Split::train: d.train.push_back(std::move(n)); break;
      case Split::val: d.val.push_back(std::move(n)); break;
      case Split::test: d.test.push_back(std::move(n)); break;
    }
  }
  return d;
}

Dataset build_dataset(const ExperimentConfig& cfg) { return make_dataset(generate_dataset_files(cfg)); }

ExperimentConfig with_run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  ExperimentConfig c = cfg;
  c.data.seed = static_cast<std::int64_t>(phantom_spec(cfg).seed);
  c.data.split_seed = static_cast<std::int64_t>(split_seed(cfg));
  c.seed = seed;
  return c;
}

ModelConfig model_config(const ExperimentConfig& cfg) {
  ModelConfig m;
  m.modalities = cfg.data.modalities;
  m.regions = cfg.data.regions;
  m.flags = {cfg.model.use_mmcf, cfg.model.use_dds};
  m.alpha_init = cfg.model.alpha_init;
  m.gamma_init = cfg.model.gamma_init;
  m.seed = cfg.seed;
  return m;
}

// Stage 1 ---------------------------------------------------------------

double validation_dice(const Model& model, const std::vector<Sample>& cases, double threshold) {
  if (cases.empty()) throw std::invalid_argument("validation_dice: no cases");
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& c : cases) {
    const Tensor p = sigmoid(forward(model, unsqueeze0(c.volume)).logits_main);
    const std::int64_t R = c.label.dim(0), V = c.label.numel() / R;
    for (std::int64_t r = 0; r < R; ++r) {
      std::vector<std::uint8_t> pm(static_cast<std::size_t>(V)), gm(static_cast<std::size_t>(V));
      for (std::int64_t v = 0; v < V; ++v) {
        pm[v] = p[r * V + v] >= threshold ? 1 : 0;
        gm[v] = c.label[r * V + v] != 0.0 ? 1 : 0;
      }
      total += dice_score(pm, gm);
    }
  }
  return total / static_cast<double>(cases.size() * static_cast<std::size_t>(cases.front().label.dim(0)));
}

Stage1Result train_stage1(const ExperimentConfig& cfg, const Dataset& data, const LogFn& log) {
  if (data.train.empty()) throw std::invalid_argument("train_stage1: empty training split");
  if (data.val.empty()) throw std::invalid_argument("train_stage1: empty validation split");
  const auto& s1 = cfg.stage1;
  Model model = build_model(model_config(cfg));
  const NamedParams named = model.named_parameters();
  AdamW opt(model.trainable_parameters(), {s1.lr, s1.weight_decay, 0.9, 0.999, 1e-8});

  Stage1Result result;
  double best = validation_dice(model, data.val, cfg.eval.threshold);
  std::int64_t best_epoch = 0;
  Snapshot best_params = snapshot(named);
  emit(log, "stage1 epoch 0 val_dice " + fixed(best));

  const std::size_t N = data.train.size();
  const auto B = static_cast<std::size_t>(s1.batch_size);
  for (std::int64_t e = 1; e <= s1.epochs; ++e) {
    const double lr = cosine_lr(s1.lr, e - 1, s1.epochs, s1.lr_min_ratio);
    opt.set_lr(lr);
    const auto order = shuffled(N, derive_seed(cfg.seed, "stage1-order", static_cast<std::uint64_t>(e)));
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, "stage1-sample", static_cast<std::uint64_t>(e));
    double loss_sum = 0.0, seg_sum = 0.0, distill_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t b0 = 0; b0 < N; b0 += B) {
      std::vector<Tensor> xs, ys;
      for (std::size_t k = b0; k < std::min(N, b0 + B); ++k) {
        const std::size_t idx = order[k];
        const std::uint64_t sseed = derive_seed(epoch_seed, "sample", idx);
        Sample s = data.train[idx];
        if (cfg.data.augment) s = augment(s, sseed);
        if (cfg.data.crop < s.volume.dim(1)) s = crop(s, cfg.data.crop, sseed);
        xs.push_back(s.volume);
        ys.push_back(s.label);
      }
      const Tensor x = batch_of(xs), y = batch_of(ys);
      const NetOutput out = forward(model, x);
      const Stage1Loss L = total_loss_stage1(out, y, cfg.losses, cfg.model.use_mmcf);
      const double lv = L.total.item();
      const double dv = L.distill.defined() ? L.distill.item() : 0.0;
      if (!std::isfinite(lv)) {
        throw std::runtime_error("train_stage1: non-finite loss at epoch " + std::to_string(e) + " step " +
                                 std::to_string(steps) + " (main " + fmt6(L.seg.main.item()) + ", aux_deep " +
                                 fmt6(L.seg.aux_deep.item()) + ", aux_shallow " + fmt6(L.seg.aux_shallow.item()) +
                                 ", distill " + fmt6(dv) + ")");
      }
      opt.zero_grad();
      L.total.backward();
      opt.step();
      loss_sum += lv;
      seg_sum += L.seg.total.item();
      distill_sum += dv;
      ++steps;
    }
    EpochRecord rec;
    rec.epoch = e;
    rec.lr = lr;
    rec.loss = loss_sum / static_cast<double>(steps);
    rec.seg = seg_sum / static_cast<double>(steps);
    rec.distill = distill_sum / static_cast<double>(steps);
    if (model.mmcf.alpha.defined()) rec.alpha = model.mmcf.alpha.item();
    if (model.dds.gamma.defined()) rec.gamma = model.dds.gamma.item();
    bool stop = false;
    if (e % s1.val_every == 0 || e == s1.epochs) {
      const double v = validation_dice(model, data.val, cfg.eval.threshold);
      rec.val_dice = v;
      if (v > best) {
        best = v;
        best_epoch = e;
        best_params = snapshot(named);
      }
      stop = s1.target_val_dice > 0.0 && v >= s1.target_val_dice;
    }
    emit(log, "stage1 epoch " + std::to_string(e) + " loss " + fixed(rec.loss) +
                  (rec.val_dice ? " val_dice " + fixed(*rec.val_dice) : std::string()));
    result.history.push_back(rec);
    if (stop) break;
  }
  restore(named, best_params);
  result.meta.config_hash = config_hash(cfg);
  result.meta.epoch = best_epoch;
  result.meta.best_metric = best;
  result.meta.seed = cfg.seed;
  result.meta.flags = model.config.flags;
  result.meta.stage = 1;
  result.final_alpha = model.mmcf.alpha.defined() ? model.mmcf.alpha.item() : 0.0;
  result.model = std::move(model);
  return result;
}

// Stage 2 ---------------------------------------------------------------

Stage2Result finetune_stage2(const ExperimentConfig& cfg, const Model& stage1, const Dataset& data,
                             const LogFn& log) {
  if (data.train.empty()) throw std::invalid_argument("finetune_stage2: empty training split");
  const auto& s2 = cfg.stage2;
  Model model = stage1;
  attach_bayes_head(model, s2.rho_init, s2.kl_beta);

  std::vector<Tensor> features, targets;
  {
    NoGradGuard guard;
    for (const auto& s : data.train) {
      features.push_back(forward_trunk(model, unsqueeze0(s.volume)).d_refined.back());
      targets.push_back(unsqueeze0(s.label));
    }
  }
  if (features.front().dim(1) != model.bayes_head->mu_weight.dim(1)) {
    throw DimensionError("finetune_stage2: head expects " + std::to_string(model.bayes_head->mu_weight.dim(1)) +
                         " feature channels, trunk produced " + std::to_string(features.front().dim(1)));
  }
  AdamW opt(model.bayes_head->parameters(), {s2.lr, s2.weight_decay, 0.9, 0.999, 1e-8});
  Stage2Result result;
  const std::size_t N = features.size();
  const auto B = static_cast<std::size_t>(s2.batch_size);
  for (std::int64_t e = 1; e <= s2.epochs; ++e) {
    const auto order = shuffled(N, derive_seed(cfg.seed, "stage2-order", static_cast<std::uint64_t>(e)));
    Rng rng(derive_seed(cfg.seed, "stage2-noise", static_cast<std::uint64_t>(e)));
    double elbo = 0.0, dterm = 0.0, kl = 0.0;
    std::size_t steps = 0;
    for (std::size_t b0 = 0; b0 < N; b0 += B) {
      std::vector<Tensor> f, t;
      for (std::size_t k = b0; k < std::min(N, b0 + B); ++k) {
        f.push_back(features[order[k]]);
        t.push_back(targets[order[k]]);
      }
      std::vector<WeightNoise> noise;
      for (std::int64_t d = 0; d < s2.T_train; ++d) noise.push_back(draw_noise(*model.bayes_head, rng));
      const Tensor fb = f.size() == 1 ? f.front() : cat(f, 0);
      const Tensor tb = t.size() == 1 ? t.front() : cat(t, 0);
      const ElboTerms terms = elbo_from_features(fb, tb, *model.bayes_head, noise, cfg.losses.dice_smooth);
      if (!std::isfinite(terms.total.item())) {
        throw std::runtime_error("finetune_stage2: non-finite ELBO at epoch " + std::to_string(e) + " (data " +
                                 fmt6(terms.data.item()) + ", kl " + fmt6(terms.kl.item()) + ")");
      }
      opt.zero_grad();
      terms.total.backward();
      opt.step();
      elbo += terms.total.item();
      dterm += terms.data.item();
      kl += terms.kl.item();
      ++steps;
    }
    const double n = static_cast<double>(steps);
    result.history.push_back({e, elbo / n, dterm / n, kl / n});
    emit(log, "stage2 epoch " + std::to_string(e) + " elbo " + fixed(elbo / n) + " data " + fixed(dterm / n) +
                  " kl " + fixed(kl / n, 2));
  }
  result.model = std::move(model);
  return result;
}

// Scenarios -------------------------------------------------------------

std::string Scenario::label() const {
  switch (kind) {
    case Kind::full: return "full";
    case Kind::missing_modality: return "missing_" + std::to_string(modality);
    default: return "noise_" + format_double(noise_std);
  }
}

Scenario parse_scenario(const std::string& text) {
  Scenario s;
  try {
    if (text == "full") return s;
    if (text.rfind("missing:", 0) == 0) {
      s.kind = Scenario::Kind::missing_modality;
      std::size_t used = 0;
      s.modality = std::stoll(text.substr(8), &used);
      if (used != text.size() - 8 || s.modality < 0) throw std::invalid_argument("bad index");
      return s;
    }
    if (text.rfind("noise:", 0) == 0) {
      s.kind = Scenario::Kind::gaussian_noise;
      std::size_t used = 0;
      s.noise_std = std::stod(text.substr(6), &used);
      if (used != text.size() - 6 || !(s.noise_std >= 0.0)) throw std::invalid_argument("bad std");
      return s;
    }
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("unknown scenario '" + text + "' (expected full, missing:<i>, or noise:<std>)");
}

Tensor apply_scenario(const Tensor& volume, const Scenario& s, std::uint64_t seed) {
  Tensor out = volume.detach();
  switch (s.kind) {
    case Scenario::Kind::full: break;
    case Scenario::Kind::missing_modality: {
      if (s.modality >= volume.dim(0)) {
        throw std::invalid_argument("apply_scenario: modality " + std::to_string(s.modality) + " out of range");
      }
      const std::int64_t V = volume.numel() / volume.dim(0);
      auto d = out.data();
      std::fill(d.begin() + s.modality * V, d.begin() + (s.modality + 1) * V, 0.0);
      break;
    }
    case Scenario::Kind::gaussian_noise: {
      if (s.noise_std == 0.0) break;
      Rng rng(derive_seed(seed, "scenario-noise"));
      for (double& v : out.data()) v += rng.normal(0.0, s.noise_std);
      break;
    }
  }
  return out;
}

// Evaluation ------------------------------------------------------------

Predictor model_predictor(const Model& model, int draws, std::uint64_t seed) {
  const int T = model.bayes_head ? draws : 1;
  return [model, T, seed](const Tensor& x, std::size_t case_index) {
    return mc_predict(model, x, T, derive_seed(seed, "eval-mc", case_index));
  };
}

Predictor ensemble_predictor(std::vector<Model> members) {
  if (members.size() < 2) throw std::invalid_argument("ensemble_predictor: need at least 2 members");
  return [members = std::move(members)](const Tensor& x, std::size_t) {
    NoGradGuard guard;
    std::vector<Tensor> probs;
    for (const auto& m : members) probs.push_back(sigmoid(forward(m, x).logits_main));
    return predictive_moments(probs);
  };
}

namespace {

struct CaseEval {
  std::array<double, 3> dice{};
  std::array<std::optional<double>, 3> hd{};
  std::vector<double> prob;
  std::vector<double> var;
  std::vector<std::uint8_t> label;
};

std::optional<double> pooled_auc(const std::vector<double>& var, const std::vector<std::uint8_t>& err) {
  if (var.empty()) return std::nullopt;
  const auto [lo, hi] = std::minmax_element(var.begin(), var.end());
  if (*lo == *hi) return std::nullopt;
  const auto n_err = std::count(err.begin(), err.end(), 1);
  if (n_err == 0 || n_err == static_cast<std::ptrdiff_t>(err.size())) return std::nullopt;
  return uncertainty_error_auc(var, err);
}

MetricReport summarize(const std::string& scenario, const std::string& region, const std::vector<CaseEval>& cases,
                       const std::vector<int>& regions, std::int64_t V, const ExperimentConfig& cfg) {
  MetricReport r;
  r.scenario = scenario;
  r.region = region;
  r.n_cases = static_cast<std::int64_t>(cases.size());
  std::vector<double> dice, hd;
  std::vector<double> prob, var;
  std::vector<std::uint8_t> label, err;
  for (const auto& c : cases) {
    double d = 0.0;
    for (int reg : regions) {
      d += c.dice[reg];
      if (c.hd[reg]) hd.push_back(*c.hd[reg]);
      else ++r.hd95_undefined;
      for (std::int64_t v = reg * V; v < (reg + 1) * V; ++v) {
        prob.push_back(c.prob[v]);
        var.push_back(c.var[v]);
        label.push_back(c.label[v]);
        err.push_back(((c.prob[v] >= cfg.eval.threshold) != (c.label[v] != 0)) ? 1 : 0);
      }
    }
    dice.push_back(d / static_cast<double>(regions.size()));
  }
  r.dice_mean = mean_of(dice);
  r.dice_std = pop_std(dice);
  if (!hd.empty()) {
    r.hd95_mean = mean_of(hd);
    r.hd95_std = pop_std(hd);
  }
  r.ece = ece(prob, label, static_cast<int>(cfg.eval.ece_bins));
  r.nll = nll(prob, label);
  r.unc_auc = pooled_auc(var, err);
  return r;
}

}  // namespace

std::vector<MetricReport> evaluate(const Predictor& predict, const std::vector<Sample>& cases,
                                   const std::vector<Scenario>& scenarios, const ExperimentConfig& cfg) {
  if (cases.empty()) throw std::invalid_argument("evaluate: no test cases");
  const std::int64_t threads = resolve_threads(cfg);
  std::vector<MetricReport> rows;
  for (const auto& sc : scenarios) {
    const std::string label = sc.label();
    std::vector<CaseEval> evals(cases.size());
    const std::int64_t R = cases.front().label.dim(0);
    if (R != 3) throw DimensionError("evaluate: expected 3 label regions");
    const std::int64_t V = cases.front().label.numel() / R;
    parallel_for(cases.size(), threads, [&](std::size_t ci) {
      NoGradGuard guard;
      const Sample& c = cases[ci];
      const Tensor x = apply_scenario(c.volume, sc, derive_seed(cfg.seed, "scenario:" + label, ci));
      const PredictiveOutput p = predict(unsqueeze0(x), ci);
      if (p.mean_prob.numel() != c.label.numel()) throw DimensionError("evaluate: prediction size mismatch");
      CaseEval& ev = evals[ci];
      ev.prob.assign(p.mean_prob.data().begin(), p.mean_prob.data().end());
      ev.var.assign(p.variance.data().begin(), p.variance.data().end());
      ev.label.resize(static_cast<std::size_t>(R * V));
      for (std::int64_t i = 0; i < R * V; ++i) ev.label[i] = c.label[i] != 0.0 ? 1 : 0;
      const std::array<std::int64_t, 3> dims{c.label.dim(1), c.label.dim(2), c.label.dim(3)};
      for (std::int64_t r = 0; r < R; ++r) {
        const Mask3 pm = threshold_mask(std::span<const double>(ev.prob).subspan(r * V, V), dims, cfg.eval.threshold);
        const Mask3 gm(dims, std::vector<std::uint8_t>(ev.label.begin() + r * V, ev.label.begin() + (r + 1) * V));
        ev.dice[r] = dice_score(pm, gm);
        ev.hd[r] = hd95(pm, gm);
      }
    });
    for (int r = 0; r < 3; ++r) rows.push_back(summarize(label, kRegionNames[r], evals, {r}, V, cfg));
    rows.push_back(summarize(label, "all", evals, {0, 1, 2}, V, cfg));
  }
  return rows;
}

std::vector<MetricReport> evaluate(const Model& model, const std::vector<Sample>& cases,
                                   const std::vector<Scenario>& scenarios, const ExperimentConfig& cfg) {
  return evaluate(model_predictor(model, static_cast<int>(cfg.stage2.T_infer), cfg.seed), cases, scenarios, cfg);
}

const std::vector<std::string>& report_header() {
  static const std::vector<std::string> h{"scenario", "region", "dice_mean", "dice_std", "hd95_mean",
                                          "hd95_std", "ece",    "nll",       "unc_auc",  "n_cases"};
  return h;
}

std::string report_text(const std::vector<MetricReport>& rows) {
  if (rows.empty()) throw std::invalid_argument("write_report: no rows");
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({r.scenario, r.region, fmt6(r.dice_mean), fmt6(r.dice_std), fmt6(r.hd95_mean), fmt6(r.hd95_std),
                     fmt6(r.ece), fmt6(r.nll), fmt6(r.unc_auc), std::to_string(r.n_cases)});
  }
  return csv_text(report_header(), cells);
}

void write_report(const std::vector<MetricReport>& rows, const std::string& path) {
  write_file(path, report_text(rows));
}

double mean_dice(const std::vector<MetricReport>& rows, const std::string& scenario) {
  for (const auto& r : rows) {
    if (r.scenario == scenario && r.region == "all") return r.dice_mean;
  }
  throw std::invalid_argument("mean_dice: no 'all' row for scenario '" + scenario + "'");
}

// Experiments -----------------------------------------------------------

SweepResult sensitivity_sweep(const ExperimentConfig& cfg, const std::vector<double>& alpha_values,
                              const Dataset& data, const LogFn& log) {
  if (alpha_values.empty()) throw std::invalid_argument("sensitivity_sweep: no alpha values");
  SweepResult out;
  out.seeds = cfg.harness.seeds;
  out.alpha_values.push_back(0.0);
  for (double a : alpha_values) {
    if (a != 0.0) out.alpha_values.push_back(a);
  }
  for (double a : out.alpha_values) {
    for (std::int64_t k = 0; k < cfg.harness.seeds; ++k) {
      ExperimentConfig c = with_run_seed(cfg, cfg.seed + static_cast<std::uint64_t>(k));
      c.model.alpha_init = a;
      emit(log, "sweep alpha_init " + format_double(a) + " seed " + std::to_string(c.seed));
      const Stage1Result r = train_stage1(c, data, log);
      if (!std::isfinite(r.final_alpha)) throw std::runtime_error("sensitivity_sweep: learned alpha is not finite");
      out.runs.push_back({a, c.seed, r.meta.best_metric, r.final_alpha});
    }
  }
  return out;
}

void write_sweep(const SweepResult& r, const std::string& path) {
  std::vector<std::string> header{"alpha_init", "val_dice_mean", "val_dice_std"};
  for (std::int64_t k = 0; k < r.seeds; ++k) header.push_back("val_dice_seed" + std::to_string(k));
  for (std::int64_t k = 0; k < r.seeds; ++k) header.push_back("final_alpha_seed" + std::to_string(k));
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < r.alpha_values.size(); ++i) {
    std::vector<double> dice, alpha;
    for (std::int64_t k = 0; k < r.seeds; ++k) {
      const SweepRun& run = r.runs[i * static_cast<std::size_t>(r.seeds) + static_cast<std::size_t>(k)];
      dice.push_back(run.val_dice);
      alpha.push_back(run.final_alpha);
    }
    std::vector<std::string> row{fmt6(r.alpha_values[i]), fmt6(mean_of(dice)), fmt6(pop_std(dice))};
    for (double d : dice) row.push_back(fmt6(d));
    for (double a : alpha) row.push_back(fmt6(a));
    rows.push_back(std::move(row));
  }
  write_csv(path, header, rows);
}

std::vector<EnsembleRow> ensemble_eval(const ExperimentConfig& cfg, std::int64_t n_models, const Dataset& data,
                                       bool same_seed, const LogFn& log) {
  if (n_models < 2) throw std::invalid_argument("ensemble_eval: n_models must be >= 2");
  std::vector<Model> members;
  for (std::int64_t k = 0; k < n_models; ++k) {
    const ExperimentConfig c = with_run_seed(cfg, same_seed ? cfg.seed : cfg.seed + static_cast<std::uint64_t>(k));
    emit(log, "ensemble member " + std::to_string(k) + " seed " + std::to_string(c.seed));
    members.push_back(train_stage1(c, data, log).model);
  }
  const Model bayes = finetune_stage2(cfg, members.front(), data, log).model;
  const std::vector<Scenario> sc{parse_scenario(cfg.harness.calibration_scenario)};
  const std::string label = sc.front().label();
  const double e1 = static_cast<double>(std::max<std::int64_t>(1, cfg.stage1.epochs));

  auto row = [&](const std::string& method, double cost, const Predictor& p) {
    const auto rows = evaluate(p, data.test, sc, cfg);
    const MetricReport& all = rows.back();
    return EnsembleRow{method, cost, all.ece, all.nll, all.dice_mean, all.unc_auc};
  };
  std::vector<EnsembleRow> out;
  out.push_back(row("deterministic", 1.0, model_predictor(members.front(), 1, cfg.seed)));
  out.push_back(row("deep_ensemble", static_cast<double>(n_models), ensemble_predictor(members)));
  out.push_back(row("bayesian", 1.0 + static_cast<double>(cfg.stage2.epochs) / e1,
                    model_predictor(bayes, static_cast<int>(cfg.stage2.T_infer), cfg.seed)));
  return out;
}

void write_ensemble(const std::vector<EnsembleRow>& rows, const std::string& path) {
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({r.method, fmt6(r.training_cost), fmt6(r.ece), fmt6(r.nll), fmt6(r.dice), fmt6(r.unc_auc)});
  }
  write_csv(path, {"method", "training_cost", "ece", "nll", "dice_mean", "unc_auc"}, cells);
}

std::vector<AblationRow> ablation(const ExperimentConfig& cfg, const Dataset& data, const LogFn& log) {
  std::vector<AblationRow> out;
  const std::vector<Scenario> sc{Scenario{}};
  for (const auto& flags : all_ablation_variants()) {
    ExperimentConfig c = cfg;
    c.model.use_mmcf = flags.use_mmcf;
    c.model.use_dds = flags.use_dds;
    emit(log, "ablation variant " + variant_name(flags));
    const Stage1Result r = train_stage1(c, data, log);
    const auto rows = evaluate(r.model, data.test, sc, c);
    AblationRow a;
    a.flags = flags;
    for (int k = 0; k < 3; ++k) {
      a.dice[k] = rows[k].dice_mean;
      a.hd95[k] = rows[k].hd95_mean;
    }
    a.dice_mean = rows[3].dice_mean;
    a.val_dice = r.meta.best_metric;
    a.parameters = parameter_count(r.model.named_parameters());
    out.push_back(a);
  }
  return out;
}

void write_ablation(const std::vector<AblationRow>& rows, const std::string& path) {
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({variant_name(r.flags), r.flags.use_mmcf ? "1" : "0", r.flags.use_dds ? "1" : "0",
                     fmt6(r.dice[0]), fmt6(r.dice[1]), fmt6(r.dice[2]), fmt6(r.dice_mean), fmt6(r.hd95[0]),
                     fmt6(r.hd95[1]), fmt6(r.hd95[2]), fmt6(r.val_dice), std::to_string(r.parameters)});
  }
  write_csv(path,
            {"variant", "use_mmcf", "use_dds", "dice_wt", "dice_tc", "dice_et", "dice_mean", "hd95_wt", "hd95_tc",
             "hd95_et", "val_dice", "parameters"},
            cells);
}

std::vector<RobustnessRun> robustness(const ExperimentConfig& cfg, const std::vector<WiringFlags>& variants,
                                      const Dataset& data, const LogFn& log) {
  std::vector<Scenario> sc;
  for (const auto& s : cfg.eval.robustness_scenarios) sc.push_back(parse_scenario(s));
  std::vector<RobustnessRun> out;
  for (const auto& flags : variants) {
    for (std::int64_t k = 0; k < cfg.harness.seeds; ++k) {
      ExperimentConfig c = with_run_seed(cfg, cfg.seed + static_cast<std::uint64_t>(k));
      c.model.use_mmcf = flags.use_mmcf;
      c.model.use_dds = flags.use_dds;
      emit(log, "robustness " + variant_name(flags) + " seed " + std::to_string(c.seed));
      const Stage1Result r = train_stage1(c, data, log);
      out.push_back({variant_name(flags), c.seed, evaluate(r.model, data.test, sc, c)});
    }
  }
  return out;
}

void write_robustness_summary(const std::vector<RobustnessRun>& runs, const std::string& path) {
  std::vector<std::vector<std::string>> cells;
  for (const auto& run : runs) {
    for (const auto& r : run.rows) {
      if (r.region != "all") continue;
      cells.push_back({run.variant, std::to_string(run.seed), r.scenario, fmt6(r.dice_mean), fmt6(r.dice_std)});
    }
  }
  write_csv(path, {"variant", "seed", "scenario", "dice_mean", "dice_std"}, cells);
}

void write_stage1_log(const std::vector<EpochRecord>& history, const std::string& path) {
  std::vector<std::vector<std::string>> cells;
  for (const auto& h : history) {
    cells.push_back({std::to_string(h.epoch), fmt6(h.lr), fmt6(h.loss), fmt6(h.seg), fmt6(h.distill),
                     fmt6(h.val_dice), fmt6(h.alpha), fmt6(h.gamma)});
  }
  write_csv(path, {"epoch", "lr", "loss", "seg", "distill", "val_dice", "alpha", "gamma"}, cells);
}

void write_stage2_log(const std::vector<Stage2Record>& history, const std::string& path) {
  std::vector<std::vector<std::string>> cells;
  for (const auto& h : history) cells.push_back({std::to_string(h.epoch), fmt6(h.elbo), fmt6(h.data), fmt6(h.kl)});
  write_csv(path, {"epoch", "elbo", "data", "kl"}, cells);
}

}  // namespace bmds
