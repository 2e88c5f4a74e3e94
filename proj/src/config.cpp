#include "bmds/config.hpp"

#include "bmds/rng.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace bmds {

namespace {

struct Entry {
  std::string key;
  std::string doc;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto t = trim(s);
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size()) throw std::invalid_argument("expected a number, got '" + s + "'");
  return v;
}

std::int64_t parse_int(const std::string& s) {
  std::int64_t v = 0;
  const auto t = trim(s);
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size()) throw std::invalid_argument("expected an integer, got '" + s + "'");
  return v;
}

std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto t = trim(s);
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size()) throw std::invalid_argument("expected an unsigned integer, got '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  const auto t = trim(s);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

std::string to_str(double v) { return format_double(v); }
std::string to_str(std::int64_t v) { return std::to_string(v); }
std::string to_str(std::uint64_t v) { return std::to_string(v); }
std::string to_str(bool v) { return v ? "true" : "false"; }
std::string to_str(const std::string& v) { return v; }
std::string to_str(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}
std::string to_str(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

void from_str(const std::string& s, double& v) { v = parse_double(s); }
void from_str(const std::string& s, std::int64_t& v) { v = parse_int(s); }
void from_str(const std::string& s, std::uint64_t& v) { v = parse_uint(s); }
void from_str(const std::string& s, bool& v) { v = parse_bool(s); }
void from_str(const std::string& s, std::string& v) { v = trim(s); }
void from_str(const std::string& s, std::vector<std::string>& v) { v = split_list(s); }
void from_str(const std::string& s, std::vector<double>& v) {
  v.clear();
  for (const auto& item : split_list(s)) v.push_back(parse_double(item));
}

template <class Access>
Entry field(std::string key, std::string doc, Access access) {
  return Entry{std::move(key), std::move(doc),
               [access](const ExperimentConfig& c) { return to_str(access(const_cast<ExperimentConfig&>(c))); },
               [access](ExperimentConfig& c, const std::string& s) { from_str(s, access(c)); }};
}

#define BMDS_FIELD(key, member, doc) \
  field(key, doc, [](ExperimentConfig& c) -> auto& { return c.member; })

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      BMDS_FIELD("seed", seed, "global seed; every RNG stream derives from it"),
      BMDS_FIELD("threads", threads, "worker threads for per-case evaluation (BMDS_THREADS overrides)"),
      BMDS_FIELD("data.size", data.size, "phantom edge length in voxels (multiple of 8)"),
      BMDS_FIELD("data.modalities", data.modalities, "input channels"),
      BMDS_FIELD("data.regions", data.regions, "nested label regions (must be 3)"),
      BMDS_FIELD("data.n_samples", data.n_samples, "phantoms generated before the 80/15/5 split"),
      BMDS_FIELD("data.informative_channel", data.informative_channel, "only channel with outer-region contrast"),
      BMDS_FIELD("data.noise_std", data.noise_std, "Gaussian noise added to raw intensities"),
      BMDS_FIELD("data.seed", data.seed, "phantom seed, -1 = global seed"),
      BMDS_FIELD("data.split_seed", data.split_seed, "split permutation seed, -1 = global seed"),
      BMDS_FIELD("data.crop", data.crop, "training crop edge (multiple of 8, <= data.size)"),
      BMDS_FIELD("data.augment", data.augment, "random flips and quarter turns during stage 1"),
      BMDS_FIELD("model.use_mmcf", model.use_mmcf, "input attention fusion"),
      BMDS_FIELD("model.use_dds", model.use_dds, "decoder attention gating"),
      BMDS_FIELD("model.alpha_init", model.alpha_init, "initial fusion residual scale"),
      BMDS_FIELD("model.gamma_init", model.gamma_init, "initial decoder gate scale"),
      BMDS_FIELD("stage1.epochs", stage1.epochs, "deterministic training epochs"),
      BMDS_FIELD("stage1.lr", stage1.lr, "AdamW learning rate at epoch 0"),
      BMDS_FIELD("stage1.lr_min_ratio", stage1.lr_min_ratio, "cosine floor as a fraction of stage1.lr"),
      BMDS_FIELD("stage1.weight_decay", stage1.weight_decay, "decoupled weight decay"),
      BMDS_FIELD("stage1.batch_size", stage1.batch_size, "crops per optimizer step"),
      BMDS_FIELD("stage1.val_every", stage1.val_every, "epochs between validation passes"),
      BMDS_FIELD("stage1.target_val_dice", stage1.target_val_dice, "stop once validation Dice reaches this, 0 = off"),
      BMDS_FIELD("losses.lambda1", losses.lambda1, "deeper auxiliary head weight"),
      BMDS_FIELD("losses.lambda2", losses.lambda2, "shallower auxiliary head weight"),
      BMDS_FIELD("losses.distill_weight", losses.distill_weight, "attention distillation weight"),
      BMDS_FIELD("losses.dice_smooth", losses.dice_smooth, "soft Dice smoothing"),
      BMDS_FIELD("losses.norm_eps", losses.norm_eps, "min-max normalization guard"),
      BMDS_FIELD("stage2.epochs", stage2.epochs, "Bayesian head fine-tuning epochs"),
      BMDS_FIELD("stage2.lr", stage2.lr, "fine-tuning learning rate (< stage1.lr)"),
      BMDS_FIELD("stage2.weight_decay", stage2.weight_decay, "decoupled weight decay on mu and rho"),
      BMDS_FIELD("stage2.kl_beta", stage2.kl_beta, "KL weight in the ELBO"),
      BMDS_FIELD("stage2.rho_init", stage2.rho_init, "initial rho, sigma = softplus(rho)"),
      BMDS_FIELD("stage2.batch_size", stage2.batch_size, "volumes per fine-tuning step"),
      BMDS_FIELD("stage2.T_train", stage2.T_train, "weight draws per training step"),
      BMDS_FIELD("stage2.T_infer", stage2.T_infer, "weight draws at inference"),
      BMDS_FIELD("eval.scenarios", eval.scenarios, "scenarios for eval: full, missing:<i>, noise:<std>"),
      BMDS_FIELD("eval.robustness_scenarios", eval.robustness_scenarios, "scenarios for robustness"),
      BMDS_FIELD("eval.ece_bins", eval.ece_bins, "calibration bins over confidence [0.5, 1]"),
      BMDS_FIELD("eval.threshold", eval.threshold, "probability threshold for masks"),
      BMDS_FIELD("harness.seeds", harness.seeds, "runs per sweep/robustness cell, seeds seed..seed+n-1"),
      BMDS_FIELD("harness.sweep_alpha", harness.sweep_alpha, "alpha_init values besides 0"),
      BMDS_FIELD("harness.ensemble_models", harness.ensemble_models, "deep ensemble size"),
      BMDS_FIELD("harness.calibration_scenario", harness.calibration_scenario, "test perturbation for the ensemble comparison"),
  };
  return entries;
}

#undef BMDS_FIELD

const Entry* find_entry(const std::string& key) {
  for (const auto& e : registry()) {
    if (e.key == key) return &e;
  }
  return nullptr;
}

bool valid_scenario_text(const std::string& s, std::int64_t modalities) {
  if (s == "full") return true;
  try {
    if (s.rfind("missing:", 0) == 0) {
      const auto m = parse_int(s.substr(8));
      return m >= 0 && m < modalities;
    }
    if (s.rfind("noise:", 0) == 0) return parse_double(s.substr(6)) >= 0.0;
  } catch (const std::invalid_argument&) {
    return false;
  }
  return false;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const Entry* e = find_entry(key);
  if (!e) throw ConfigError("unknown key '" + key + "'");
  try {
    e->set(cfg, value);
  } catch (const std::invalid_argument& ex) {
    throw ConfigError("key '" + key + "': " + ex.what());
  }
}

void validate_config(const ExperimentConfig& c) {
  auto require = [](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConstraintError(key, what);
  };
  require(c.threads >= 1, "threads", "must be >= 1");
  require(c.data.size >= 8 && c.data.size % 8 == 0, "data.size", "must be a positive multiple of 8");
  require(c.data.modalities >= 3, "data.modalities", "must be >= 3");
  require(c.data.regions == 3, "data.regions", "must be 3");
  require(c.data.n_samples >= 3, "data.n_samples", "must be >= 3");
  require(c.data.informative_channel >= 0 && c.data.informative_channel < c.data.modalities,
          "data.informative_channel", "must index a modality");
  require(c.data.noise_std >= 0.0, "data.noise_std", "must be >= 0");
  require(c.data.seed >= -1, "data.seed", "must be >= -1");
  require(c.data.split_seed >= -1, "data.split_seed", "must be >= -1");
  require(c.data.crop >= 8 && c.data.crop % 8 == 0 && c.data.crop <= c.data.size, "data.crop",
          "must be a multiple of 8 no larger than data.size");
  require(c.stage1.epochs >= 0, "stage1.epochs", "must be >= 0");
  require(c.stage1.lr > 0.0, "stage1.lr", "must be > 0");
  require(c.stage1.lr_min_ratio >= 0.0 && c.stage1.lr_min_ratio <= 1.0, "stage1.lr_min_ratio", "must be in [0, 1]");
  require(c.stage1.weight_decay >= 0.0, "stage1.weight_decay", "must be >= 0");
  require(c.stage1.batch_size >= 1, "stage1.batch_size", "must be >= 1");
  require(c.stage1.val_every >= 1, "stage1.val_every", "must be >= 1");
  require(c.stage1.target_val_dice >= 0.0 && c.stage1.target_val_dice <= 1.0, "stage1.target_val_dice",
          "must be in [0, 1]");
  require(c.losses.lambda1 >= 0.0, "losses.lambda1", "must be >= 0");
  require(c.losses.lambda2 >= 0.0, "losses.lambda2", "must be >= 0");
  require(c.losses.distill_weight >= 0.0, "losses.distill_weight", "must be >= 0");
  require(c.losses.dice_smooth > 0.0, "losses.dice_smooth", "must be > 0");
  require(c.losses.norm_eps > 0.0, "losses.norm_eps", "must be > 0");
  require(c.stage2.epochs >= 0, "stage2.epochs", "must be >= 0");
  require(c.stage2.lr >= 0.0, "stage2.lr", "must be >= 0");
  require(c.stage2.lr < c.stage1.lr, "stage2.lr", "must be smaller than stage1.lr");
  require(c.stage2.weight_decay >= 0.0, "stage2.weight_decay", "must be >= 0");
  require(c.stage2.kl_beta >= 0.0, "stage2.kl_beta", "must be >= 0");
  require(c.stage2.batch_size >= 1, "stage2.batch_size", "must be >= 1");
  require(c.stage2.T_train >= 1, "stage2.T_train", "must be >= 1");
  require(c.stage2.T_infer >= 1, "stage2.T_infer", "must be >= 1");
  require(!c.eval.scenarios.empty(), "eval.scenarios", "must list at least one scenario");
  for (const auto& s : c.eval.scenarios) require(valid_scenario_text(s, c.data.modalities), "eval.scenarios", "bad scenario '" + s + "'");
  for (const auto& s : c.eval.robustness_scenarios) {
    require(valid_scenario_text(s, c.data.modalities), "eval.robustness_scenarios", "bad scenario '" + s + "'");
  }
  require(valid_scenario_text(c.harness.calibration_scenario, c.data.modalities), "harness.calibration_scenario", "bad scenario");
  require(c.eval.ece_bins >= 1, "eval.ece_bins", "must be >= 1");
  require(c.eval.threshold > 0.0 && c.eval.threshold < 1.0, "eval.threshold", "must be in (0, 1)");
  require(c.harness.seeds >= 1, "harness.seeds", "must be >= 1");
  require(!c.harness.sweep_alpha.empty(), "harness.sweep_alpha", "must be nonempty");
  require(c.harness.ensemble_models >= 2, "harness.ensemble_models", "must be >= 2");
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& source) {
  ExperimentConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  std::map<std::string, int> line_of;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    try {
      set_config_value(cfg, key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
    line_of[key] = lineno;
  }
  try {
    validate_config(cfg);
  } catch (const ConstraintError& e) {
    const auto it = line_of.find(e.key());
    if (it == line_of.end()) throw ConfigError(source + ": " + e.what() + " (default value)");
    throw ConfigError(source + ":" + std::to_string(it->second) + ": " + e.what());
  }
  return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

std::string dump_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& e : registry()) {
    const auto dot = e.key.find('.');
    const std::string s = dot == std::string::npos ? "" : e.key.substr(0, dot);
    if (s != section) {
      out += "\n";
      section = s;
    }
    out += "# " + e.doc + "\n" + e.key + " = " + e.get(cfg) + "\n";
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& e : registry()) keys.push_back(e.key);
  return keys;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  std::string canon;
  for (const auto& e : registry()) {
    if (e.key == "seed" || e.key.rfind("data.", 0) == 0 || e.key.rfind("model.", 0) == 0) {
      canon += e.key + "=" + e.get(cfg) + "\n";
    }
  }
  return fnv1a64(canon);
}

}  // namespace bmds
