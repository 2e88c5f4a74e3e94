#pragma once

#include "bmds/losses.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bmds {

struct DataConfig {
  std::int64_t size = 32;
  std::int64_t modalities = 4;
  std::int64_t regions = 3;
  std::int64_t n_samples = 50;
  std::int64_t informative_channel = 3;
  double noise_std = 0.25;
  std::int64_t seed = -1;        // -1: use the global seed
  std::int64_t split_seed = -1;  // -1: use the global seed
  std::int64_t crop = 24;
  bool augment = true;
};

struct ModelFlagsConfig {
  bool use_mmcf = true;
  bool use_dds = true;
  double alpha_init = 0.0;
  double gamma_init = 0.1;
};

struct Stage1Config {
  std::int64_t epochs = 200;
  double lr = 1e-3;
  double lr_min_ratio = 0.01;
  double weight_decay = 1e-4;
  std::int64_t batch_size = 2;
  std::int64_t val_every = 5;
  double target_val_dice = 0.0;  // > 0: stop at the first validation reaching it
};

struct Stage2Config {
  std::int64_t epochs = 30;
  double lr = 1e-4;
  double weight_decay = 0.0;
  double kl_beta = 1e-5;
  double rho_init = -5.0;
  std::int64_t batch_size = 2;
  std::int64_t T_train = 1;
  std::int64_t T_infer = 20;
};

struct EvalConfig {
  std::vector<std::string> scenarios{"full"};
  std::vector<std::string> robustness_scenarios{"full",      "missing:0", "missing:1",
                                                "missing:2", "missing:3", "noise:0.1"};
  std::int64_t ece_bins = 10;
  double threshold = 0.5;
};

struct HarnessConfig {
  std::int64_t seeds = 3;
  std::vector<double> sweep_alpha{0.5, 1.0, 1.5, 2.0};
  std::int64_t ensemble_models = 3;
  std::string calibration_scenario = "full";
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::int64_t threads = 1;
  DataConfig data;
  ModelFlagsConfig model;
  Stage1Config stage1;
  LossWeights losses;
  Stage2Config stage2;
  EvalConfig eval;
  HarnessConfig harness;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A validation failure attributed to one key.
class ConstraintError : public ConfigError {
 public:
  ConstraintError(std::string key, const std::string& what)
      : ConfigError("constraint violated for '" + key + "': " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// `key = value` lines, `#` comments. Errors name the key and line.
ExperimentConfig parse_config_text(const std::string& text, const std::string& source = "<string>");
ExperimentConfig parse_config(const std::string& path);

/// Applies one assignment; throws ConfigError for unknown keys or bad values.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Throws ConfigError on the first violated constraint.
void validate_config(const ExperimentConfig& cfg);

/// Every key with its current value and a one-line description.
std::string dump_config(const ExperimentConfig& cfg);
std::vector<std::string> config_keys();

/// Hash of the keys that determine data and model shape. Checkpoints carry it.
std::uint64_t config_hash(const ExperimentConfig& cfg);

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

}  // namespace bmds
