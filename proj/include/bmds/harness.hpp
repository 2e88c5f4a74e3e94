#pragma once

#include "bmds/bayes.hpp"
#include "bmds/config.hpp"
#include "bmds/datagen.hpp"
#include "bmds/io.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace bmds {

using LogFn = std::function<void(const std::string&)>;

inline constexpr std::array<const char*, 3> kRegionNames{"wt", "tc", "et"};

// Dataset ---------------------------------------------------------------

/// Samples carry z-scored volumes.
struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

PhantomSpec phantom_spec(const ExperimentConfig& cfg);
std::uint64_t split_seed(const ExperimentConfig& cfg);
DatasetFiles generate_dataset_files(const ExperimentConfig& cfg);
Dataset make_dataset(const DatasetFiles& files);
Dataset build_dataset(const ExperimentConfig& cfg);

/// Copy of `cfg` with a new global seed and the data seeds pinned to the
/// ones `cfg` resolves to, so runs over seeds share one dataset.
ExperimentConfig with_run_seed(const ExperimentConfig& cfg, std::uint64_t seed);

ModelConfig model_config(const ExperimentConfig& cfg);

// Stage 1 ---------------------------------------------------------------

struct EpochRecord {
  std::int64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double seg = 0.0;
  double distill = 0.0;
  std::optional<double> val_dice;
  std::optional<double> alpha;
  std::optional<double> gamma;
};

struct Stage1Result {
  Model model;  // best-validation parameters
  CheckpointMeta meta;
  std::vector<EpochRecord> history;
  double final_alpha = 0.0;  // alpha of the selected parameters (0 without MMCF)
};

/// Mean over cases and regions of the thresholded full-volume Dice.
double validation_dice(const Model& model, const std::vector<Sample>& cases, double threshold = 0.5);

Stage1Result train_stage1(const ExperimentConfig& cfg, const Dataset& data, const LogFn& log = {});

// Stage 2 ---------------------------------------------------------------

struct Stage2Record {
  std::int64_t epoch = 0;
  double elbo = 0.0;
  double data = 0.0;
  double kl = 0.0;
};

struct Stage2Result {
  Model model;
  std::vector<Stage2Record> history;
};

/// Attaches a Bayesian head to a copy of `stage1` and fits it with the
/// trunk frozen. The parameters of `stage1` are not modified.
Stage2Result finetune_stage2(const ExperimentConfig& cfg, const Model& stage1, const Dataset& data,
                             const LogFn& log = {});

// Scenarios -------------------------------------------------------------

struct Scenario {
  enum class Kind { full, missing_modality, gaussian_noise };
  Kind kind = Kind::full;
  std::int64_t modality = 0;
  double noise_std = 0.0;

  std::string label() const;
};

Scenario parse_scenario(const std::string& text);

/// Zero-fills a channel or adds seeded N(0, s^2) noise to every channel.
Tensor apply_scenario(const Tensor& volume, const Scenario& s, std::uint64_t seed);

// Evaluation ------------------------------------------------------------

/// Maps a [1, M, S, S, S] volume to probabilities and variance [1, R, S, S, S].
/// `case_index` selects the RNG stream of stochastic predictors.
using Predictor = std::function<PredictiveOutput(const Tensor& x, std::size_t case_index)>;

/// mc_predict with T draws for Bayesian heads, one point prediction otherwise.
Predictor model_predictor(const Model& model, int draws, std::uint64_t seed);
/// Mean of member probabilities with across-member population variance.
Predictor ensemble_predictor(std::vector<Model> members);

struct MetricReport {
  std::string scenario;
  std::string region;  // wt, tc, et, all
  double dice_mean = 0.0;
  double dice_std = 0.0;
  std::optional<double> hd95_mean;
  std::optional<double> hd95_std;
  double ece = 0.0;
  double nll = 0.0;
  std::optional<double> unc_auc;  // absent when the variance map is constant or errors are degenerate
  std::int64_t n_cases = 0;
  std::int64_t hd95_undefined = 0;
};

std::vector<MetricReport> evaluate(const Predictor& predict, const std::vector<Sample>& cases,
                                   const std::vector<Scenario>& scenarios, const ExperimentConfig& cfg);
std::vector<MetricReport> evaluate(const Model& model, const std::vector<Sample>& cases,
                                   const std::vector<Scenario>& scenarios, const ExperimentConfig& cfg);

void write_report(const std::vector<MetricReport>& rows, const std::string& path);
std::string report_text(const std::vector<MetricReport>& rows);
const std::vector<std::string>& report_header();

// Experiments -----------------------------------------------------------

struct SweepRun {
  double alpha_init = 0.0;
  std::uint64_t seed = 0;
  double val_dice = 0.0;
  double final_alpha = 0.0;
};

struct SweepResult {
  std::vector<double> alpha_values;  // 0 first, then the requested values
  std::vector<SweepRun> runs;        // alpha-major, seed-minor
  std::int64_t seeds = 0;
};

SweepResult sensitivity_sweep(const ExperimentConfig& cfg, const std::vector<double>& alpha_values,
                              const Dataset& data, const LogFn& log = {});
void write_sweep(const SweepResult& r, const std::string& path);

struct EnsembleRow {
  std::string method;
  double training_cost = 0.0;  // in single stage-1 trainings, by epoch count
  double ece = 0.0;
  double nll = 0.0;
  double dice = 0.0;
  std::optional<double> unc_auc;
};

/// Deterministic (member 0), Deep Ensemble, Bayesian (member 0 fine-tuned).
/// Members use seeds cfg.seed + k, or cfg.seed for all when `same_seed`.
std::vector<EnsembleRow> ensemble_eval(const ExperimentConfig& cfg, std::int64_t n_models,
                                       const Dataset& data, bool same_seed = false, const LogFn& log = {});
void write_ensemble(const std::vector<EnsembleRow>& rows, const std::string& path);

struct AblationRow {
  WiringFlags flags;
  std::array<double, 3> dice{};
  double dice_mean = 0.0;
  std::array<std::optional<double>, 3> hd95;
  double val_dice = 0.0;
  std::int64_t parameters = 0;
};

std::vector<AblationRow> ablation(const ExperimentConfig& cfg, const Dataset& data, const LogFn& log = {});
void write_ablation(const std::vector<AblationRow>& rows, const std::string& path);

struct RobustnessRun {
  std::string variant;
  std::uint64_t seed = 0;
  std::vector<MetricReport> rows;
};

/// Trains one model per (variant, seed) and evaluates every robustness scenario.
std::vector<RobustnessRun> robustness(const ExperimentConfig& cfg, const std::vector<WiringFlags>& variants,
                                      const Dataset& data, const LogFn& log = {});
/// Per-run mean foreground Dice for each scenario.
void write_robustness_summary(const std::vector<RobustnessRun>& runs, const std::string& path);

void write_stage1_log(const std::vector<EpochRecord>& history, const std::string& path);
void write_stage2_log(const std::vector<Stage2Record>& history, const std::string& path);

/// Mean of the "all" row's dice for a scenario label.
double mean_dice(const std::vector<MetricReport>& rows, const std::string& scenario);

}  // namespace bmds
