#include "bmds/config.hpp"
#include "bmds/gradcheck_suite.hpp"
#include "bmds/harness.hpp"
#include "bmds/io.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace bmds;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::optional<std::int64_t> threads;
  std::vector<std::string> sets;
  std::string data;
  bool quiet = false;
};

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : parse_config(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(' '));
      s.erase(s.find_last_not_of(' ') + 1);
      return s;
    };
    set_config_value(cfg, trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  if (c.threads) cfg.threads = *c.threads;
  if (const char* env = std::getenv("BMDS_THREADS")) {
    try {
      set_config_value(cfg, "threads", env);
    } catch (const ConfigError&) {
      throw UsageError(std::string("BMDS_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  validate_config(cfg);
  return cfg;
}

LogFn logger(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& m) { std::cerr << m << '\n'; };
}

std::string out_path(const Common& c, const std::string& name) {
  fs::create_directories(c.out);
  return (fs::path(c.out) / name).string();
}

Dataset load_data(const Common& c, const ExperimentConfig& cfg) {
  if (c.data.empty()) return build_dataset(cfg);
  return make_dataset(read_dataset(c.data, cfg.data.regions));
}

Model load_checkpoint_model(const std::string& path, const ExperimentConfig& cfg, bool allow) {
  return load_model(read_checkpoint(path), model_config(cfg), config_hash(cfg), allow);
}

std::vector<Scenario> scenarios_from(const std::vector<std::string>& texts) {
  std::vector<Scenario> out;
  for (const auto& t : texts) out.push_back(parse_scenario(t));
  return out;
}

void print_report_summary(const std::vector<MetricReport>& rows) {
  for (const auto& r : rows) {
    if (r.region != "all") continue;
    std::cout << r.scenario << ": dice " << fmt6(r.dice_mean) << " +- " << fmt6(r.dice_std) << ", hd95 "
              << (r.hd95_mean ? fmt6(*r.hd95_mean) : std::string("n/a")) << ", ece " << fmt6(r.ece) << ", nll "
              << fmt6(r.nll);
    if (r.hd95_undefined > 0) std::cout << " (" << r.hd95_undefined << " undefined hd95)";
    std::cout << '\n';
  }
}

// report: merges every report-schema CSV in a directory.
int run_report(const Common& c, const std::string& in_dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(in_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv" && e.path().filename() != "summary.csv") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::string header_line;
  for (std::size_t i = 0; i < report_header().size(); ++i) header_line += (i ? "," : "") + report_header()[i];
  std::vector<std::string> header{"source"};
  header.insert(header.end(), report_header().begin(), report_header().end());
  std::vector<std::vector<std::string>> rows;
  for (const auto& f : files) {
    std::istringstream in(read_file(f.string()));
    std::string line;
    if (!std::getline(in, line) || line != header_line) continue;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells{f.stem().string()};
      std::string cell;
      std::istringstream ls(line);
      while (std::getline(ls, cell, ',')) cells.push_back(cell);
      if (!line.empty() && line.back() == ',') cells.emplace_back();
      if (cells.size() != header.size()) throw IoError(f.string() + ": malformed row '" + line + "'");
      rows.push_back(std::move(cells));
    }
  }
  if (rows.empty()) throw IoError("report: no report CSVs found in '" + in_dir + "'");
  write_csv(out_path(c, "summary.csv"), header, rows);
  for (const auto& r : rows) {
    if (r[2] == "all") std::cout << r[0] << " " << r[1] << ": dice " << r[3] << " ece " << r[7] << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bmds: desk-scale BMDS-Net training and evaluation"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  Common c;
  bool print_default = false;
  app.add_option("--config", c.config, "experiment config file (key = value lines)");
  app.add_option("--seed", c.seed, "global seed, overrides the config");
  app.add_option("--out", c.out, "output directory (default .)");
  app.add_option("--threads", c.threads, "evaluation threads; BMDS_THREADS overrides");
  app.add_option("--set", c.sets, "extra key=value config assignment, repeatable");
  app.add_flag("--quiet", c.quiet, "suppress progress on stderr");
  app.add_flag("--print-default-config", print_default,
               "print every config key with its default; with --out, write <out>/default.cfg instead");

  auto* gen = app.add_subcommand("gen-data", "write the phantom dataset to --out");

  auto* train = app.add_subcommand("train", "stage 1: deterministic training");
  train->add_option("--data", c.data, "dataset directory from gen-data (default: generate in memory)");

  std::string ckpt;
  bool allow_mismatch = false;
  auto* fine = app.add_subcommand("finetune-bayes", "stage 2: Bayesian output-layer fine-tuning");
  fine->add_option("--ckpt", ckpt, "stage-1 checkpoint")->required();
  fine->add_option("--data", c.data, "dataset directory");
  fine->add_flag("--allow-config-mismatch", allow_mismatch, "load despite a config hash mismatch");

  std::vector<std::string> scenario_texts;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval->add_option("--ckpt", ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--data", c.data, "dataset directory");
  eval->add_option("--scenario", scenario_texts, "full, missing:<i> or noise:<std>; repeatable");
  eval->add_flag("--allow-config-mismatch", allow_mismatch, "load despite a config hash mismatch");

  std::string variants = "current";
  auto* robust = app.add_subcommand("robustness", "missing-modality and noise robustness table");
  robust->add_option("--ckpt", ckpt, "evaluate this checkpoint instead of training per seed");
  robust->add_option("--data", c.data, "dataset directory");
  robust->add_option("--variants", variants, "current or all (the four wiring variants)")
      ->check(CLI::IsMember({"current", "all"}));
  robust->add_flag("--allow-config-mismatch", allow_mismatch, "load despite a config hash mismatch");

  std::vector<double> alphas;
  auto* sweep = app.add_subcommand("sweep-alpha", "alpha initialization sensitivity sweep");
  sweep->add_option("--alpha", alphas, "alpha_init values (default harness.sweep_alpha)");
  sweep->add_option("--data", c.data, "dataset directory");

  std::optional<std::int64_t> n_models;
  auto* ens = app.add_subcommand("ensemble", "deterministic vs deep ensemble vs Bayesian calibration");
  ens->add_option("--n", n_models, "ensemble size (default harness.ensemble_models)");
  ens->add_option("--data", c.data, "dataset directory");

  auto* abl = app.add_subcommand("ablation", "train and evaluate the four wiring variants");
  abl->add_option("--data", c.data, "dataset directory");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");

  std::string in_dir;
  auto* rep = app.add_subcommand("report", "merge report CSVs of a directory into <out>/summary.csv");
  rep->add_option("--in", in_dir, "directory with report CSVs (default --out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  std::string name;
  try {
    if (print_default) {
      const std::string text = dump_config(ExperimentConfig{});
      if (app.count("--out") == 0) {
        std::cout << text;
        return 0;
      }
      write_file(out_path(c, "default.cfg"), text);
      std::cout << "OK print-default-config\n";
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help();
      return 1;
    }
    CLI::App* sub = app.get_subcommands().front();
    name = sub->get_name();
    const LogFn log = logger(c);

    if (sub == grad) {
      bool ok = true;
      for (const auto& e : run_gradcheck_suite(c.seed.value_or(0))) {
        const bool pass = e.max_rel_error < kGradCheckTolerance;
        ok = ok && pass;
        std::printf("%-44s max_rel_error %.3e  %s\n", e.name.c_str(), e.max_rel_error, pass ? "pass" : "FAIL");
      }
      if (!ok) {
        std::cerr << "gradcheck: at least one op exceeds " << kGradCheckTolerance << '\n';
        return 2;
      }
    } else if (sub == rep) {
      run_report(c, in_dir.empty() ? c.out : in_dir);
    } else {
      const ExperimentConfig cfg = load_config(c);
      if (sub == gen) {
        write_dataset(c.out, generate_dataset_files(cfg), phantom_spec(cfg));
      } else if (sub == train) {
        const Dataset data = load_data(c, cfg);
        const Stage1Result r = train_stage1(cfg, data, log);
        write_checkpoint(out_path(c, "stage1.ckpt"), make_checkpoint(r.model, r.meta));
        write_stage1_log(r.history, out_path(c, "stage1_log.csv"));
        std::cout << "best val_dice " << fmt6(r.meta.best_metric) << " at epoch " << r.meta.epoch << ", alpha "
                  << fmt6(r.final_alpha) << '\n';
      } else if (sub == fine) {
        const Checkpoint s1 = read_checkpoint(ckpt);
        if (s1.has_bayes_head()) throw UsageError("finetune-bayes: '" + ckpt + "' already has a Bayesian head");
        const Model stage1 = load_model(s1, model_config(cfg), config_hash(cfg), allow_mismatch);
        const Dataset data = load_data(c, cfg);
        const Stage2Result r = finetune_stage2(cfg, stage1, data, log);
        CheckpointMeta meta = s1.meta;
        meta.epoch = s1.meta.epoch + cfg.stage2.epochs;
        meta.best_metric = validation_dice(r.model, data.val, cfg.eval.threshold);
        write_checkpoint(out_path(c, "stage2.ckpt"), make_checkpoint(r.model, meta));
        write_stage2_log(r.history, out_path(c, "stage2_log.csv"));
        std::cout << "val_dice (posterior mean) " << fmt6(meta.best_metric) << '\n';
      } else if (sub == eval) {
        const Model model = load_checkpoint_model(ckpt, cfg, allow_mismatch);
        const Dataset data = load_data(c, cfg);
        const auto rows = evaluate(model, data.test, scenarios_from(scenario_texts.empty() ? cfg.eval.scenarios
                                                                                           : scenario_texts),
                                   cfg);
        write_report(rows, out_path(c, "report.csv"));
        print_report_summary(rows);
      } else if (sub == robust) {
        const Dataset data = load_data(c, cfg);
        if (!ckpt.empty()) {
          const Model model = load_checkpoint_model(ckpt, cfg, allow_mismatch);
          const auto rows = evaluate(model, data.test, scenarios_from(cfg.eval.robustness_scenarios), cfg);
          write_report(rows, out_path(c, "robustness.csv"));
          print_report_summary(rows);
        } else {
          std::vector<WiringFlags> v;
          if (variants == "all") v.assign(all_ablation_variants().begin(), all_ablation_variants().end());
          else v.push_back({cfg.model.use_mmcf, cfg.model.use_dds});
          const auto runs = robustness(cfg, v, data, log);
          for (const auto& run : runs) {
            write_report(run.rows, out_path(c, "robustness_" + run.variant + "_seed" + std::to_string(run.seed) + ".csv"));
          }
          write_robustness_summary(runs, out_path(c, "robustness_summary.csv"));
          for (const auto& run : runs) {
            std::cout << run.variant << " seed " << run.seed << ":\n";
            print_report_summary(run.rows);
          }
        }
      } else if (sub == sweep) {
        const Dataset data = load_data(c, cfg);
        const auto r = sensitivity_sweep(cfg, alphas.empty() ? cfg.harness.sweep_alpha : alphas, data, log);
        write_sweep(r, out_path(c, "sweep_alpha.csv"));
        for (const auto& run : r.runs) {
          std::cout << "alpha_init " << fmt6(run.alpha_init) << " seed " << run.seed << ": val_dice "
                    << fmt6(run.val_dice) << ", final alpha " << fmt6(run.final_alpha) << '\n';
        }
      } else if (sub == ens) {
        const Dataset data = load_data(c, cfg);
        const auto rows = ensemble_eval(cfg, n_models.value_or(cfg.harness.ensemble_models), data, false, log);
        write_ensemble(rows, out_path(c, "ensemble.csv"));
        for (const auto& r : rows) {
          std::cout << r.method << ": cost " << fmt6(r.training_cost) << "x, ece " << fmt6(r.ece) << ", nll "
                    << fmt6(r.nll) << ", dice " << fmt6(r.dice) << '\n';
        }
      } else if (sub == abl) {
        const Dataset data = load_data(c, cfg);
        const auto rows = ablation(cfg, data, log);
        write_ablation(rows, out_path(c, "ablation.csv"));
        for (const auto& r : rows) {
          std::cout << variant_name(r.flags) << ": dice " << fmt6(r.dice_mean) << ", params " << r.parameters << '\n';
        }
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << (name.empty() ? "" : name + ": ") << e.what() << '\n';
    return 2;
  }
  std::cout << "OK " << name << '\n';
  return 0;
}
