#pragma once

#include "mmfal/active_learning.hpp"
#include "mmfal/synthetic.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mmfal {

/// Everything needed to re-execute one run. Paths are stored absolute once
/// loaded from a file.
struct ExperimentConfig {
  std::string name = "run";

  /// Exactly one of `manifest` and `synthetic` is set.
  std::filesystem::path manifest;
  std::optional<SyntheticSpec> synthetic;
  std::uint64_t synthetic_seed = 0;

  std::vector<ModalityKind> modalities{ModalityKind::LSTE};
  ModelConfig model;
  TrainConfig train;
  TargetSize input;
  /// "imagenet" or "identity".
  std::string normalization = "imagenet";

  /// Empty: plain supervised training on the whole training split.
  std::optional<QueryConfig> query;
  Schedule schedule;

  double split_fraction = 0.8;
  std::uint64_t split_seed = 0;

  std::filesystem::path output_dir;
  /// "simulated" or "live" (labels come from the annotation service).
  std::string oracle = "simulated";
  /// Continue from output_dir/checkpoint if present.
  bool resume = false;
  bool write_plot = true;

  bool active_learning() const { return query.has_value(); }
  Normalization normalization_constants() const;
  /// Throws ConfigError/SchemaError before any compute happens.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Parses and validates a config file; relative paths resolve against the
/// file's directory.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct RunReport {
  nlohmann::json config;
  EvalReport final_eval;
  std::optional<ALHistory> history;
  nlohmann::json environment;
  double wall_time_s = 0.0;
  /// FNV-1a over the sorted test patient ids.
  std::string split_fingerprint;
  std::vector<std::string> test_patients;
  bool complete = true;
  std::string error;

  std::string name() const;
};

void to_json(nlohmann::json& j, const RunReport& r);
void from_json(const nlohmann::json& j, RunReport& r);
RunReport read_run_report(const std::filesystem::path& path);
void write_run_report(const RunReport& report, const std::filesystem::path& path);

/// Optional plumbing for live mode and progress output.
struct RunHooks {
  Oracle* oracle = nullptr;
  std::function<void(const DatasetIndex&)> on_dataset;
  std::function<void(const ALRecord&, const CandidatePool&)> on_record;
};

/// Runs one experiment and writes report.json, history.csv (AL only) and
/// curve.png into output_dir. On failure a report flagged incomplete is
/// written and the error rethrown; AL state stays in output_dir/checkpoint.
RunReport run_experiment(const ExperimentConfig& config, const RunHooks& hooks = {});

std::string split_fingerprint(const std::vector<std::string>& test_patients);

/// "89.27 (79.5%)": macro AUC in percent and the labeled fraction it was
/// reached at.
std::string format_auc_at(double auc, double d);

struct ComparisonRow {
  std::string name;
  std::string modalities;
  std::string strategy;
  std::string accuracy;
  std::string macro_auc;
  std::string best_auc_at;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;
  std::string to_markdown() const;
  std::string to_csv() const;
};

/// One row per report. Throws ArgumentError when test splits differ.
ComparisonTable compare_runs(const std::vector<RunReport>& reports);

/// {LSTE, LUS, LSTQ, LSTE+LUS, LSTE+LSTQ, LSTE+SSTE} × {none, RAND, ESD},
/// each writing to base.output_dir/<name>.
std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base);

}  // namespace mmfal
