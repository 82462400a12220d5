#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfot/dataset.hpp"
#include "sfot/pipeline.hpp"

namespace sfot {

enum class ExperimentMode {
  kMethod,    // baseline (alpha = 0) vs the OT-trained generator
  kAblation,  // generator trained with OT, L2 or KL
};

struct ExperimentConfig {
  DatasetSpec dataset = reference_dataset_spec();
  StageConfig stages;
  std::vector<std::size_t> shots{1, 2, 5};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  ExperimentMode mode = ExperimentMode::kMethod;
  /// Empty means every variant of the mode.
  std::vector<std::string> variants;
  std::filesystem::path out_dir = "experiment";
  std::size_t workers = 1;

  void validate() const;
  std::vector<std::string> effective_variants() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys keep the values in `base`.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base = {});

struct ExperimentRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t shots = 0;
  EvalReport report;
};

inline constexpr const char* kCsvHeader = "variant,seed,shots,base_mean,novel_mean,overall_mean";
std::string csv_line(const ExperimentRow& row);

/// All rows of one seed: every shot count for every variant, all sharing the
/// same base classifier, K-shot draw and fine-tuning stream so variants are
/// paired.
std::vector<ExperimentRow> run_cell(const ExperimentConfig& cfg, const SyntheticDataset& data, std::uint64_t seed);

/// Runs every seed on `cfg.workers` threads. `on_cell` receives completed
/// cells in seed order, each exactly once, from a single thread at a time.
std::vector<ExperimentRow> run_experiment(const ExperimentConfig& cfg,
                                          const std::function<void(const std::vector<ExperimentRow>&)>& on_cell = {});

struct SummaryCell {
  std::string variant;
  std::size_t shots = 0;
  std::size_t runs = 0;
  double novel_mean = 0.0, novel_std = 0.0;
  double base_mean = 0.0, base_std = 0.0;
};

struct PairedDelta {
  std::string variant;  // compared against the reference variant
  std::size_t shots = 0;
  std::vector<double> novel;  // per seed, in seed order
  std::vector<double> base;
  double novel_mean = 0.0;
  double base_mean = 0.0;
};

struct ExperimentSummary {
  std::string reference_variant;
  std::vector<SummaryCell> cells;
  std::vector<PairedDelta> deltas;
};

/// Mean and sample standard deviation per (variant, shots); paired per-seed
/// deltas of every other variant against the first one.
ExperimentSummary summarize(const std::vector<ExperimentRow>& rows, const std::vector<std::string>& variants);
std::string format_summary(const ExperimentSummary& summary);
nlohmann::json to_json(const ExperimentSummary& summary);

/// Writes results.csv (flushed per completed cell), summary.txt and
/// report.json under cfg.out_dir.
ExperimentSummary run_experiment_to_files(const ExperimentConfig& cfg);

}  // namespace sfot
