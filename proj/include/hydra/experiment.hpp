#pragma once

#include "hydra/data.hpp"
#include "hydra/distill.hpp"
#include "hydra/ensemble.hpp"
#include "hydra/metrics.hpp"

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace hydra {

inline constexpr int kConfigSchemaVersion = 1;

struct ShiftSweep {
  ShiftKind kind = ShiftKind::scale;
  std::vector<double> intensities;
};

struct ExperimentConfig {
  Task task = Task::classification;
  Json dataset;  // validated generator / file description
  std::filesystem::path base_dir;  // relative dataset paths resolve against this
  std::array<double, 3> fractions{0.8, 0.1, 0.1};
  bool standardize = true;
  std::uint64_t seed = 0;
  EnsembleConfig ensemble;
  DistillConfig distill;
  std::vector<ShiftSweep> shifts;
  int image_height = 0;  // nonzero for image datasets
  int image_width = 0;
  int grid_resolution = 50;
  Json canonical;      // the config as parsed, with the effective seed
  std::string digest;  // content hash of `canonical`
};

/// Validates everything up front; throws ConfigError listing every problem found.
ExperimentConfig parse_config(const Json& doc, const std::filesystem::path& base_dir,
                              std::optional<std::uint64_t> seed_override = std::nullopt);
ExperimentConfig load_config(const std::filesystem::path& path,
                             std::optional<std::uint64_t> seed_override = std::nullopt);

/// The configured dataset, split and (optionally) standardized on train statistics.
struct PreparedData {
  Dataset raw;
  SplitResult parts;  // raw-scale splits
  Standardization preprocess;
  Dataset train;  // standardized
  Dataset validation;
  Dataset test;
  Vector train_min;  // raw-scale training bounding box
  Vector train_max;
};

Dataset build_dataset(const ExperimentConfig& config);
PreparedData prepare_data(const ExperimentConfig& config);
/// Standardization that leaves data unchanged.
Standardization identity_standardization(const Dataset& like);

/// Any persisted model the CLI knows how to score, plus the preprocessing it was trained with.
struct LoadedModel {
  std::string kind;  // ensemble, hydra, kd
  Task task = Task::classification;
  std::variant<Ensemble, HydraModel, MlpModel> model;
  Standardization preprocess;
  Vector train_min;
  Vector train_max;

  Eigen::Index input_dim() const;
  /// Prediction on an already standardized input.
  EnsemblePrediction predict(const Vector& input) const;
};

LoadedModel load_any_model(const std::filesystem::path& directory);

/// Report for a model on raw-scale data; regression leaves accuracy and Brier as NaN
/// and decomposes predictive variance instead of entropy.
struct Evaluation {
  MetricReport report;
  std::vector<double> model_uncertainty;  // per example
};

Evaluation evaluate_model(const LoadedModel& model, const Dataset& raw_data);

/// Entropy decomposition for classifiers; for regression the variance analogue
/// (total, mean member variance, variance of member means) on the original target scale.
UncertaintyDecomposition prediction_uncertainty(const LoadedModel& model, const EnsemblePrediction& prediction);

namespace cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kRuntimeError = 3 };

/// Entry point shared by the executable and the tests. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cli

}  // namespace hydra
