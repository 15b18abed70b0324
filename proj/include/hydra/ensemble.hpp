#pragma once

#include "hydra/data.hpp"
#include "hydra/nn.hpp"
#include "hydra/training.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hydra {

struct EnsembleConfig {
  std::vector<int> hidden{100, 100};
  Activation activation = Activation::relu;
  std::vector<std::uint64_t> seeds;  // one per member, distinct
  OptimizerConfig optimizer;
  int max_epochs = 200;
  int batch_size = 64;
  int patience = 20;
};

/// Seed-diverse deep ensemble. Every member maps input_dim -> C logits
/// (classification) or (mean, log-variance) (regression).
struct Ensemble {
  Task task = Task::classification;
  std::vector<MlpModel> members;
  std::vector<std::uint64_t> seeds;
  std::string config_digest;

  std::size_t size() const { return members.size(); }
  Eigen::Index input_dim() const { return members.empty() ? 0 : members.front().input_dim(); }
  Eigen::Index output_dim() const { return members.empty() ? 0 : members.front().output_dim(); }
  /// Throws InvalidInput if empty or members disagree on shape.
  void validate() const;
};

struct EnsemblePrediction {
  Task task = Task::classification;
  std::vector<Vector> member_probabilities;          // classification
  Vector mean_probabilities;                         // classification
  std::vector<GaussianPrediction> member_gaussians;  // regression
  GaussianPrediction mixture;                        // regression: moment summary
};

/// Mean and variance of the equal-weight mixture (law of total variance).
GaussianPrediction mixture_moments(const std::vector<GaussianPrediction>& components);

/// Per-example Gaussian NLL for a network emitting (mean, log-variance), with
/// its gradient w.r.t. the raw outputs.
double gaussian_nll_raw(double target, double mean, double raw_log_variance, double* d_mean,
                        double* d_raw);

/// Trains one member from `seed` (initialization and shuffling both derive from it).
MlpModel train_member(const Dataset& train, const Dataset& validation, const EnsembleConfig& config,
                      std::uint64_t seed, std::vector<EpochRecord>* curve = nullptr);

/// Trains config.seeds.size() members independently on the full training set,
/// each keeping its best-validation snapshot.
Ensemble train_ensemble(const Dataset& train, const Dataset& validation, const EnsembleConfig& config);

EnsemblePrediction predict(const Ensemble& ensemble, const Vector& input);

/// Row-wise member outputs: probabilities (T = 1) for classification, raw
/// (mean, log-variance) for regression. One matrix per member.
std::vector<Matrix> member_outputs(const Ensemble& ensemble, const Matrix& inputs);

/// Directory layout: manifest.json plus member_000.json, member_001.json, ...
void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& directory);
Ensemble load_ensemble(const std::filesystem::path& directory);

std::string member_file_name(std::size_t index);

}  // namespace hydra
