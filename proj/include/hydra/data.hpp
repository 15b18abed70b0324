#pragma once

#include "hydra/checkpoint.hpp"
#include "hydra/nn.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hydra {

enum class Task { classification, regression };

std::string_view to_string(Task task);
Task task_from_string(std::string_view name);

/// Rows of `inputs` are examples. Classification uses `labels` (0..num_classes-1),
/// regression uses `targets`.
struct Dataset {
  Task task = Task::classification;
  Matrix inputs;
  std::vector<int> labels;
  Vector targets;
  int num_classes = 0;
  std::vector<std::string> feature_names;

  Eigen::Index size() const { return inputs.rows(); }
  Eigen::Index dim() const { return inputs.cols(); }
  bool empty() const { return inputs.rows() == 0; }

  /// Throws InvalidInput if row counts disagree or a label is out of range.
  void validate() const;
  Dataset subset(const std::vector<Eigen::Index>& rows) const;
};

/// Content hash over task, shape, inputs and targets.
std::string dataset_digest(const Dataset& dataset);

inline constexpr double kSpiralRadius = 5.0;

/// Interleaved Archimedean arms: class c follows angle t + 2*pi*c/n_classes with
/// t uniform in [0, 3*pi] and radius t / (3*pi) * kSpiralRadius, plus isotropic
/// Gaussian noise on both coordinates.
Dataset make_spiral(int n_per_class, int n_classes, double noise_std, std::uint64_t seed);

/// 1-D heteroscedastic regression: x ~ U(-3, 3), y = sin(2x) + 0.3x + eps with
/// eps ~ N(0, (0.05 + 0.1 (x + 3))^2).
Dataset make_heteroscedastic(int n, std::uint64_t seed);
double heteroscedastic_mean(double x);
double heteroscedastic_stddev(double x);

/// Small side x side grayscale images, one Gaussian blob per image placed at
/// angle 2*pi*c/n_classes around the center. Rotating by 180/n_classes degrees
/// moves a blob halfway between two class positions.
Dataset make_radial_blobs(int n_per_class, int n_classes, int side, double noise_std,
                          std::uint64_t seed);

/// One IDX file: either an image tensor or a label vector.
struct IdxFragment {
  bool is_labels = false;
  std::vector<std::uint32_t> dims;
  Matrix images;            // count x (rows * cols), scaled to [0, 1]
  std::vector<int> labels;  // values as stored
};

IdxFragment load_idx(const std::filesystem::path& path);
/// Pairs an image file with a label file into a classification dataset.
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Comma- or whitespace-delimited numeric table. `target_column` is a header
/// name or a column index (negative counts from the end).
Dataset load_regression_table(const std::filesystem::path& path, const std::string& target_column);

struct Standardization {
  Vector feature_mean;
  Vector feature_scale;  // 1 for near-constant columns
  double target_mean = 0.0;
  double target_scale = 1.0;

  Matrix apply_inputs(const Matrix& inputs) const;
  Dataset apply(const Dataset& dataset) const;
  double destandardize_target(double standardized) const;
  Json to_json() const;
  static Standardization from_json(const Json& doc);
};

struct StandardizeResult {
  Dataset train;
  std::vector<Dataset> others;
  Standardization params;
};

/// Per-column z-scoring fitted on `train` (columns with std < 1e-8 are only centered);
/// regression targets are standardized the same way.
StandardizeResult standardize(const Dataset& train, const std::vector<Dataset>& others);

enum class ShiftKind { rotate, translate_cyclic, scale };

std::string_view to_string(ShiftKind kind);
ShiftKind shift_kind_from_string(std::string_view name);

struct ShiftSpec {
  ShiftKind kind = ShiftKind::rotate;
  double intensity = 0.0;  // degrees, pixels, or relative scale increase
  int height = 0;
  int width = 0;
};

/// rotate: bilinear about the image center, zero outside.
/// translate_cyclic: horizontal roll right by floor(intensity) pixels.
/// scale: inputs multiplied by (1 + intensity); image shape unused.
Dataset apply_shift(const Dataset& dataset, const ShiftSpec& spec);

struct SplitResult {
  Dataset train;
  Dataset validation;
  Dataset test;
  std::array<std::vector<Eigen::Index>, 3> rows;

  Json manifest(std::uint64_t seed, const std::array<double, 3>& fractions) const;
};

/// Disjoint train/validation/test cover, stratified by class for classification.
SplitResult split(const Dataset& dataset, const std::array<double, 3>& fractions,
                  std::uint64_t seed);

}  // namespace hydra
