#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace hydra {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kLogEpsilon = 1e-12;
inline constexpr double kMinVariance = 1e-6;
inline constexpr double kMaxVariance = 1e6;

enum class Activation { relu, softplus, identity };

std::string_view to_string(Activation activation);
Activation activation_from_string(std::string_view name);

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::identity;

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
};

/// Dense feed-forward network. Layer k's output feeds layer k+1.
class MlpModel {
 public:
  MlpModel() = default;
  /// Throws InvalidInput when dimensions do not chain or a parameter is non-finite.
  explicit MlpModel(std::vector<DenseLayer> layers);

  /// Builds a randomly initialized network over `dims` (input, hidden..., output).
  /// Hidden layers use `hidden_activation`, the final layer `output_activation`.
  /// Weights are fan-in scaled uniform (He for relu, Glorot otherwise), biases zero.
  static MlpModel initialized(std::span<const int> dims, Activation hidden_activation,
                              std::uint64_t seed,
                              Activation output_activation = Activation::identity);

  Eigen::Index input_dim() const;
  Eigen::Index output_dim() const;
  std::vector<int> dims() const;
  bool empty() const { return layers_.empty(); }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& mutable_layers() { return layers_; }

  bool all_finite() const;

  friend bool operator==(const MlpModel& a, const MlpModel& b);

 private:
  std::vector<DenseLayer> layers_;
};

/// Parameter-shaped gradient (or accumulator) for an MlpModel.
struct MlpGradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  static MlpGradients zeros_like(const MlpModel& model);
  void add_scaled(const MlpGradients& other, double scale);
  void scale(double factor);
  bool all_finite() const;
};

/// Activations recorded by forward_batch for a later backward pass.
struct ForwardCache {
  std::vector<Matrix> pre;   // per layer, examples x out
  std::vector<Matrix> post;  // post[0] is the input; post[k+1] the output of layer k
};

struct BackwardResult {
  MlpGradients params;
  Matrix input_grad;  // examples x input_dim
};

Vector forward(const MlpModel& model, const Vector& input);

/// Row-wise forward pass; `inputs` holds one example per row.
Matrix forward_batch(const MlpModel& model, const Matrix& inputs,
                     ForwardCache* cache = nullptr);

/// Gradient of sum_i <upstream_i, output_i> with respect to the parameters,
/// summed over the rows recorded in `cache`, plus the gradient w.r.t. the inputs.
BackwardResult backward_batch(const MlpModel& model, const ForwardCache& cache,
                              const Matrix& upstream);

MlpGradients backward(const MlpModel& model, const Vector& input, const Vector& upstream);

/// softmax(logits / T), max-subtracted. Throws InvalidInput for T <= 0.
Vector tempered_softmax(const Vector& logits, double temperature);
Matrix tempered_softmax_rows(const Matrix& logits, double temperature);

/// Heteroscedastic regression output: the second raw unit is log-variance.
struct GaussianPrediction {
  double mean = 0.0;
  double variance = 1.0;
};

GaussianPrediction gaussian_from_raw(double mean, double raw_log_variance);
/// d variance / d raw_log_variance under the clamped parameterization.
double variance_raw_derivative(double raw_log_variance);

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class OptimizerState {
 public:
  OptimizerState(OptimizerConfig config, const MlpModel& model);

  const OptimizerConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }

  /// Applies one update in place. Throws TrainingError on non-finite gradients
  /// (model untouched) and InvalidInput on shape mismatch.
  void step(MlpModel& model, const MlpGradients& gradients);

 private:
  OptimizerConfig config_;
  MlpGradients first_moment_;
  MlpGradients second_moment_;
  std::uint64_t steps_ = 0;
};

inline void optimizer_step(OptimizerState& state, MlpModel& model, const MlpGradients& gradients) {
  state.step(model, gradients);
}

std::size_t count_params(const MlpModel& model);

}  // namespace hydra
