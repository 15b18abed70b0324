#pragma once

#include "hydra/data.hpp"
#include "hydra/ensemble.hpp"
#include "hydra/nn.hpp"
#include "hydra/training.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hydra {

/// Shared body plus M heads. Head m consumes the body's (activated) features
/// and is matched to teacher member m.
struct HydraModel {
  MlpModel body;
  std::vector<MlpModel> heads;
  Task task = Task::classification;
  double temperature = 1.0;  // training-time temperature; evaluation always uses T = 1

  std::size_t num_heads() const { return heads.size(); }
  Eigen::Index input_dim() const { return body.input_dim(); }
  Eigen::Index output_dim() const { return heads.empty() ? 0 : heads.front().output_dim(); }
  /// Throws InvalidInput when a head does not fit the body or heads disagree.
  void validate() const;

  /// Body dims (input, hidden...) and head dims (hidden..., output); the head's
  /// input width is the body's last width. A single freshly initialized head.
  static HydraModel initialized(std::span<const int> body_dims, std::span<const int> head_dims,
                                Activation activation, Task task, double temperature,
                                std::uint64_t seed);
};

std::size_t count_params(const HydraModel& hydra);

/// Raw head outputs for one input (logits or mean/log-variance), one per head.
std::vector<Vector> head_outputs(const HydraModel& hydra, const Vector& input);
/// Row-wise raw head outputs for a batch.
std::vector<Matrix> head_outputs_batch(const HydraModel& hydra, const Matrix& inputs);

struct HydraGradients {
  MlpGradients body;
  std::vector<MlpGradients> heads;
};

/// Loss value plus gradient with respect to each head's logits.
struct LogitLoss {
  double value = 0.0;  // T^2/M sum_m CE(teacher_m, softmax(z_m / T))
  double kl = 0.0;     // same with the teacher-entropy constants removed
  std::vector<Vector> grad;
};

/// Re-tempers a probability vector: p^(1/T), renormalized.
Vector temper_probabilities(const Vector& p, double temperature);

/// Knowledge-distillation objective on one example: teacher_mean must already
/// be tempered with T. Gradient is w.r.t. the student logits.
LogitLoss kd_classification_loss(const Vector& teacher_mean, const Vector& student_logits, double temperature);

/// Per-head matching of tempered member targets, scaled by T^2 / M.
LogitLoss hydra_classification_logit_loss(const std::vector<Vector>& teacher_per_member,
                                          const std::vector<Vector>& head_logits, double temperature);

struct HydraLoss {
  double value = 0.0;
  double kl = 0.0;
  HydraGradients grads;
};

/// Full-model Hydra classification loss on one input, with parameter gradients.
HydraLoss hydra_classification_loss(const std::vector<Vector>& teacher_per_member, const HydraModel& hydra,
                                    const Vector& input, double temperature);

/// Loss plus gradients w.r.t. each student Gaussian's mean and variance.
struct GaussianLoss {
  double value = 0.0;  // cross-entropy form
  double kl = 0.0;     // value minus the average teacher entropy
  std::vector<double> d_mean;
  std::vector<double> d_variance;
};

/// (1/M) sum_m [(var_m + (mu_m - mu)^2) / (2 var) + 0.5 log(2 pi var)]; minimized
/// by the moment-matched Gaussian of the teacher mixture.
GaussianLoss kd_regression_loss(const std::vector<GaussianPrediction>& teacher_members,
                                const GaussianPrediction& student);

/// (1/M) sum_m [(var_m + (mu_m - mu_h)^2) / (2 var_h) + 0.5 log(2 pi var_h)].
GaussianLoss hydra_regression_loss(const std::vector<GaussianPrediction>& teacher_members,
                                   const std::vector<GaussianPrediction>& head_outputs);

/// Clones the single (Hinton) head into `target_heads` identical heads.
HydraModel grow_heads(const HydraModel& single_head, int target_heads);

enum class DistillMethod { kd, hydra };

std::string_view to_string(DistillMethod method);
DistillMethod distill_method_from_string(std::string_view name);

struct DistillConfig {
  DistillMethod method = DistillMethod::hydra;
  double temperature = 2.0;  // classification only
  int phase1_epochs = 200;   // kd: total epochs
  int phase2_epochs = 200;
  int batch_size = 64;
  int patience = 20;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  Activation activation = Activation::relu;
  std::vector<int> body_hidden{100, 100};
  std::vector<int> head_hidden{};
  std::vector<int> student_hidden{100, 100};  // kd baseline
};

/// Per-input teacher predictions, computed once and reused every epoch.
struct TeacherTargets {
  Task task = Task::classification;
  double temperature = 1.0;
  std::vector<Matrix> member;  // classification: tempered probabilities, N x C per member
  Matrix mean;                 // classification: average of tempered member probabilities
  Matrix means;                // regression: N x M
  Matrix variances;            // regression: N x M
  std::string digest;  // digest of the dataset the targets were computed on

  Eigen::Index rows() const;
  std::size_t members() const;
};

TeacherTargets compute_teacher_targets(const Ensemble& teacher, const Dataset& dataset, double temperature);
void save_teacher_targets(const std::filesystem::path& path, const TeacherTargets& targets);
/// Throws LoadError if the cache was built for a different dataset digest.
TeacherTargets load_teacher_targets(const std::filesystem::path& path, const std::string& expected_digest);

struct HydraTrainResult {
  HydraModel model;
  std::vector<EpochRecord> curve;  // phase 1 then phase 2
  int phase_boundary = 0;          // number of phase-1 epochs run
  double loss_at_growth = 0.0;     // phase-2 objective on train right after growth
  double final_loss = 0.0;         // phase-2 objective on train for the returned model
};

/// Phase 1: body + one head against the ensemble average. Then grow to M heads.
/// Phase 2: all heads against their members. Both phases keep the best-validation snapshot.
/// `cached` (optional) replaces the teacher pass over `train`; it must carry the
/// dataset's digest and the config's temperature.
HydraTrainResult two_phase_train(const Ensemble& teacher, const DistillConfig& config, const Dataset& train,
                                 const Dataset& validation, const TeacherTargets* cached = nullptr);

struct KdTrainResult {
  MlpModel student;
  std::vector<EpochRecord> curve;
  double final_loss = 0.0;
};

/// Single-head knowledge distillation baseline.
KdTrainResult distill_kd(const Ensemble& teacher, const DistillConfig& config, const Dataset& train,
                         const Dataset& validation, const TeacherTargets* cached = nullptr);

/// Temperature actually used for a teacher: config.temperature for classification, 1 for regression.
double effective_temperature(const Ensemble& teacher, const DistillConfig& config);

/// Evaluation-time (T = 1) predictions. The Hydra student reads like an ensemble
/// with one member per head; the KD student like a one-member ensemble.
EnsemblePrediction predict(const HydraModel& hydra, const Vector& input);
EnsemblePrediction predict_student(const MlpModel& student, Task task, const Vector& input);

/// Mean distillation objective over a dataset given cached targets.
double hydra_objective(const HydraModel& hydra, const Matrix& inputs, const TeacherTargets& targets);
double kd_objective(const MlpModel& student, const Matrix& inputs, const TeacherTargets& targets);

struct HydraManifestInfo {
  int phase1_epochs = 0;
  int phase2_epochs = 0;
  std::string teacher_digest;
};

/// Directory layout: manifest.json, body.json, head_000.json, ...
void save_hydra(const HydraModel& hydra, const std::filesystem::path& directory,
                const HydraManifestInfo& info = {});
HydraModel load_hydra(const std::filesystem::path& directory, HydraManifestInfo* info = nullptr);

}  // namespace hydra
