#include "hydra/distill.hpp"

#include "hydra/checkpoint.hpp"
#include "hydra/error.hpp"
#include "hydra/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

namespace hydra {

void HydraModel::validate() const {
  if (heads.empty()) throw InvalidInput("hydra model has no heads");
  for (const auto& head : heads) {
    if (head.input_dim() != body.output_dim()) {
      throw InvalidInput("head input width " + std::to_string(head.input_dim()) + " does not match body width " +
                         std::to_string(body.output_dim()));
    }
    if (head.output_dim() != heads.front().output_dim()) throw InvalidInput("heads disagree on output width");
  }
  if (task == Task::regression && output_dim() != 2) {
    throw InvalidInput("regression heads must emit (mean, log-variance)");
  }
  if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
}

HydraModel HydraModel::initialized(std::span<const int> body_dims, std::span<const int> head_dims,
                                   Activation activation, Task task, double temperature, std::uint64_t seed) {
  if (body_dims.size() < 2) throw ConfigError("hydra body needs at least one hidden layer");
  if (head_dims.empty()) throw ConfigError("hydra head needs an output width");
  HydraModel hydra;
  hydra.task = task;
  hydra.temperature = temperature;
  hydra.body = MlpModel::initialized(body_dims, activation, derive_seed(seed, 0), activation);
  std::vector<int> dims{body_dims.back()};
  dims.insert(dims.end(), head_dims.begin(), head_dims.end());
  hydra.heads.push_back(MlpModel::initialized(dims, activation, derive_seed(seed, 2)));
  hydra.validate();
  return hydra;
}

std::size_t count_params(const HydraModel& hydra) {
  std::size_t n = count_params(hydra.body);
  for (const auto& head : hydra.heads) n += count_params(head);
  return n;
}

std::vector<Vector> head_outputs(const HydraModel& hydra, const Vector& input) {
  hydra.validate();
  if (input.size() != hydra.input_dim()) {
    throw InvalidInput("input has " + std::to_string(input.size()) + " features, model expects " +
                       std::to_string(hydra.input_dim()));
  }
  const Vector features = forward(hydra.body, input);
  std::vector<Vector> out;
  for (const auto& head : hydra.heads) out.push_back(forward(head, features));
  return out;
}

std::vector<Matrix> head_outputs_batch(const HydraModel& hydra, const Matrix& inputs) {
  hydra.validate();
  const Matrix features = forward_batch(hydra.body, inputs);
  std::vector<Matrix> out;
  for (const auto& head : hydra.heads) out.push_back(forward_batch(head, features));
  return out;
}

Vector temper_probabilities(const Vector& p, double temperature) {
  require_distribution(p, "teacher probabilities");
  if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
  if (temperature == 1.0) return p;
  // Work in log space so tiny probabilities survive the power.
  Vector logs(p.size());
  double top = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    logs(i) = p(i) > 0.0 ? std::log(p(i)) / temperature : -std::numeric_limits<double>::infinity();
    top = std::max(top, logs(i));
  }
  Vector out(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) out(i) = std::exp(logs(i) - top);  // exactly 0 for p = 0
  return out / out.sum();
}

namespace {

double plogp_sum(const Vector& t) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (t(i) > 0.0) s += t(i) * std::log(t(i));
  }
  return s;
}

struct TermResult {
  double cross_entropy = 0.0;
  double kl = 0.0;
};

/// CE(target, softmax(z / T)) and its KL part; writes scale * (1/T) * (p - t) into grad.
/// Shared by the KD and Hydra objectives so M = 1 agrees bitwise.
TermResult classification_term(const Vector& target, const Vector& logits, double temperature, double scale,
                               Vector* grad) {
  const Vector scaled = logits / temperature;
  const double top = scaled.maxCoeff();
  const double log_norm = top + std::log((scaled.array() - top).exp().sum());
  double ce = 0.0;
  for (Eigen::Index i = 0; i < target.size(); ++i) {
    if (target(i) > 0.0) ce -= target(i) * (scaled(i) - log_norm);
  }
  if (grad) {
    const Vector p = (scaled.array() - log_norm).exp().matrix();
    *grad = (scale / temperature) * (p - target);
  }
  return {ce, ce + plogp_sum(target)};
}

void check_logits(const Vector& target, const Vector& logits) {
  if (target.size() != logits.size()) {
    throw InvalidInput("teacher has " + std::to_string(target.size()) + " classes, student " +
                       std::to_string(logits.size()));
  }
  if (!logits.allFinite()) throw InvalidInput("non-finite student logits");
}

void check_gaussian(const GaussianPrediction& g, const char* what) {
  if (!(g.variance > 0.0) || !std::isfinite(g.variance) || !std::isfinite(g.mean)) {
    throw InvalidInput(std::string(what) + " variance must be positive and finite");
  }
}

double gaussian_entropy(double variance) {
  return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * variance);
}

}  // namespace

LogitLoss kd_classification_loss(const Vector& teacher_mean, const Vector& student_logits, double temperature) {
  if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
  require_distribution(teacher_mean, "teacher mean");
  check_logits(teacher_mean, student_logits);
  const double scale = temperature * temperature;
  LogitLoss out;
  out.grad.resize(1);
  const TermResult term = classification_term(teacher_mean, student_logits, temperature, scale, &out.grad[0]);
  out.value = scale * term.cross_entropy;
  out.kl = scale * term.kl;
  return out;
}

LogitLoss hydra_classification_logit_loss(const std::vector<Vector>& teacher_per_member,
                                          const std::vector<Vector>& head_logits, double temperature) {
  if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
  if (teacher_per_member.size() != head_logits.size() || head_logits.empty()) {
    throw ConfigError("hydra has " + std::to_string(head_logits.size()) + " heads but the teacher has " +
                      std::to_string(teacher_per_member.size()) + " members");
  }
  const double scale = temperature * temperature / static_cast<double>(head_logits.size());
  LogitLoss out;
  out.grad.resize(head_logits.size());
  double ce = 0.0;
  double kl = 0.0;
  for (std::size_t m = 0; m < head_logits.size(); ++m) {
    require_distribution(teacher_per_member[m], "teacher member");
    check_logits(teacher_per_member[m], head_logits[m]);
    const TermResult term = classification_term(teacher_per_member[m], head_logits[m], temperature, scale, &out.grad[m]);
    ce += term.cross_entropy;
    kl += term.kl;
  }
  out.value = scale * ce;
  out.kl = scale * kl;
  return out;
}

namespace {

/// Backpropagates per-head upstream gradients (rows x out) through heads and body.
HydraGradients hydra_backward(const HydraModel& hydra, const ForwardCache& body_cache,
                              const std::vector<ForwardCache>& head_caches, const std::vector<Matrix>& upstream) {
  HydraGradients grads;
  Matrix feature_grad = Matrix::Zero(body_cache.post.back().rows(), hydra.body.output_dim());
  for (std::size_t m = 0; m < hydra.heads.size(); ++m) {
    BackwardResult r = backward_batch(hydra.heads[m], head_caches[m], upstream[m]);
    feature_grad += r.input_grad;
    grads.heads.push_back(std::move(r.params));
  }
  grads.body = backward_batch(hydra.body, body_cache, feature_grad).params;
  return grads;
}

}  // namespace

HydraLoss hydra_classification_loss(const std::vector<Vector>& teacher_per_member, const HydraModel& hydra,
                                    const Vector& input, double temperature) {
  hydra.validate();
  if (hydra.task != Task::classification) throw InvalidInput("hydra model is not a classifier");
  if (teacher_per_member.size() != hydra.num_heads()) {
    throw ConfigError("hydra has " + std::to_string(hydra.num_heads()) + " heads but the teacher has " +
                      std::to_string(teacher_per_member.size()) + " members");
  }
  if (input.size() != hydra.input_dim()) throw InvalidInput("input width does not match the hydra body");
  ForwardCache body_cache;
  const Matrix features = forward_batch(hydra.body, input.transpose(), &body_cache);
  std::vector<ForwardCache> head_caches(hydra.num_heads());
  std::vector<Vector> logits;
  for (std::size_t m = 0; m < hydra.num_heads(); ++m) {
    logits.push_back(forward_batch(hydra.heads[m], features, &head_caches[m]).row(0).transpose());
  }
  const LogitLoss loss = hydra_classification_logit_loss(teacher_per_member, logits, temperature);
  std::vector<Matrix> upstream;
  for (const auto& g : loss.grad) upstream.push_back(g.transpose());
  return {loss.value, loss.kl, hydra_backward(hydra, body_cache, head_caches, upstream)};
}

GaussianLoss kd_regression_loss(const std::vector<GaussianPrediction>& teacher_members,
                                const GaussianPrediction& student) {
  if (teacher_members.empty()) throw InvalidInput("teacher has no members");
  check_gaussian(student, "student");
  const double m = static_cast<double>(teacher_members.size());
  GaussianLoss out;
  out.d_mean.assign(1, 0.0);
  out.d_variance.assign(1, 0.0);
  double entropy = 0.0;
  const double v = student.variance;
  for (const auto& t : teacher_members) {
    check_gaussian(t, "teacher member");
    const double diff = t.mean - student.mean;
    const double spread = t.variance + diff * diff;
    out.value += spread / (2.0 * v) + 0.5 * std::log(2.0 * std::numbers::pi * v);
    out.d_mean[0] -= diff / v;
    out.d_variance[0] += 0.5 / v - spread / (2.0 * v * v);
    entropy += gaussian_entropy(t.variance);
  }
  out.value /= m;
  out.d_mean[0] /= m;
  out.d_variance[0] /= m;
  out.kl = out.value - entropy / m;
  return out;
}

GaussianLoss hydra_regression_loss(const std::vector<GaussianPrediction>& teacher_members,
                                   const std::vector<GaussianPrediction>& head_outputs) {
  if (teacher_members.size() != head_outputs.size() || head_outputs.empty()) {
    throw ConfigError("hydra has " + std::to_string(head_outputs.size()) + " heads but the teacher has " +
                      std::to_string(teacher_members.size()) + " members");
  }
  const double m = static_cast<double>(head_outputs.size());
  GaussianLoss out;
  out.d_mean.assign(head_outputs.size(), 0.0);
  out.d_variance.assign(head_outputs.size(), 0.0);
  double entropy = 0.0;
  for (std::size_t k = 0; k < head_outputs.size(); ++k) {
    const auto& t = teacher_members[k];
    const auto& h = head_outputs[k];
    check_gaussian(t, "teacher member");
    check_gaussian(h, "head");
    const double diff = t.mean - h.mean;
    const double spread = t.variance + diff * diff;
    out.value += spread / (2.0 * h.variance) + 0.5 * std::log(2.0 * std::numbers::pi * h.variance);
    out.d_mean[k] = -diff / h.variance / m;
    out.d_variance[k] = (0.5 / h.variance - spread / (2.0 * h.variance * h.variance)) / m;
    entropy += gaussian_entropy(t.variance);
  }
  out.value /= m;
  out.kl = out.value - entropy / m;
  return out;
}

HydraModel grow_heads(const HydraModel& single_head, int target_heads) {
  if (target_heads < 1) throw ConfigError("target head count must be at least 1, got " + std::to_string(target_heads));
  if (single_head.num_heads() != 1) {
    throw ConfigError("head growth starts from exactly one head, model has " +
                      std::to_string(single_head.num_heads()));
  }
  HydraModel grown = single_head;
  grown.heads.assign(static_cast<std::size_t>(target_heads), single_head.heads.front());
  return grown;
}

std::string_view to_string(DistillMethod method) { return method == DistillMethod::kd ? "kd" : "hydra"; }

DistillMethod distill_method_from_string(std::string_view name) {
  if (name == "kd") return DistillMethod::kd;
  if (name == "hydra") return DistillMethod::hydra;
  throw ConfigError("unknown distillation method '" + std::string(name) + "' (expected kd or hydra)");
}

Eigen::Index TeacherTargets::rows() const {
  if (task == Task::classification) return member.empty() ? 0 : member.front().rows();
  return means.rows();
}

std::size_t TeacherTargets::members() const {
  return task == Task::classification ? member.size() : static_cast<std::size_t>(means.cols());
}

TeacherTargets compute_teacher_targets(const Ensemble& teacher, const Dataset& dataset, double temperature) {
  teacher.validate();
  if (teacher.task != dataset.task) throw InvalidInput("teacher and dataset tasks differ");
  if (dataset.dim() != teacher.input_dim()) {
    throw InvalidInput("dataset has " + std::to_string(dataset.dim()) + " features, teacher expects " +
                       std::to_string(teacher.input_dim()));
  }
  if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
  TeacherTargets targets;
  targets.task = teacher.task;
  targets.temperature = temperature;
  targets.digest = dataset_digest(dataset);
  const auto outputs = member_outputs(teacher, dataset.inputs);
  const Eigen::Index n = dataset.size();
  if (teacher.task == Task::classification) {
    targets.mean = Matrix::Zero(n, teacher.output_dim());
    for (const auto& probs : outputs) {
      Matrix tempered(n, probs.cols());
      for (Eigen::Index i = 0; i < n; ++i) {
        tempered.row(i) = temper_probabilities(probs.row(i).transpose(), temperature).transpose();
      }
      targets.mean += tempered;
      targets.member.push_back(std::move(tempered));
    }
    targets.mean /= static_cast<double>(teacher.size());
  } else {
    const auto m = static_cast<Eigen::Index>(teacher.size());
    targets.means.resize(n, m);
    targets.variances.resize(n, m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const Matrix& raw = outputs[static_cast<std::size_t>(k)];
      for (Eigen::Index i = 0; i < n; ++i) {
        const GaussianPrediction g = gaussian_from_raw(raw(i, 0), raw(i, 1));
        targets.means(i, k) = g.mean;
        targets.variances(i, k) = g.variance;
      }
    }
  }
  return targets;
}

namespace {

Json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()},
          {"data", std::vector<double>(m.reshaped<Eigen::RowMajor>().begin(), m.reshaped<Eigen::RowMajor>().end())}};
}

Matrix matrix_from_json(const Json& doc) {
  const auto rows = doc.at("rows").get<Eigen::Index>();
  const auto cols = doc.at("cols").get<Eigen::Index>();
  const auto data = doc.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size()) {
    throw LoadError("matrix payload does not match its shape");
  }
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
  }
  return m;
}

}  // namespace

void save_teacher_targets(const std::filesystem::path& path, const TeacherTargets& targets) {
  Json doc = {{"format", "hydra-teacher-targets"},
              {"version", kCheckpointVersion},
              {"task", std::string(to_string(targets.task))},
              {"temperature", targets.temperature},
              {"dataset_digest", targets.digest}};
  if (targets.task == Task::classification) {
    doc["member"] = Json::array();
    for (const auto& m : targets.member) doc["member"].push_back(matrix_to_json(m));
    doc["mean"] = matrix_to_json(targets.mean);
  } else {
    doc["means"] = matrix_to_json(targets.means);
    doc["variances"] = matrix_to_json(targets.variances);
  }
  write_json_file(path, doc);
}

TeacherTargets load_teacher_targets(const std::filesystem::path& path, const std::string& expected_digest) {
  if (!std::filesystem::exists(path)) throw LoadError("no teacher-target cache at " + path.string());
  const Json doc = read_json_file(path);
  TeacherTargets targets;
  try {
    if (doc.at("format") != "hydra-teacher-targets") throw LoadError("not a teacher-target cache");
    targets.task = task_from_string(doc.at("task").get<std::string>());
    targets.temperature = doc.at("temperature").get<double>();
    targets.digest = doc.at("dataset_digest").get<std::string>();
    if (targets.task == Task::classification) {
      for (const auto& m : doc.at("member")) targets.member.push_back(matrix_from_json(m));
      targets.mean = matrix_from_json(doc.at("mean"));
    } else {
      targets.means = matrix_from_json(doc.at("means"));
      targets.variances = matrix_from_json(doc.at("variances"));
    }
  } catch (const Json::exception& e) {
    throw LoadError(std::string("malformed teacher-target cache: ") + e.what());
  }
  if (targets.digest != expected_digest) {
    throw LoadError("teacher-target cache was built for dataset " + targets.digest + ", expected " + expected_digest);
  }
  return targets;
}

namespace {

enum class Objective { kd, hydra };

Matrix gather_rows(const Matrix& m, std::span<const Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

std::vector<Eigen::Index> all_rows(Eigen::Index n) {
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = i;
  return rows;
}

/// Mean objective over `rows` for head outputs `outputs[m]` (batch rows x out);
/// fills `upstream[m]` with the gradient of that mean when requested. Under
/// Objective::kd there must be exactly one head and it sees every member.
double batch_objective(Objective objective, const std::vector<Matrix>& outputs, const TeacherTargets& targets,
                       std::span<const Eigen::Index> rows, std::vector<Matrix>* upstream) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  if (n == 0) return std::nan("");
  const std::size_t heads = outputs.size();
  const std::size_t members = targets.members();
  if (objective == Objective::hydra && heads != members) {
    throw ConfigError("hydra has " + std::to_string(heads) + " heads but the teacher has " +
                      std::to_string(members) + " members");
  }
  if (upstream) {
    upstream->clear();
    for (const auto& o : outputs) upstream->push_back(Matrix::Zero(n, o.cols()));
  }
  // Diverged parameters: report a non-finite loss so the training loop can fail loudly.
  for (const auto& o : outputs) {
    if (!o.allFinite()) return std::numeric_limits<double>::quiet_NaN();
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index r = rows[static_cast<std::size_t>(i)];
    if (targets.task == Task::classification) {
      std::vector<Vector> logits;
      for (const auto& o : outputs) logits.push_back(o.row(i).transpose());
      LogitLoss loss;
      if (objective == Objective::kd) {
        loss = kd_classification_loss(targets.mean.row(r).transpose(), logits.front(), targets.temperature);
      } else {
        std::vector<Vector> teacher;
        for (const auto& m : targets.member) teacher.push_back(m.row(r).transpose());
        loss = hydra_classification_logit_loss(teacher, logits, targets.temperature);
      }
      total += loss.value;
      if (upstream) {
        for (std::size_t h = 0; h < heads; ++h) (*upstream)[h].row(i) = inv_n * loss.grad[h].transpose();
      }
    } else {
      std::vector<GaussianPrediction> teacher;
      for (std::size_t k = 0; k < members; ++k) {
        const auto c = static_cast<Eigen::Index>(k);
        teacher.push_back({targets.means(r, c), targets.variances(r, c)});
      }
      std::vector<GaussianPrediction> predicted;
      for (const auto& o : outputs) predicted.push_back(gaussian_from_raw(o(i, 0), o(i, 1)));
      const GaussianLoss loss = objective == Objective::kd ? kd_regression_loss(teacher, predicted.front())
                                                           : hydra_regression_loss(teacher, predicted);
      total += loss.value;
      if (upstream) {
        for (std::size_t h = 0; h < heads; ++h) {
          (*upstream)[h](i, 0) = inv_n * loss.d_mean[h];
          (*upstream)[h](i, 1) = inv_n * loss.d_variance[h] * variance_raw_derivative(outputs[h](i, 1));
        }
      }
    }
  }
  return total * inv_n;
}

double hydra_dataset_objective(Objective objective, const HydraModel& hydra, const Matrix& inputs,
                               const TeacherTargets& targets) {
  if (inputs.rows() == 0) return std::nan("");
  const auto rows = all_rows(inputs.rows());
  return batch_objective(objective, head_outputs_batch(hydra, inputs), targets, rows, nullptr);
}

/// One optimizer per parameter block; Adam is elementwise so this equals a
/// single optimizer over the concatenated parameters.
struct HydraOptimizer {
  std::vector<OptimizerState> states;  // body first, then heads

  HydraOptimizer(const OptimizerConfig& config, const HydraModel& hydra) {
    states.emplace_back(config, hydra.body);
    for (const auto& head : hydra.heads) states.emplace_back(config, head);
  }

  void step(HydraModel& hydra, const HydraGradients& grads) {
    bool finite = grads.body.all_finite();
    for (const auto& g : grads.heads) finite = finite && g.all_finite();
    if (!finite) throw TrainingError("non-finite gradient");
    states[0].step(hydra.body, grads.body);
    for (std::size_t m = 0; m < hydra.heads.size(); ++m) states[m + 1].step(hydra.heads[m], grads.heads[m]);
  }
};

struct PhaseResult {
  HydraModel best;
  std::vector<EpochRecord> curve;
};

PhaseResult run_phase(Objective objective, HydraModel start, const DistillConfig& config, const Matrix& train_x,
                      const TeacherTargets& train_t, const Matrix& val_x, const TeacherTargets& val_t, int epochs,
                      std::uint64_t shuffle_seed, int phase) {
  HydraOptimizer optimizer(config.optimizer, start);
  TrainSchedule schedule{epochs, config.batch_size, config.patience, shuffle_seed};
  auto step = [&](HydraModel& params, std::span<const Eigen::Index> rows) {
    ForwardCache body_cache;
    const Matrix features = forward_batch(params.body, gather_rows(train_x, rows), &body_cache);
    std::vector<ForwardCache> head_caches(params.num_heads());
    std::vector<Matrix> outputs;
    for (std::size_t m = 0; m < params.num_heads(); ++m) {
      outputs.push_back(forward_batch(params.heads[m], features, &head_caches[m]));
    }
    std::vector<Matrix> upstream;
    const double loss = batch_objective(objective, outputs, train_t, rows, &upstream);
    if (std::isfinite(loss)) optimizer.step(params, hydra_backward(params, body_cache, head_caches, upstream));
    return loss;
  };
  auto validate = [&](const HydraModel& params) {
    return hydra_dataset_objective(objective, params, val_x, val_t);
  };
  const std::string label = "distillation phase " + std::to_string(phase);
  try {
    auto outcome = run_training(std::move(start), train_x.rows(), schedule, step, validate, label, phase);
    return {std::move(outcome.best), std::move(outcome.curve)};
  } catch (const TrainingError& e) {
    const std::string what = e.what();
    if (what.rfind(label, 0) == 0) throw;
    throw TrainingError(label + ": " + what);
  }
}

void check_distill_inputs(const Ensemble& teacher, const DistillConfig& config, const Dataset& train,
                          const Dataset& validation) {
  teacher.validate();
  train.validate();
  if (train.empty()) throw EmptyDatasetError("distillation training set is empty");
  if (teacher.task != train.task) throw InvalidInput("teacher and dataset tasks differ");
  if (train.dim() != teacher.input_dim()) {
    throw InvalidInput("dataset has " + std::to_string(train.dim()) + " features, teacher expects " +
                       std::to_string(teacher.input_dim()));
  }
  if (!validation.empty() && validation.dim() != train.dim()) {
    throw InvalidInput("validation and training feature counts differ");
  }
  if (!(config.temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (config.phase1_epochs < 0 || config.phase2_epochs < 0) throw ConfigError("epoch budgets must be non-negative");
}

TeacherTargets train_targets(const Ensemble& teacher, const Dataset& train, double temperature,
                             const TeacherTargets* cached) {
  if (!cached) return compute_teacher_targets(teacher, train, temperature);
  if (cached->digest != dataset_digest(train) || cached->temperature != temperature ||
      cached->task != teacher.task || cached->members() != teacher.size()) {
    throw InvalidInput("cached teacher targets do not belong to this dataset, temperature or teacher");
  }
  return *cached;
}

TeacherTargets targets_or_empty(const Ensemble& teacher, const Dataset& data, double temperature) {
  if (data.empty()) {
    TeacherTargets t;
    t.task = teacher.task;
    t.temperature = temperature;
    return t;
  }
  return compute_teacher_targets(teacher, data, temperature);
}

}  // namespace

double effective_temperature(const Ensemble& teacher, const DistillConfig& config) {
  return teacher.task == Task::classification ? config.temperature : 1.0;
}

double hydra_objective(const HydraModel& hydra, const Matrix& inputs, const TeacherTargets& targets) {
  return hydra_dataset_objective(Objective::hydra, hydra, inputs, targets);
}

double kd_objective(const MlpModel& student, const Matrix& inputs, const TeacherTargets& targets) {
  if (inputs.rows() == 0) return std::nan("");
  const auto rows = all_rows(inputs.rows());
  return batch_objective(Objective::kd, {forward_batch(student, inputs)}, targets, rows, nullptr);
}

HydraTrainResult two_phase_train(const Ensemble& teacher, const DistillConfig& config, const Dataset& train,
                                 const Dataset& validation, const TeacherTargets* cached) {
  check_distill_inputs(teacher, config, train, validation);
  const double temperature = effective_temperature(teacher, config);
  const TeacherTargets train_t = train_targets(teacher, train, temperature, cached);
  const TeacherTargets val_t = targets_or_empty(teacher, validation, temperature);

  std::vector<int> body_dims{static_cast<int>(train.dim())};
  body_dims.insert(body_dims.end(), config.body_hidden.begin(), config.body_hidden.end());
  std::vector<int> head_dims = config.head_hidden;
  head_dims.push_back(static_cast<int>(teacher.output_dim()));
  HydraModel start =
      HydraModel::initialized(body_dims, head_dims, config.activation, teacher.task, temperature, config.seed);

  HydraTrainResult result;
  PhaseResult phase1 = run_phase(Objective::kd, std::move(start), config, train.inputs, train_t, validation.inputs,
                                 val_t, config.phase1_epochs, derive_seed(config.seed, 1), 1);
  result.phase_boundary = static_cast<int>(phase1.curve.size());
  result.curve = std::move(phase1.curve);

  HydraModel grown = grow_heads(phase1.best, static_cast<int>(teacher.size()));
  result.loss_at_growth = hydra_objective(grown, train.inputs, train_t);
  PhaseResult phase2 = run_phase(Objective::hydra, std::move(grown), config, train.inputs, train_t,
                                 validation.inputs, val_t, config.phase2_epochs, derive_seed(config.seed, 3), 2);
  result.curve.insert(result.curve.end(), phase2.curve.begin(), phase2.curve.end());
  result.model = std::move(phase2.best);
  result.final_loss = hydra_objective(result.model, train.inputs, train_t);
  return result;
}

KdTrainResult distill_kd(const Ensemble& teacher, const DistillConfig& config, const Dataset& train,
                         const Dataset& validation, const TeacherTargets* cached) {
  check_distill_inputs(teacher, config, train, validation);
  const double temperature = effective_temperature(teacher, config);
  const TeacherTargets train_t = train_targets(teacher, train, temperature, cached);
  const TeacherTargets val_t = targets_or_empty(teacher, validation, temperature);

  std::vector<int> dims{static_cast<int>(train.dim())};
  dims.insert(dims.end(), config.student_hidden.begin(), config.student_hidden.end());
  dims.push_back(static_cast<int>(teacher.output_dim()));
  MlpModel student = MlpModel::initialized(dims, config.activation, derive_seed(config.seed, 0));
  OptimizerState optimizer(config.optimizer, student);
  TrainSchedule schedule{config.phase1_epochs, config.batch_size, config.patience, derive_seed(config.seed, 1)};
  auto step = [&](MlpModel& params, std::span<const Eigen::Index> rows) {
    ForwardCache cache;
    std::vector<Matrix> outputs{forward_batch(params, gather_rows(train.inputs, rows), &cache)};
    std::vector<Matrix> upstream;
    const double loss = batch_objective(Objective::kd, outputs, train_t, rows, &upstream);
    if (std::isfinite(loss)) optimizer.step(params, backward_batch(params, cache, upstream.front()).params);
    return loss;
  };
  auto validate = [&](const MlpModel& params) { return kd_objective(params, validation.inputs, val_t); };
  auto outcome = run_training(std::move(student), train.size(), schedule, step, validate, "knowledge distillation", 1);
  KdTrainResult result;
  result.student = std::move(outcome.best);
  result.curve = std::move(outcome.curve);
  result.final_loss = kd_objective(result.student, train.inputs, train_t);
  return result;
}

EnsemblePrediction predict(const HydraModel& hydra, const Vector& input) {
  EnsemblePrediction prediction;
  prediction.task = hydra.task;
  const auto outputs = head_outputs(hydra, input);
  if (hydra.task == Task::classification) {
    prediction.mean_probabilities = Vector::Zero(hydra.output_dim());
    for (const auto& logits : outputs) {
      prediction.member_probabilities.push_back(tempered_softmax(logits, 1.0));
      prediction.mean_probabilities += prediction.member_probabilities.back();
    }
    prediction.mean_probabilities /= static_cast<double>(outputs.size());
  } else {
    for (const auto& raw : outputs) prediction.member_gaussians.push_back(gaussian_from_raw(raw(0), raw(1)));
    prediction.mixture = mixture_moments(prediction.member_gaussians);
  }
  return prediction;
}

EnsemblePrediction predict_student(const MlpModel& student, Task task, const Vector& input) {
  if (input.size() != student.input_dim()) throw InvalidInput("input width does not match the student");
  EnsemblePrediction prediction;
  prediction.task = task;
  const Vector raw = forward(student, input);
  if (task == Task::classification) {
    prediction.mean_probabilities = tempered_softmax(raw, 1.0);
    prediction.member_probabilities.push_back(prediction.mean_probabilities);
  } else {
    if (raw.size() != 2) throw InvalidInput("regression student must emit (mean, log-variance)");
    prediction.member_gaussians.push_back(gaussian_from_raw(raw(0), raw(1)));
    prediction.mixture = prediction.member_gaussians.front();
  }
  return prediction;
}

namespace {

std::string head_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "head_%03zu.json", index);
  return buf;
}

}  // namespace

void save_hydra(const HydraModel& hydra, const std::filesystem::path& directory, const HydraManifestInfo& info) {
  hydra.validate();
  std::filesystem::create_directories(directory);
  save_model(directory / "body.json", hydra.body, {});
  Json files = Json::array();
  for (std::size_t m = 0; m < hydra.num_heads(); ++m) {
    save_model(directory / head_file_name(m), hydra.heads[m], {});
    files.push_back(head_file_name(m));
  }
  const Json manifest = {{"format", "hydra-student"},
                         {"version", kCheckpointVersion},
                         {"task", std::string(to_string(hydra.task))},
                         {"heads", hydra.num_heads()},
                         {"temperature", hydra.temperature},
                         {"phase1_epochs", info.phase1_epochs},
                         {"phase2_epochs", info.phase2_epochs},
                         {"teacher_digest", info.teacher_digest},
                         {"body", "body.json"},
                         {"head_files", files}};
  write_json_file(directory / "manifest.json", manifest);
}

HydraModel load_hydra(const std::filesystem::path& directory, HydraManifestInfo* info) {
  const auto manifest_path = directory / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw LoadError("no hydra manifest in " + directory.string());
  const Json manifest = read_json_file(manifest_path);
  HydraModel hydra;
  HydraManifestInfo meta;
  std::vector<std::string> files;
  std::size_t count = 0;
  std::string body_file;
  try {
    if (manifest.at("format") != "hydra-student") throw LoadError("not a hydra student manifest");
    if (manifest.at("version").get<int>() != kCheckpointVersion) {
      throw LoadError("unsupported hydra manifest version " + manifest.at("version").dump());
    }
    hydra.task = task_from_string(manifest.at("task").get<std::string>());
    hydra.temperature = manifest.at("temperature").get<double>();
    count = manifest.at("heads").get<std::size_t>();
    meta.phase1_epochs = manifest.value("phase1_epochs", 0);
    meta.phase2_epochs = manifest.value("phase2_epochs", 0);
    meta.teacher_digest = manifest.value("teacher_digest", std::string());
    body_file = manifest.at("body").get<std::string>();
    files = manifest.at("head_files").get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    throw LoadError(std::string("malformed hydra manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("malformed hydra manifest: ") + e.what());
  }
  if (files.size() != count) {
    throw LoadError("manifest declares " + std::to_string(count) + " heads but lists " +
                    std::to_string(files.size()) + " files");
  }
  try {
    hydra.body = load_model(directory / body_file);
  } catch (const Error& e) {
    throw LoadError(std::string("hydra body unreadable: ") + e.what());
  }
  for (std::size_t m = 0; m < count; ++m) {
    try {
      hydra.heads.push_back(load_model(directory / files[m]));
    } catch (const Error& e) {
      throw LoadError("head " + std::to_string(m) + " unreadable: " + e.what());
    }
  }
  try {
    hydra.validate();
  } catch (const InvalidInput& e) {
    throw LoadError(e.what());
  }
  if (info) *info = meta;
  return hydra;
}

}  // namespace hydra
