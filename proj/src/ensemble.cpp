#include "hydra/ensemble.hpp"

#include "hydra/checkpoint.hpp"
#include "hydra/error.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

namespace hydra {

void Ensemble::validate() const {
  if (members.empty()) throw InvalidInput("ensemble has no members");
  for (const auto& m : members) {
    if (m.input_dim() != input_dim() || m.output_dim() != output_dim()) {
      throw InvalidInput("ensemble members disagree on input/output dimensions");
    }
  }
  if (task == Task::regression && output_dim() != 2) {
    throw InvalidInput("regression members must emit (mean, log-variance)");
  }
}

GaussianPrediction mixture_moments(const std::vector<GaussianPrediction>& components) {
  if (components.empty()) throw InvalidInput("empty mixture");
  const double m = static_cast<double>(components.size());
  double mean = 0.0;
  double second = 0.0;
  for (const auto& g : components) {
    mean += g.mean;
    second += g.variance + g.mean * g.mean;
  }
  mean /= m;
  return {mean, second / m - mean * mean};
}

double gaussian_nll_raw(double target, double mean, double raw_log_variance, double* d_mean,
                        double* d_raw) {
  const GaussianPrediction g = gaussian_from_raw(mean, raw_log_variance);
  const double diff = target - g.mean;
  const double nll = 0.5 * std::log(2.0 * std::numbers::pi * g.variance) + diff * diff / (2.0 * g.variance);
  if (d_mean) *d_mean = -diff / g.variance;
  if (d_raw) {
    const double d_var = 0.5 / g.variance - diff * diff / (2.0 * g.variance * g.variance);
    *d_raw = d_var * variance_raw_derivative(raw_log_variance);
  }
  return nll;
}

namespace {

/// Mean loss over `rows` and the upstream gradient for the whole batch.
double supervised_loss(const Dataset& data, std::span<const Eigen::Index> rows, const Matrix& outputs,
                       Matrix* upstream) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  double total = 0.0;
  if (upstream) upstream->setZero(n, outputs.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index r = rows[static_cast<std::size_t>(i)];
    if (data.task == Task::classification) {
      const Vector p = tempered_softmax(outputs.row(i).transpose(), 1.0);
      const int y = data.labels[static_cast<std::size_t>(r)];
      total -= std::log(std::max(p(y), kLogEpsilon));
      if (upstream) {
        upstream->row(i) = p.transpose();
        (*upstream)(i, y) -= 1.0;
      }
    } else {
      double dm = 0.0, ds = 0.0;
      total += gaussian_nll_raw(data.targets(r), outputs(i, 0), outputs(i, 1), &dm, &ds);
      if (upstream) {
        (*upstream)(i, 0) = dm;
        (*upstream)(i, 1) = ds;
      }
    }
  }
  if (upstream && n > 0) *upstream /= static_cast<double>(n);
  return n > 0 ? total / static_cast<double>(n) : 0.0;
}

Matrix gather_rows(const Matrix& inputs, std::span<const Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), inputs.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = inputs.row(rows[i]);
  return out;
}

double dataset_loss(const MlpModel& model, const Dataset& data) {
  if (data.empty()) return std::nan("");
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(data.size()));
  for (Eigen::Index i = 0; i < data.size(); ++i) rows[static_cast<std::size_t>(i)] = i;
  return supervised_loss(data, rows, forward_batch(model, data.inputs), nullptr);
}

std::vector<int> member_dims(const Dataset& train, const EnsembleConfig& config) {
  std::vector<int> dims{static_cast<int>(train.dim())};
  dims.insert(dims.end(), config.hidden.begin(), config.hidden.end());
  dims.push_back(train.task == Task::classification ? train.num_classes : 2);
  return dims;
}

}  // namespace

MlpModel train_member(const Dataset& train, const Dataset& validation, const EnsembleConfig& config,
                      std::uint64_t seed, std::vector<EpochRecord>* curve) {
  train.validate();
  if (train.empty()) throw EmptyDatasetError("training set is empty");
  if (train.task == Task::classification && train.num_classes < 2) {
    throw ConfigError("classification needs at least two classes");
  }
  const auto dims = member_dims(train, config);
  MlpModel model = MlpModel::initialized(dims, config.activation, derive_seed(seed, 0));
  OptimizerState optimizer(config.optimizer, model);
  TrainSchedule schedule{config.max_epochs, config.batch_size, config.patience, derive_seed(seed, 1)};
  auto step = [&](MlpModel& params, std::span<const Eigen::Index> rows) {
    ForwardCache cache;
    const Matrix outputs = forward_batch(params, gather_rows(train.inputs, rows), &cache);
    Matrix upstream;
    const double loss = supervised_loss(train, rows, outputs, &upstream);
    if (std::isfinite(loss)) optimizer.step(params, backward_batch(params, cache, upstream).params);
    return loss;
  };
  auto validate = [&](const MlpModel& params) { return dataset_loss(params, validation); };
  auto outcome = run_training(std::move(model), train.size(), schedule, step, validate,
                              "ensemble member (seed " + std::to_string(seed) + ")");
  if (curve) *curve = std::move(outcome.curve);
  return std::move(outcome.best);
}

Ensemble train_ensemble(const Dataset& train, const Dataset& validation, const EnsembleConfig& config) {
  if (config.seeds.empty()) throw ConfigError("ensemble needs at least one member seed");
  if (std::set<std::uint64_t>(config.seeds.begin(), config.seeds.end()).size() != config.seeds.size()) {
    throw ConfigError("ensemble member seeds must be distinct");
  }
  if (!validation.empty() && validation.dim() != train.dim()) {
    throw InvalidInput("validation and training feature counts differ");
  }
  Ensemble ensemble;
  ensemble.task = train.task;
  ensemble.seeds = config.seeds;
  for (std::uint64_t seed : config.seeds) {
    ensemble.members.push_back(train_member(train, validation, config, seed));
  }
  return ensemble;
}

std::vector<Matrix> member_outputs(const Ensemble& ensemble, const Matrix& inputs) {
  ensemble.validate();
  std::vector<Matrix> outputs;
  for (const auto& member : ensemble.members) {
    Matrix raw = forward_batch(member, inputs);
    outputs.push_back(ensemble.task == Task::classification ? tempered_softmax_rows(raw, 1.0) : raw);
  }
  return outputs;
}

EnsemblePrediction predict(const Ensemble& ensemble, const Vector& input) {
  ensemble.validate();
  if (input.size() != ensemble.input_dim()) {
    throw InvalidInput("input has " + std::to_string(input.size()) + " features, ensemble expects " +
                       std::to_string(ensemble.input_dim()));
  }
  EnsemblePrediction prediction;
  prediction.task = ensemble.task;
  if (ensemble.task == Task::classification) {
    prediction.mean_probabilities = Vector::Zero(ensemble.output_dim());
    for (const auto& member : ensemble.members) {
      prediction.member_probabilities.push_back(tempered_softmax(forward(member, input), 1.0));
      prediction.mean_probabilities += prediction.member_probabilities.back();
    }
    prediction.mean_probabilities /= static_cast<double>(ensemble.size());
  } else {
    for (const auto& member : ensemble.members) {
      const Vector raw = forward(member, input);
      prediction.member_gaussians.push_back(gaussian_from_raw(raw(0), raw(1)));
    }
    prediction.mixture = mixture_moments(prediction.member_gaussians);
  }
  return prediction;
}

std::string member_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "member_%03zu.json", index);
  return buf;
}

void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& directory) {
  ensemble.validate();
  std::filesystem::create_directories(directory);
  Json files = Json::array();
  for (std::size_t m = 0; m < ensemble.size(); ++m) {
    const std::uint64_t seed = m < ensemble.seeds.size() ? ensemble.seeds[m] : 0;
    save_model(directory / member_file_name(m), ensemble.members[m], {seed, ensemble.config_digest});
    files.push_back(member_file_name(m));
  }
  const Json manifest = {{"format", "hydra-ensemble"},
                         {"version", kCheckpointVersion},
                         {"task", std::string(to_string(ensemble.task))},
                         {"members", ensemble.size()},
                         {"architecture", ensemble.members.front().dims()},
                         {"activation", std::string(to_string(ensemble.members.front().layers().front().activation))},
                         {"seeds", ensemble.seeds},
                         {"config_digest", ensemble.config_digest},
                         {"files", files}};
  write_json_file(directory / "manifest.json", manifest);
}

Ensemble load_ensemble(const std::filesystem::path& directory) {
  const auto manifest_path = directory / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw LoadError("no ensemble manifest in " + directory.string());
  }
  const Json manifest = read_json_file(manifest_path);
  Ensemble ensemble;
  std::size_t count = 0;
  std::vector<std::string> files;
  try {
    if (manifest.at("format") != "hydra-ensemble") throw LoadError("not an ensemble manifest");
    if (manifest.at("version").get<int>() != kCheckpointVersion) {
      throw LoadError("unsupported ensemble version " + manifest.at("version").dump());
    }
    ensemble.task = task_from_string(manifest.at("task").get<std::string>());
    count = manifest.at("members").get<std::size_t>();
    ensemble.seeds = manifest.at("seeds").get<std::vector<std::uint64_t>>();
    ensemble.config_digest = manifest.value("config_digest", std::string());
    files = manifest.at("files").get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    throw LoadError(std::string("malformed ensemble manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("malformed ensemble manifest: ") + e.what());
  }
  if (files.size() != count) {
    throw LoadError("manifest declares " + std::to_string(count) + " members but lists " +
                    std::to_string(files.size()) + " files");
  }
  for (std::size_t m = 0; m < count; ++m) {
    const auto path = directory / files[m];
    if (!std::filesystem::exists(path)) {
      throw LoadError("member " + std::to_string(m) + " checkpoint missing: " + path.string());
    }
    try {
      ensemble.members.push_back(load_model(path));
    } catch (const Error& e) {
      throw LoadError("member " + std::to_string(m) + " checkpoint unreadable: " + e.what());
    }
  }
  try {
    ensemble.validate();
  } catch (const InvalidInput& e) {
    throw LoadError(e.what());
  }
  return ensemble;
}

}  // namespace hydra
