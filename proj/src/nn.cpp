#include "hydra/nn.hpp"

#include "hydra/error.hpp"
#include "hydra/random.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hydra {

namespace {

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix activate(const Matrix& pre, Activation activation) {
  switch (activation) {
    case Activation::relu:
      return pre.cwiseMax(0.0);
    case Activation::softplus:
      return pre.unaryExpr([](double x) { return softplus(x); });
    case Activation::identity:
      return pre;
  }
  return pre;
}

Matrix activation_derivative(const Matrix& pre, Activation activation) {
  switch (activation) {
    case Activation::relu:
      return pre.unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
    case Activation::softplus:
      return pre.unaryExpr([](double x) { return sigmoid(x); });
    case Activation::identity:
      return Matrix::Ones(pre.rows(), pre.cols());
  }
  return Matrix::Ones(pre.rows(), pre.cols());
}

void require_same_shape(const MlpModel& model, const MlpGradients& gradients) {
  const auto& layers = model.layers();
  if (gradients.weight.size() != layers.size() || gradients.bias.size() != layers.size()) {
    throw InvalidInput("gradient layer count does not match model");
  }
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (gradients.weight[k].rows() != layers[k].weight.rows() ||
        gradients.weight[k].cols() != layers[k].weight.cols() ||
        gradients.bias[k].size() != layers[k].bias.size()) {
      throw InvalidInput("gradient shape mismatch at layer " + std::to_string(k));
    }
  }
}

}  // namespace

std::string_view to_string(Activation activation) {
  switch (activation) {
    case Activation::relu:
      return "relu";
    case Activation::softplus:
      return "softplus";
    case Activation::identity:
      return "identity";
  }
  return "identity";
}

Activation activation_from_string(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "softplus") return Activation::softplus;
  if (name == "identity") return Activation::identity;
  throw InvalidInput("unknown activation '" + std::string(name) + "'");
}

MlpModel::MlpModel(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& layer = layers_[k];
    if (layer.weight.rows() == 0 || layer.weight.cols() == 0) {
      throw InvalidInput("layer " + std::to_string(k) + " has an empty weight matrix");
    }
    if (layer.bias.size() != layer.weight.rows()) {
      throw InvalidInput("layer " + std::to_string(k) + " bias length does not match outputs");
    }
    if (k > 0 && layers_[k - 1].out_dim() != layer.in_dim()) {
      throw InvalidInput("layer " + std::to_string(k) + " input dim " +
                         std::to_string(layer.in_dim()) + " does not chain with previous output " +
                         std::to_string(layers_[k - 1].out_dim()));
    }
  }
  if (!all_finite()) throw InvalidInput("model parameters must be finite");
}

MlpModel MlpModel::initialized(std::span<const int> dims, Activation hidden_activation,
                               std::uint64_t seed, Activation output_activation) {
  if (dims.size() < 2) throw InvalidInput("an MLP needs at least input and output dims");
  for (int d : dims) {
    if (d <= 0) throw InvalidInput("layer dims must be positive");
  }
  Rng rng(seed);
  std::vector<DenseLayer> layers;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const bool last = k + 2 == dims.size();
    DenseLayer layer;
    layer.activation = last ? output_activation : hidden_activation;
    const double fan_in = dims[k];
    const double fan_out = dims[k + 1];
    const double limit = layer.activation == Activation::relu
                             ? std::sqrt(6.0 / fan_in)
                             : std::sqrt(6.0 / (fan_in + fan_out));
    layer.weight.resize(dims[k + 1], dims[k]);
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        layer.weight(r, c) = rng.uniform(-limit, limit);
      }
    }
    layer.bias = Vector::Zero(dims[k + 1]);
    layers.push_back(std::move(layer));
  }
  return MlpModel(std::move(layers));
}

Eigen::Index MlpModel::input_dim() const {
  return layers_.empty() ? 0 : layers_.front().in_dim();
}

Eigen::Index MlpModel::output_dim() const {
  return layers_.empty() ? 0 : layers_.back().out_dim();
}

std::vector<int> MlpModel::dims() const {
  std::vector<int> dims;
  if (layers_.empty()) return dims;
  dims.push_back(static_cast<int>(input_dim()));
  for (const auto& layer : layers_) dims.push_back(static_cast<int>(layer.out_dim()));
  return dims;
}

bool MlpModel::all_finite() const {
  return std::all_of(layers_.begin(), layers_.end(), [](const DenseLayer& layer) {
    return layer.weight.allFinite() && layer.bias.allFinite();
  });
}

bool operator==(const MlpModel& a, const MlpModel& b) {
  if (a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t k = 0; k < a.layers_.size(); ++k) {
    const auto& x = a.layers_[k];
    const auto& y = b.layers_[k];
    if (x.activation != y.activation || x.weight.rows() != y.weight.rows() ||
        x.weight.cols() != y.weight.cols() || x.weight != y.weight || x.bias != y.bias) {
      return false;
    }
  }
  return true;
}

MlpGradients MlpGradients::zeros_like(const MlpModel& model) {
  MlpGradients g;
  for (const auto& layer : model.layers()) {
    g.weight.push_back(Matrix::Zero(layer.weight.rows(), layer.weight.cols()));
    g.bias.push_back(Vector::Zero(layer.bias.size()));
  }
  return g;
}

void MlpGradients::add_scaled(const MlpGradients& other, double factor) {
  if (other.weight.size() != weight.size()) throw InvalidInput("gradient layer count mismatch");
  for (std::size_t k = 0; k < weight.size(); ++k) {
    weight[k] += factor * other.weight[k];
    bias[k] += factor * other.bias[k];
  }
}

void MlpGradients::scale(double factor) {
  for (auto& w : weight) w *= factor;
  for (auto& b : bias) b *= factor;
}

bool MlpGradients::all_finite() const {
  return std::all_of(weight.begin(), weight.end(), [](const Matrix& m) { return m.allFinite(); }) &&
         std::all_of(bias.begin(), bias.end(), [](const Vector& v) { return v.allFinite(); });
}

Matrix forward_batch(const MlpModel& model, const Matrix& inputs, ForwardCache* cache) {
  if (model.empty()) throw InvalidInput("forward on an empty model");
  if (inputs.cols() != model.input_dim()) {
    throw InvalidInput("input has " + std::to_string(inputs.cols()) + " features, model expects " +
                       std::to_string(model.input_dim()));
  }
  if (cache) {
    cache->pre.clear();
    cache->post.clear();
    cache->post.push_back(inputs);
  }
  Matrix current = inputs;
  for (const auto& layer : model.layers()) {
    Matrix pre = current * layer.weight.transpose();
    pre.rowwise() += layer.bias.transpose();
    current = activate(pre, layer.activation);
    if (cache) {
      cache->pre.push_back(std::move(pre));
      cache->post.push_back(current);
    }
  }
  return current;
}

Vector forward(const MlpModel& model, const Vector& input) {
  if (input.size() != model.input_dim()) {
    throw InvalidInput("input has " + std::to_string(input.size()) + " features, model expects " +
                       std::to_string(model.input_dim()));
  }
  return forward_batch(model, input.transpose()).row(0).transpose();
}

BackwardResult backward_batch(const MlpModel& model, const ForwardCache& cache,
                              const Matrix& upstream) {
  const auto& layers = model.layers();
  if (cache.pre.size() != layers.size() || cache.post.size() != layers.size() + 1) {
    throw InvalidInput("forward cache does not belong to this model");
  }
  const Eigen::Index rows = cache.post.front().rows();
  if (upstream.rows() != rows || upstream.cols() != model.output_dim()) {
    throw InvalidInput("upstream gradient shape does not match model output");
  }
  BackwardResult result{MlpGradients::zeros_like(model), Matrix()};
  Matrix delta = upstream;
  for (std::size_t k = layers.size(); k-- > 0;) {
    const auto& layer = layers[k];
    if (layer.activation != Activation::identity) {
      delta = delta.cwiseProduct(activation_derivative(cache.pre[k], layer.activation));
    }
    result.params.weight[k].noalias() = delta.transpose() * cache.post[k];
    result.params.bias[k] = delta.colwise().sum().transpose();
    delta = delta * layer.weight;
  }
  result.input_grad = std::move(delta);
  return result;
}

MlpGradients backward(const MlpModel& model, const Vector& input, const Vector& upstream) {
  if (upstream.size() != model.output_dim()) {
    throw InvalidInput("upstream gradient has length " + std::to_string(upstream.size()) +
                       ", model output is " + std::to_string(model.output_dim()));
  }
  ForwardCache cache;
  if (input.size() != model.input_dim()) throw InvalidInput("input dimension mismatch");
  forward_batch(model, input.transpose(), &cache);
  return backward_batch(model, cache, upstream.transpose()).params;
}

Vector tempered_softmax(const Vector& logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidInput("temperature must be positive and finite");
  }
  if (logits.size() == 0) throw InvalidInput("softmax of an empty logit vector");
  const Vector scaled = logits / temperature;
  const Vector shifted = (scaled.array() - scaled.maxCoeff()).exp();
  return shifted / shifted.sum();
}

Matrix tempered_softmax_rows(const Matrix& logits, double temperature) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    out.row(i) = tempered_softmax(logits.row(i).transpose(), temperature).transpose();
  }
  return out;
}

GaussianPrediction gaussian_from_raw(double mean, double raw_log_variance) {
  const double variance = std::clamp(std::exp(raw_log_variance), kMinVariance, kMaxVariance);
  return {mean, variance};
}

double variance_raw_derivative(double raw_log_variance) {
  const double v = std::exp(raw_log_variance);
  return (v < kMinVariance || v > kMaxVariance) ? 0.0 : v;
}

OptimizerState::OptimizerState(OptimizerConfig config, const MlpModel& model)
    : config_(config),
      first_moment_(MlpGradients::zeros_like(model)),
      second_moment_(MlpGradients::zeros_like(model)) {
  if (!(config_.learning_rate > 0.0)) throw InvalidInput("learning rate must be positive");
}

void OptimizerState::step(MlpModel& model, const MlpGradients& gradients) {
  require_same_shape(model, gradients);
  if (!gradients.all_finite()) {
    throw TrainingError("optimizer step rejected: non-finite gradient at step " +
                        std::to_string(steps_ + 1));
  }
  auto& layers = model.mutable_layers();
  const double lr = config_.learning_rate;
  ++steps_;
  if (config_.kind == OptimizerKind::sgd) {
    for (std::size_t k = 0; k < layers.size(); ++k) {
      layers[k].weight -= lr * gradients.weight[k];
      layers[k].bias -= lr * gradients.bias[k];
    }
    return;
  }
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double step_size = lr / correction1;
  const double eps = config_.epsilon;
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    param.array() -= step_size * m.array() / ((v.array() / correction2).sqrt() + eps);
  };
  for (std::size_t k = 0; k < layers.size(); ++k) {
    update(layers[k].weight, first_moment_.weight[k], second_moment_.weight[k], gradients.weight[k]);
    update(layers[k].bias, first_moment_.bias[k], second_moment_.bias[k], gradients.bias[k]);
  }
}

std::size_t count_params(const MlpModel& model) {
  std::size_t total = 0;
  for (const auto& layer : model.layers()) {
    total += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
  }
  return total;
}

}  // namespace hydra
