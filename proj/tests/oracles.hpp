#pragma once

// Reference computations used only by tests. Nothing here calls into the
// library's loss or metric code paths.

#include "hydra/nn.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

namespace hydra::testing {

/// Central finite difference of a scalar function of a vector.
inline Vector finite_difference(const std::function<double(const Vector&)>& f, Vector x,
                                double step = 1e-5) {
  Vector grad(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x(i);
    x(i) = saved + step;
    const double up = f(x);
    x(i) = saved - step;
    const double down = f(x);
    x(i) = saved;
    grad(i) = (up - down) / (2.0 * step);
  }
  return grad;
}

/// max |a-b| / max(1, |a|, |b|) style relative error over all entries.
inline double relative_error(const Vector& analytic, const Vector& numeric) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double scale = std::max({1e-6, std::abs(analytic(i)), std::abs(numeric(i))});
    worst = std::max(worst, std::abs(analytic(i) - numeric(i)) / scale);
  }
  return worst;
}

inline double normal_pdf(double y, double mean, double variance) {
  return std::exp(-0.5 * (y - mean) * (y - mean) / variance) /
         std::sqrt(2.0 * std::numbers::pi * variance);
}

inline double normal_log_pdf(double y, double mean, double variance) {
  return -0.5 * (y - mean) * (y - mean) / variance - 0.5 * std::log(2.0 * std::numbers::pi * variance);
}

/// Composite Simpson rule on [lo, hi] with `intervals` (even) panels.
inline double simpson(const std::function<double(double)>& f, double lo, double hi,
                      int intervals = 20000) {
  if (intervals % 2) ++intervals;
  const double h = (hi - lo) / intervals;
  double sum = f(lo) + f(hi);
  for (int i = 1; i < intervals; ++i) sum += (i % 2 ? 4.0 : 2.0) * f(lo + i * h);
  return sum * h / 3.0;
}

/// -integral N(y; ma, va) log N(y; mb, vb) dy over [ma - 12 sa, ma + 12 sa].
inline double gaussian_cross_entropy_quadrature(double ma, double va, double mb, double vb) {
  const double sa = std::sqrt(va);
  return -simpson([&](double y) { return normal_pdf(y, ma, va) * normal_log_pdf(y, mb, vb); },
                  ma - 12.0 * sa, ma + 12.0 * sa);
}

/// integral N_a log(N_a / N_b) over the same window.
inline double gaussian_kl_quadrature(double ma, double va, double mb, double vb) {
  const double sa = std::sqrt(va);
  return simpson(
      [&](double y) {
        return normal_pdf(y, ma, va) * (normal_log_pdf(y, ma, va) - normal_log_pdf(y, mb, vb));
      },
      ma - 12.0 * sa, ma + 12.0 * sa);
}

/// Direct entropy in nats, 0 log 0 = 0.
inline double entropy_direct(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

/// Flattens model parameters (weights row-major then bias, layer by layer).
inline Vector flatten(const MlpModel& model) {
  std::vector<double> values;
  for (const auto& layer : model.layers()) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) values.push_back(layer.weight(r, c));
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) values.push_back(layer.bias(i));
  }
  return Eigen::Map<Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

inline Vector flatten(const MlpGradients& g) {
  std::vector<double> values;
  for (std::size_t k = 0; k < g.weight.size(); ++k) {
    for (Eigen::Index r = 0; r < g.weight[k].rows(); ++r)
      for (Eigen::Index c = 0; c < g.weight[k].cols(); ++c) values.push_back(g.weight[k](r, c));
    for (Eigen::Index i = 0; i < g.bias[k].size(); ++i) values.push_back(g.bias[k](i));
  }
  return Eigen::Map<Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

inline MlpModel unflatten(const MlpModel& shape, const Vector& values) {
  MlpModel out = shape;
  Eigen::Index at = 0;
  for (auto& layer : out.mutable_layers()) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = values(at++);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = values(at++);
  }
  return out;
}

}  // namespace hydra::testing
