#include "hydra/metrics.hpp"

#include "hydra/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace hydra {

void require_distribution(const Vector& p, const char* what) {
  if (p.size() == 0) throw InvalidInput(std::string(what) + " is empty");
  if (!p.allFinite() || p.minCoeff() < 0.0) {
    throw InvalidInput(std::string(what) + " has negative or non-finite entries");
  }
  if (std::abs(p.sum() - 1.0) > 1e-6) {
    throw InvalidInput(std::string(what) + " sums to " + std::to_string(p.sum()));
  }
}

double entropy(const Vector& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) > 0.0) h -= p(i) * std::log(p(i));
  }
  return h;
}

double categorical_kl(const Vector& p, const Vector& q) {
  require_distribution(p, "p");
  require_distribution(q, "q");
  if (p.size() != q.size()) throw InvalidInput("KL arguments differ in length");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) > 0.0) kl += p(i) * (std::log(p(i)) - std::log(std::max(q(i), kLogEpsilon)));
  }
  return kl;
}

double gaussian_kl(const GaussianPrediction& a, const GaussianPrediction& b) {
  if (!(a.variance > 0.0) || !(b.variance > 0.0)) throw InvalidInput("variances must be positive");
  const double diff = a.mean - b.mean;
  return 0.5 * std::log(b.variance / a.variance) + (a.variance + diff * diff) / (2.0 * b.variance) - 0.5;
}

UncertaintyDecomposition uncertainty_decomposition(const std::vector<Vector>& members) {
  if (members.empty()) throw InvalidInput("need at least one member prediction");
  for (const auto& p : members) {
    require_distribution(p, "member prediction");
    if (p.size() != members.front().size()) throw InvalidInput("member class counts differ");
  }
  const bool identical = std::all_of(members.begin(), members.end(),
                                     [&](const Vector& p) { return p == members.front(); });
  if (identical) {
    const double h = entropy(members.front());
    return {h, h, 0.0};
  }
  Vector mean = Vector::Zero(members.front().size());
  double expected = 0.0;
  for (const auto& p : members) {
    mean += p;
    expected += entropy(p);
  }
  const double m = static_cast<double>(members.size());
  mean /= m;
  expected /= m;
  const double total = entropy(mean);
  return {total, expected, total - expected};
}

double brier_score(const Vector& predicted, int true_class) {
  require_distribution(predicted, "prediction");
  if (true_class < 0 || true_class >= predicted.size()) {
    throw InvalidInput("class " + std::to_string(true_class) + " out of range");
  }
  double sum = 0.0;
  for (Eigen::Index c = 0; c < predicted.size(); ++c) {
    const double t = c == true_class ? 1.0 : 0.0;
    sum += (t - predicted(c)) * (t - predicted(c));
  }
  return sum / static_cast<double>(predicted.size());
}

int argmax(const Vector& p) {
  int best = 0;
  for (Eigen::Index i = 1; i < p.size(); ++i) {
    if (p(i) > p(best)) best = static_cast<int>(i);
  }
  return best;
}

NllResult classification_nll(const std::vector<Vector>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) throw InvalidInput("prediction and label counts differ");
  NllResult result;
  if (predictions.empty()) return result;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= predictions[i].size()) throw InvalidInput("label out of range");
    double p = predictions[i](y);
    if (p < kLogEpsilon) {
      p = kLogEpsilon;
      ++result.floored;
    }
    result.value -= std::log(p);
  }
  result.value /= static_cast<double>(predictions.size());
  return result;
}

double mixture_log_density(double y, const std::vector<GaussianPrediction>& components) {
  if (components.empty()) throw InvalidInput("empty mixture");
  std::vector<double> logs;
  logs.reserve(components.size());
  for (const auto& g : components) {
    if (!(g.variance > 0.0)) throw InvalidInput("variances must be positive");
    const double d = y - g.mean;
    logs.push_back(-0.5 * d * d / g.variance - 0.5 * std::log(2.0 * std::numbers::pi * g.variance));
  }
  const double top = *std::max_element(logs.begin(), logs.end());
  double sum = 0.0;
  for (double l : logs) sum += std::exp(l - top);
  return top + std::log(sum / static_cast<double>(components.size()));
}

NllResult regression_nll(const std::vector<std::vector<GaussianPrediction>>& mixtures,
                         const Vector& targets, double target_scale) {
  if (static_cast<Eigen::Index>(mixtures.size()) != targets.size()) {
    throw InvalidInput("prediction and target counts differ");
  }
  NllResult result;
  if (mixtures.empty()) return result;
  for (std::size_t i = 0; i < mixtures.size(); ++i) {
    result.value -= mixture_log_density(targets(static_cast<Eigen::Index>(i)), mixtures[i]);
  }
  result.value = result.value / static_cast<double>(mixtures.size()) + std::log(target_scale);
  return result;
}

double accuracy(const std::vector<Vector>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) throw InvalidInput("prediction and label counts differ");
  if (predictions.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) correct += argmax(predictions[i]) == labels[i];
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

double mu_gap(const std::vector<double>& student_mu, const std::vector<double>& teacher_mu) {
  if (student_mu.size() != teacher_mu.size()) throw InvalidInput("mu_gap inputs differ in length");
  if (student_mu.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < student_mu.size(); ++i) sum += std::abs(student_mu[i] - teacher_mu[i]);
  return sum / static_cast<double>(student_mu.size());
}

double pearson_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw InvalidInput("correlation needs equal lengths >= 2");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

MetricReport classification_report(const std::vector<std::vector<Vector>>& member_predictions,
                                   const std::vector<int>& labels) {
  if (member_predictions.size() != labels.size()) throw InvalidInput("prediction and label counts differ");
  MetricReport report;
  if (labels.empty()) return report;
  std::vector<Vector> mean_predictions;
  mean_predictions.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& members = member_predictions[i];
    const auto decomposition = uncertainty_decomposition(members);
    report.per_example.push_back(decomposition);
    report.mean_total_uncertainty += decomposition.total;
    report.mean_expected_data_uncertainty += decomposition.expected_data;
    report.mean_model_uncertainty += decomposition.model;
    Vector mean = Vector::Zero(members.front().size());
    for (const auto& p : members) mean += p;
    mean /= static_cast<double>(members.size());
    report.brier += brier_score(mean, labels[i]);
    mean_predictions.push_back(std::move(mean));
  }
  const double n = static_cast<double>(labels.size());
  report.mean_total_uncertainty /= n;
  report.mean_expected_data_uncertainty /= n;
  report.mean_model_uncertainty /= n;
  report.brier /= n;
  report.accuracy = accuracy(mean_predictions, labels);
  const auto nll = classification_nll(mean_predictions, labels);
  report.nll = nll.value;
  report.floored = nll.floored;
  return report;
}

}  // namespace hydra
