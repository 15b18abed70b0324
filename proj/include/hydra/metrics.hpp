#pragma once

#include "hydra/nn.hpp"

#include <cstddef>
#include <vector>

namespace hydra {

/// Throws InvalidInput unless `p` is finite, non-negative and sums to 1 (within 1e-6).
void require_distribution(const Vector& p, const char* what = "distribution");

/// Shannon entropy in nats with 0 log 0 = 0.
double entropy(const Vector& p);

/// KL(p || q) in nats; q entries are floored at 1e-12.
double categorical_kl(const Vector& p, const Vector& q);

/// Closed-form KL(a || b) between univariate Gaussians.
double gaussian_kl(const GaussianPrediction& a, const GaussianPrediction& b);

struct UncertaintyDecomposition {
  double total = 0.0;          // H(mean member prediction)
  double expected_data = 0.0;  // mean of member entropies
  double model = 0.0;          // total - expected_data
};

UncertaintyDecomposition uncertainty_decomposition(const std::vector<Vector>& members);

/// (1/C) sum_c (onehot_c - p_c)^2.
double brier_score(const Vector& predicted, int true_class);

/// Index of the largest entry, ties resolved toward the lowest index.
int argmax(const Vector& p);

struct NllResult {
  double value = 0.0;
  std::size_t floored = 0;  // predictions whose true-class probability hit the 1e-12 floor
};

NllResult classification_nll(const std::vector<Vector>& predictions, const std::vector<int>& labels);

/// log of the equal-weight mixture density (1/M) sum_m N(y; mu_m, var_m), via log-sum-exp.
double mixture_log_density(double y, const std::vector<GaussianPrediction>& components);

/// Mean negative log-likelihood of standardized targets under per-example mixtures,
/// reported on the original scale (adds log target_scale).
NllResult regression_nll(const std::vector<std::vector<GaussianPrediction>>& mixtures,
                         const Vector& targets, double target_scale = 1.0);

double accuracy(const std::vector<Vector>& predictions, const std::vector<int>& labels);

/// Mean absolute difference of per-example model uncertainty.
double mu_gap(const std::vector<double>& student_mu, const std::vector<double>& teacher_mu);

double pearson_correlation(const std::vector<double>& a, const std::vector<double>& b);

struct MetricReport {
  double accuracy = 0.0;
  double nll = 0.0;
  double brier = 0.0;
  double mean_total_uncertainty = 0.0;
  double mean_expected_data_uncertainty = 0.0;
  double mean_model_uncertainty = 0.0;
  std::size_t floored = 0;
  std::vector<UncertaintyDecomposition> per_example;
};

/// Scores per-example member predictions (outer index: example, inner: member)
/// against class labels. Accuracy, NLL and Brier use the member average.
MetricReport classification_report(const std::vector<std::vector<Vector>>& member_predictions,
                                   const std::vector<int>& labels);

}  // namespace hydra
