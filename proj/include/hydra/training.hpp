#pragma once

#include "hydra/error.hpp"
#include "hydra/random.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace hydra {

struct TrainSchedule {
  int max_epochs = 200;
  int batch_size = 64;
  int patience = 20;  // epochs without validation improvement before stopping
  std::uint64_t shuffle_seed = 0;
};

struct EpochRecord {
  int phase = 0;
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

template <typename Params>
struct TrainOutcome {
  Params best;
  double best_validation = std::numeric_limits<double>::infinity();
  int best_epoch = 0;  // 0 means the initial parameters were kept
  std::vector<EpochRecord> curve;
};

/// Minibatch loop with early stopping on validation loss.
///
/// `batch_step(params, rows)` performs one optimizer update on the given
/// training rows and returns the batch's mean loss. `validation_loss(params)`
/// scores a snapshot; NaN means "no validation data", in which case the epoch's
/// mean training loss is used instead. The snapshot with the lowest validation
/// loss is returned. A non-finite training loss raises TrainingError tagged with
/// `label`.
template <typename Params, typename BatchStep, typename ValidationLoss>
TrainOutcome<Params> run_training(Params params, Eigen::Index n_train, const TrainSchedule& schedule,
                                  BatchStep&& batch_step, ValidationLoss&& validation_loss,
                                  const std::string& label, int phase = 0) {
  TrainOutcome<Params> outcome;
  outcome.best = params;
  const double initial = validation_loss(params);
  outcome.best_validation = std::isnan(initial) ? std::numeric_limits<double>::infinity() : initial;
  if (n_train == 0 || schedule.max_epochs <= 0) return outcome;

  Rng rng(schedule.shuffle_seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n_train));
  for (Eigen::Index i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;
  const auto batch = static_cast<std::size_t>(std::max(1, schedule.batch_size));
  int since_best = 0;
  for (int epoch = 1; epoch <= schedule.max_epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t count = std::min(batch, order.size() - start);
      const double loss = batch_step(params, std::span<const Eigen::Index>(order.data() + start, count));
      if (!std::isfinite(loss)) {
        throw TrainingError(label + ": non-finite loss at epoch " + std::to_string(epoch));
      }
      total += loss * static_cast<double>(count);
    }
    const double train_loss = total / static_cast<double>(order.size());
    double val = validation_loss(params);
    if (std::isnan(val)) val = train_loss;
    if (!std::isfinite(val)) {
      throw TrainingError(label + ": non-finite validation loss at epoch " + std::to_string(epoch));
    }
    outcome.curve.push_back({phase, epoch, train_loss, val});
    if (val < outcome.best_validation) {
      outcome.best_validation = val;
      outcome.best = params;
      outcome.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= schedule.patience) {
      break;
    }
  }
  return outcome;
}

}  // namespace hydra
