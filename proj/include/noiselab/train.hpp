// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "noiselab/dataset.hpp"
#include "noiselab/model.hpp"

namespace noiselab {

struct OptimizerConfig {
  double alpha0 = 0.04;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

struct OptimizerState {
  OptimizerConfig cfg;
  std::vector<std::vector<double>> velocity;

  void init(const OptimizerConfig& c, const std::vector<NamedParam>& params);
};

struct ScheduleConfig {
  long long total_steps = 1;
  double alpha0 = 0.04;
};

/// alpha(t) = alpha0 * (1 + cos(pi t / T)) / 2, monotonically decreasing.
double cosine_lr(long long t, const ScheduleConfig& s);

/// v <- mu v + g + lambda theta; theta <- theta - lr v. Weight decay is the
/// coupled additive form, applied to every trainable parameter.
void sgd_step(std::vector<NamedParam>& params, OptimizerState& state, double lr);

/// Mean over the batch of -log softmax(logits)[label], max-stabilized.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels);

double accuracy(const Tensor& logits, const std::vector<int>& labels);

struct TrainOptions {
  int epochs = 10;
  int batch_size = 64;
  OptimizerConfig optimizer;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double lr_last = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
};

struct TrainReport {
  double initial_eval_acc = 0.0;
  std::vector<EpochStats> epochs;
  long long param_count = 0;
  bool diverged = false;
  std::string divergence_note;  // snapshot: epoch/step/param of the blow-up
};

/// Epoch loop: shuffled minibatches, cosine schedule over all steps,
/// noise-on training forward, noise-free eval per epoch. Deterministic for a
/// fixed seed; batch order, noise masks and init use independent streams.
TrainReport train(Model& model, const Dataset& train_data, const Dataset& test_data,
                  const TrainOptions& opts, std::uint64_t seed);

double evaluate_accuracy(Model& model, const Dataset& data, Rng& rng, int eval_batch = 256);

}  // namespace noiselab
