// SPDX-License-Identifier: Apache-2.0
#include "noiselab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace noiselab {

void OptimizerState::init(const OptimizerConfig& c, const std::vector<NamedParam>& params) {
  if (c.momentum < 0.0 || c.momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
  if (c.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  cfg = c;
  velocity.clear();
  for (const auto& p : params) {
    velocity.emplace_back(static_cast<size_t>(p.tensor.size()), 0.0);
  }
}

double cosine_lr(long long t, const ScheduleConfig& s) {
  if (s.total_steps < 1) throw ConfigError("schedule needs total_steps >= 1");
  if (t < 0 || t > s.total_steps) {
    throw ContractError("schedule step " + std::to_string(t) + " outside [0, " +
                        std::to_string(s.total_steps) + "]");
  }
  const double x = static_cast<double>(t) / static_cast<double>(s.total_steps);
  return s.alpha0 * (1.0 + std::cos(3.14159265358979323846 * x)) / 2.0;
}

void sgd_step(std::vector<NamedParam>& params, OptimizerState& state, double lr) {
  if (params.size() != state.velocity.size()) {
    throw ContractError("optimizer state does not match parameter list");
  }
  const double mu = state.cfg.momentum;
  const double wd = state.cfg.weight_decay;
  for (size_t k = 0; k < params.size(); ++k) {
    Tensor& t = params[k].tensor;
    auto& theta = t.mutable_values();
    auto& vel = state.velocity[k];
    const std::vector<double>* g = t.has_grad() ? &t.grad() : nullptr;
    for (size_t i = 0; i < theta.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      if (!std::isfinite(gi)) {
        throw NumericError("non-finite gradient in parameter " + params[k].name);
      }
      vel[i] = mu * vel[i] + gi + wd * theta[i];
      theta[i] -= lr * vel[i];
    }
  }
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross entropy expects [batch, classes] logits, got " +
                     shape_str(logits.shape()));
  }
  const int b = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != b) {
    throw DataError("label count " + std::to_string(labels.size()) + " does not match batch " +
                    std::to_string(b));
  }
  for (int lab : labels) {
    if (lab < 0 || lab >= k) throw DataError("label " + std::to_string(lab) + " out of range");
  }

  const auto& lv = logits.values();
  // softmax kept for the backward rule
  std::vector<double> softmax(static_cast<size_t>(b) * k);
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    const double* row = lv.data() + static_cast<std::int64_t>(i) * k;
    double m = row[0];
    for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) sum += std::exp(row[j] - m);
    const double lse = m + std::log(sum);
    for (int j = 0; j < k; ++j) {
      softmax[static_cast<size_t>(i) * k + j] = std::exp(row[j] - lse);
    }
    total += lse - row[labels[static_cast<size_t>(i)]];
  }
  Tensor loss = Tensor::scalar(total / static_cast<double>(b));

  Tensor logits_cap = logits, loss_cap = loss;
  std::vector<int> labels_cap = labels;
  int id = tape.record([logits_cap, loss_cap, labels_cap, softmax, b, k]() mutable {
    if (!loss_cap.has_grad()) return;
    const double up = loss_cap.grad()[0] / static_cast<double>(b);
    auto& gl = logits_cap.ensure_grad();
    for (int i = 0; i < b; ++i) {
      for (int j = 0; j < k; ++j) {
        const double onehot = j == labels_cap[static_cast<size_t>(i)] ? 1.0 : 0.0;
        gl[static_cast<size_t>(i) * k + j] +=
            up * (softmax[static_cast<size_t>(i) * k + j] - onehot);
      }
    }
  });
  loss.set_node_id(id);
  return loss;
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const int b = logits.dim(0), k = logits.dim(1);
  const auto& lv = logits.values();
  int correct = 0;
  for (int i = 0; i < b; ++i) {
    const double* row = lv.data() + static_cast<std::int64_t>(i) * k;
    int best = 0;
    for (int j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (best == labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(b);
}

double evaluate_accuracy(Model& model, const Dataset& data, Rng& rng, int eval_batch) {
  if (data.size() == 0) throw DataError("cannot evaluate on an empty dataset");
  int seen = 0;
  double acc_sum = 0.0;
  for (int begin = 0; begin < data.size(); begin += eval_batch) {
    const int end = std::min(begin + eval_batch, data.size());
    std::vector<int> idx(static_cast<size_t>(end - begin));
    std::iota(idx.begin(), idx.end(), begin);
    Tape tape;
    Tensor logits = model.forward(tape, data.batch(idx), Mode::eval, rng);
    acc_sum += accuracy(logits, data.batch_labels(idx)) * static_cast<double>(end - begin);
    seen += end - begin;
  }
  return acc_sum / static_cast<double>(seen);
}

TrainReport train(Model& model, const Dataset& train_data, const Dataset& test_data,
                  const TrainOptions& opts, std::uint64_t seed) {
  if (train_data.size() == 0) throw DataError("training dataset is empty");
  if (opts.batch_size < 2) throw ConfigError("batch_size must be >= 2 for batch norm");

  Rng base(seed);
  Rng shuffle_rng = base.stream("shuffle");
  Rng noise_rng = base.stream("noise");
  Rng eval_rng = base.stream("eval");

  auto params = model.parameters();
  OptimizerState opt;
  opt.init(opts.optimizer, params);

  const int n = train_data.size();
  const int steps_per_epoch = std::max(n / opts.batch_size, 0) +
                              ((n % opts.batch_size) >= 2 ? 1 : 0);
  ScheduleConfig sched;
  sched.total_steps = std::max<long long>(1, static_cast<long long>(opts.epochs) * steps_per_epoch);
  sched.alpha0 = opts.optimizer.alpha0;

  TrainReport report;
  report.param_count = model.parameter_count();
  report.initial_eval_acc = evaluate_accuracy(model, test_data, eval_rng);

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  long long step = 0;
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    // Fisher-Yates with the run's shuffle stream
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    double loss_sum = 0.0, acc_sum = 0.0;
    int seen = 0;
    double lr = 0.0;
    for (int begin = 0; begin + 2 <= n; begin += opts.batch_size) {
      const int end = std::min(begin + opts.batch_size, n);
      if (end - begin < 2) break;  // batch norm needs >= 2 samples
      std::vector<int> idx(order.begin() + begin, order.begin() + end);
      Tensor x = train_data.batch(idx);
      const auto labels = train_data.batch_labels(idx);

      Tape tape;
      model.zero_grads();
      Tensor logits = model.forward(tape, x, Mode::train, noise_rng);
      Tensor loss = softmax_cross_entropy(tape, logits, labels);
      const double loss_val = loss.item();
      if (!std::isfinite(loss_val)) {
        report.diverged = true;
        report.divergence_note = "loss became non-finite at epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(step);
        return report;
      }
      tape.backward(loss);
      lr = cosine_lr(step, sched);
      try {
        sgd_step(params, opt, lr);
      } catch (const NumericError& e) {
        report.diverged = true;
        report.divergence_note = std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(step);
        return report;
      }
      ++step;

      loss_sum += loss_val * static_cast<double>(end - begin);
      acc_sum += accuracy(logits, labels) * static_cast<double>(end - begin);
      seen += end - begin;
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.lr_last = lr;
    stats.train_loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
    stats.train_acc = seen > 0 ? acc_sum / static_cast<double>(seen) : 0.0;
    stats.eval_acc = evaluate_accuracy(model, test_data, eval_rng);
    report.epochs.push_back(stats);
  }
  return report;
}

}  // namespace noiselab
