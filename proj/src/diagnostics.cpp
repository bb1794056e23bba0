// SPDX-License-Identifier: Apache-2.0
#include "noiselab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "noiselab/model.hpp"

namespace noiselab {
namespace {

void check_weights(const std::vector<double>& w) {
  if (w.empty()) throw ContractError("SNR estimator needs a non-empty weight vector");
}

}  // namespace

double snr_monte_carlo(const std::vector<double>& weights, const InputSampler& sample_input,
                       const NoiseSpec& spec, long long n_samples, Rng& rng) {
  check_weights(weights);
  if (n_samples < 10000) {
    throw ContractError("snr_monte_carlo needs at least 1e4 samples, got " +
                        std::to_string(n_samples));
  }
  const size_t dim = weights.size();
  std::vector<double> x(dim);
  double sum_zs = 0.0, sum_zs2 = 0.0, sum_zn2 = 0.0;
  for (long long s = 0; s < n_samples; ++s) {
    sample_input(rng, x);
    double zs = 0.0, zn = 0.0;
    for (size_t i = 0; i < dim; ++i) {
      const double wx = weights[i] * x[i];
      zs += wx;
      zn += wx * (sample_mask_value(spec, rng) - 1.0);
    }
    sum_zs += zs;
    sum_zs2 += zs * zs;
    sum_zn2 += zn * zn;
  }
  const double n = static_cast<double>(n_samples);
  const double mean_zs = sum_zs / n;
  const double var_zs = sum_zs2 / n - mean_zs * mean_zs;
  const double e_zn2 = sum_zn2 / n;
  if (e_zn2 == 0.0) return kSnrInfinity;
  return var_zs / e_zn2;
}

double snr_analytic(const std::vector<double>& weights, const InputMoments& moments,
                    double sigma) {
  check_weights(weights);
  const size_t dim = weights.size();
  if (moments.mean.size() != dim || moments.second.size() != dim) {
    throw ShapeError("input moments do not match weight dimension");
  }
  double diag = 0.0, cross = 0.0, mean_zs = 0.0;
  for (size_t i = 0; i < dim; ++i) {
    diag += weights[i] * weights[i] * moments.second[i][i];
    mean_zs += weights[i] * moments.mean[i];
    for (size_t j = i + 1; j < dim; ++j) {
      cross += 2.0 * weights[i] * weights[j] * moments.second[i][j];
    }
  }
  if (diag == 0.0) throw NumericError("degenerate input: E[sum (w_i x_i)^2] is zero");
  if (sigma == 0.0) return kSnrInfinity;
  return (1.0 + (cross - mean_zs * mean_zs) / diag) / (sigma * sigma);
}

InputMoments estimate_moments(const InputSampler& sample_input, int dim, long long n_samples,
                              Rng& rng) {
  InputMoments m;
  m.mean.assign(static_cast<size_t>(dim), 0.0);
  m.second.assign(static_cast<size_t>(dim), std::vector<double>(static_cast<size_t>(dim), 0.0));
  std::vector<double> x(static_cast<size_t>(dim));
  for (long long s = 0; s < n_samples; ++s) {
    sample_input(rng, x);
    for (int i = 0; i < dim; ++i) {
      m.mean[static_cast<size_t>(i)] += x[static_cast<size_t>(i)];
      for (int j = i; j < dim; ++j) {
        m.second[static_cast<size_t>(i)][static_cast<size_t>(j)] +=
            x[static_cast<size_t>(i)] * x[static_cast<size_t>(j)];
      }
    }
  }
  const double n = static_cast<double>(n_samples);
  for (int i = 0; i < dim; ++i) {
    m.mean[static_cast<size_t>(i)] /= n;
    for (int j = i; j < dim; ++j) {
      m.second[static_cast<size_t>(i)][static_cast<size_t>(j)] /= n;
      m.second[static_cast<size_t>(j)][static_cast<size_t>(i)] =
          m.second[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
  }
  return m;
}

double ncmn_noise_variance(const std::vector<double>& weights, const InputMoments& moments,
                           double sigma) {
  check_weights(weights);
  const size_t dim = weights.size();
  double diag = 0.0, e_zs2 = 0.0, mean_zs = 0.0;
  for (size_t i = 0; i < dim; ++i) {
    diag += weights[i] * weights[i] * moments.second[i][i];
    mean_zs += weights[i] * moments.mean[i];
    for (size_t j = 0; j < dim; ++j) {
      e_zs2 += weights[i] * weights[j] * moments.second[i][j];
    }
  }
  const double var_zs = e_zs2 - mean_zs * mean_zs;
  if (var_zs <= 0.0) throw NumericError("degenerate input: Var[z_s] is zero");
  return sigma * sigma * diag / var_zs;
}

double ncmn_noise_variance_mc(const std::vector<double>& weights, const InputSampler& sample_input,
                              const NoiseSpec& spec, long long n_samples, Rng& rng) {
  check_weights(weights);
  const size_t dim = weights.size();
  std::vector<double> x(dim);
  double sum_zs = 0.0, sum_zs2 = 0.0, sum_zn2 = 0.0;
  for (long long s = 0; s < n_samples; ++s) {
    sample_input(rng, x);
    double zs = 0.0, zn = 0.0;
    for (size_t i = 0; i < dim; ++i) {
      const double wx = weights[i] * x[i];
      zs += wx;
      zn += wx * (sample_mask_value(spec, rng) - 1.0);
    }
    sum_zs += zs;
    sum_zs2 += zs * zs;
    sum_zn2 += zn * zn;
  }
  const double n = static_cast<double>(n_samples);
  const double var_zs = sum_zs2 / n - (sum_zs / n) * (sum_zs / n);
  if (var_zs <= 0.0) throw NumericError("degenerate input: Var[z_s] is zero");
  return (sum_zn2 / n) / var_zs;
}

ShakeSnrEstimate shake_snr(const BranchPairSampler& sample_pair, long long n_samples, Rng& rng) {
  double sum_z1z2 = 0.0, sum_diff2 = 0.0, sum_zs2 = 0.0, sum_zn2 = 0.0;
  for (long long s = 0; s < n_samples; ++s) {
    const auto [z1, z2] = sample_pair(rng);
    const double diff = z1 - z2;
    sum_z1z2 += z1 * z2;
    sum_diff2 += diff * diff;
    const double zs = 0.5 * (z1 + z2);
    const double v = rng.uniform01() - 0.5;
    sum_zs2 += zs * zs;
    sum_zn2 += v * diff * v * diff;
  }
  ShakeSnrEstimate est;
  est.formula = sum_diff2 == 0.0 ? kSnrInfinity : 3.0 * (1.0 + 4.0 * sum_z1z2 / sum_diff2);
  est.direct_mc = sum_zn2 == 0.0 ? kSnrInfinity : sum_zs2 / sum_zn2;
  return est;
}

CorrelationResult feature_correlation(const Tensor& activations) {
  if (activations.rank() != 2 && activations.rank() != 4) {
    throw ShapeError("feature correlation expects [b,f] or [b,c,h,w], got " +
                     shape_str(activations.shape()));
  }
  const int c = activations.dim(1);
  const std::int64_t spatial =
      activations.rank() == 4 ? static_cast<std::int64_t>(activations.dim(2)) * activations.dim(3)
                              : 1;
  const std::int64_t n = activations.dim(0) * spatial;
  if (c < 2) throw ContractError("feature correlation needs at least 2 channels");
  if (n < 2) throw ContractError("feature correlation needs at least 2 samples");

  // Channel-major gather: batch and spatial positions become the sample axis.
  std::vector<double> ch(static_cast<size_t>(c) * n);
  const auto& v = activations.values();
  const std::int64_t batch = activations.dim(0);
  for (std::int64_t s = 0; s < batch; ++s) {
    for (int k = 0; k < c; ++k) {
      const double* src = v.data() + (s * c + k) * spatial;
      double* dst = ch.data() + static_cast<std::int64_t>(k) * n + s * spatial;
      std::copy(src, src + spatial, dst);
    }
  }

  std::vector<double> mean(static_cast<size_t>(c), 0.0), sd(static_cast<size_t>(c), 0.0);
  std::vector<bool> flagged(static_cast<size_t>(c), false);
  CorrelationResult res;
  res.channels = c;
  res.samples = n;
  for (int k = 0; k < c; ++k) {
    const double* row = ch.data() + static_cast<std::int64_t>(k) * n;
    double m = 0.0;
    for (std::int64_t i = 0; i < n; ++i) m += row[i];
    m /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t i = 0; i < n; ++i) var += (row[i] - m) * (row[i] - m);
    var /= static_cast<double>(n);
    mean[static_cast<size_t>(k)] = m;
    sd[static_cast<size_t>(k)] = std::sqrt(var);
    if (var < 1e-30) {
      flagged[static_cast<size_t>(k)] = true;
      res.zero_variance_channels.push_back(k);
    }
  }

  res.matrix.assign(static_cast<size_t>(c) * c, 0.0);
  double sum_abs = 0.0;
  for (int a = 0; a < c; ++a) {
    res.matrix[static_cast<size_t>(a) * c + a] = 1.0;
    for (int b = a + 1; b < c; ++b) {
      double rho = 0.0;
      if (!flagged[static_cast<size_t>(a)] && !flagged[static_cast<size_t>(b)]) {
        const double* ra = ch.data() + static_cast<std::int64_t>(a) * n;
        const double* rb = ch.data() + static_cast<std::int64_t>(b) * n;
        double cov = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          cov += (ra[i] - mean[static_cast<size_t>(a)]) * (rb[i] - mean[static_cast<size_t>(b)]);
        }
        cov /= static_cast<double>(n);
        rho = cov / (sd[static_cast<size_t>(a)] * sd[static_cast<size_t>(b)]);
        rho = std::clamp(rho, -1.0, 1.0);
      }
      res.matrix[static_cast<size_t>(a) * c + b] = rho;
      res.matrix[static_cast<size_t>(b) * c + a] = rho;
      sum_abs += std::abs(rho);
    }
  }
  res.mean_abs_corr = sum_abs / (static_cast<double>(c) * (c - 1) / 2.0);
  return res;
}

CorrelationReport correlation_report(Model& model, const Tensor& batch) {
  ActivationProbe probe;
  Tape tape;
  Rng unused(0);
  model.forward(tape, batch, Mode::eval, unused, &probe);
  if (probe.post_norm.empty()) {
    throw ContractError("model exposes no normalized activations to measure");
  }

  CorrelationReport report;
  std::map<int, std::vector<double>> by_size;
  double grand = 0.0;
  for (const auto& act : probe.post_norm) {
    const auto corr = feature_correlation(act.values);
    report.per_layer.push_back({act.name, act.map_size, corr.mean_abs_corr});
    by_size[act.map_size].push_back(corr.mean_abs_corr);
    grand += corr.mean_abs_corr;
  }
  report.grand_mean = grand / static_cast<double>(report.per_layer.size());
  for (const auto& [size, vals] : by_size) {
    double m = 0.0;
    for (double v : vals) m += v;
    m /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - m) * (v - m);
    var /= static_cast<double>(vals.size());
    report.groups.push_back({size, m, std::sqrt(var), static_cast<int>(vals.size())});
  }
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& build_loss,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           const GradCheckOptions& opts) {
  GradCheckReport report;
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = build_loss(tape);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite loss in gradient check");
    for (auto& [name, p] : params) {
      Tensor t = p;
      t.zero_grad();
    }
    tape.backward(loss);
    for (const auto& [name, p] : params) {
      analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0));
    }
  }

  auto eval_loss = [&]() {
    Tape scratch;
    return build_loss(scratch).item();
  };

  for (size_t k = 0; k < params.size(); ++k) {
    const bool truncated = std::find(opts.truncated_params.begin(), opts.truncated_params.end(),
                                     static_cast<int>(k)) != opts.truncated_params.end();
    Tensor p = params[k].second;
    auto& vals = p.mutable_values();
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + opts.step;
      const double f_plus = eval_loss();
      vals[i] = orig - opts.step;
      const double f_minus = eval_loss();
      vals[i] = orig;
      const double numeric = (f_plus - f_minus) / (2.0 * opts.step);
      const double a = analytic[k][static_cast<size_t>(i)];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      if (truncated) {
        if (rel > opts.tolerance) {
          report.truncated.push_back({params[k].first, i, a, numeric, rel, true});
        }
        continue;
      }
      report.max_rel_err = std::max(report.max_rel_err, rel);
      if (rel > opts.tolerance) {
        report.failures.push_back({params[k].first, i, a, numeric, rel, false});
      }
    }
  }
  return report;
}

}  // namespace noiselab
