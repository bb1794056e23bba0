// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <limits>
#include <string>
#include <utility>

#include "noiselab/noise.hpp"

namespace noiselab {

class Model;

inline constexpr double kSnrInfinity = std::numeric_limits<double>::infinity();

struct SNRReport {
  double snr_monte_carlo = 0.0;
  double snr_analytic = 0.0;
  double relative_gap = 0.0;
  long long sample_count = 0;
};

/// First and second input moments: mean[i] = E[x_i], second[i][j] = E[x_i x_j].
struct InputMoments {
  std::vector<double> mean;
  std::vector<std::vector<double>> second;
};

/// Fills one input vector per call.
using InputSampler = std::function<void(Rng&, std::vector<double>&)>;

/// Monte-Carlo estimate of Var[z_s] / E[z_n^2] for one output unit with the
/// given fan-in weights, drawing fresh (x, v) pairs. Returns +infinity when
/// the noise term vanishes (sigma = 0).
double snr_monte_carlo(const std::vector<double>& weights, const InputSampler& sample_input,
                       const NoiseSpec& spec, long long n_samples, Rng& rng);

/// Closed-form SNR from input moments, for independent per-unit noise:
/// (1/sigma^2) * [1 + (2 E[sum_{i<i'} (w_i x_i)(w_i' x_i')] - E[z_s]^2)
///                    / E[sum_i (w_i x_i)^2]].
double snr_analytic(const std::vector<double>& weights, const InputMoments& moments, double sigma);

InputMoments estimate_moments(const InputSampler& sample_input, int dim, long long n_samples,
                              Rng& rng);

/// Var of the normalized truncated-noise component:
/// sigma^2 * E[sum_i (w_i x_i)^2] / Var[z_s].
double ncmn_noise_variance(const std::vector<double>& weights, const InputMoments& moments,
                           double sigma);
double ncmn_noise_variance_mc(const std::vector<double>& weights, const InputSampler& sample_input,
                              const NoiseSpec& spec, long long n_samples, Rng& rng);

/// Yields one (z1, z2) branch-output pair per call.
using BranchPairSampler = std::function<std::pair<double, double>(Rng&)>;

struct ShakeSnrEstimate {
  /// 3 * [1 + 4 E[z1 z2] / E[(z1 - z2)^2]] from sample moments.
  double formula = 0.0;
  /// Direct E[zs^2]/E[zn^2] ratio with zs = (z1+z2)/2, zn = v(z1-z2),
  /// v ~ U[-1/2, 1/2].
  double direct_mc = 0.0;
};

ShakeSnrEstimate shake_snr(const BranchPairSampler& sample_pair, long long n_samples, Rng& rng);

struct CorrelationResult {
  double mean_abs_corr = 0.0;
  int channels = 0;
  long long samples = 0;
  std::vector<double> matrix;  // channels x channels, row-major
  std::vector<int> zero_variance_channels;
};

/// Mean absolute Pearson correlation over unordered channel pairs; batch and
/// spatial positions both count as samples. Zero-variance channels are
/// flagged and their pairs contribute |rho| = 0.
CorrelationResult feature_correlation(const Tensor& activations);

struct CorrelationReport {
  struct Layer {
    std::string name;
    int map_size = 0;
    double mean_abs_corr = 0.0;
  };
  struct Group {
    int map_size = 0;
    double mean_abs_corr = 0.0;    // mean over layers in the group
    double std_across_layers = 0.0;
    int layer_count = 0;
  };
  std::vector<Layer> per_layer;
  std::vector<Group> groups;
  double grand_mean = 0.0;  // mean of per-layer values
};

/// Eval-mode forward over one batch, post-normalization activations per
/// measured layer, grouped by feature-map size.
CorrelationReport correlation_report(Model& model, const Tensor& batch);

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::vector<int> truncated_params;  // indices whose gradient is truncated on purpose
};

struct GradCheckReport {
  struct Entry {
    std::string param;
    std::int64_t coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
    bool truncated = false;
  };
  double max_rel_err = 0.0;  // over non-truncated coordinates
  std::vector<Entry> failures;
  std::vector<Entry> truncated;  // intentional truncation, not failures
  bool pass(double tolerance) const { return failures.empty() && max_rel_err < tolerance; }
};

/// Central finite differences per parameter coordinate versus tape gradients.
/// build_loss must be a pure function of the parameter values (freeze any
/// masks before calling). Parameters listed as truncated are reported
/// separately when the numeric sensitivity disagrees with the (zero)
/// analytic gradient.
GradCheckReport grad_check(const std::function<Tensor(Tape&)>& build_loss,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           const GradCheckOptions& opts = {});

}  // namespace noiselab
