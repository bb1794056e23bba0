// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <variant>

#include "noiselab/ops.hpp"

namespace noiselab {

enum class Mode { train, eval };
enum class ActivationKind { identity, relu };

/// Batch-normalization state for one layer: trainable scale/shift plus
/// running statistics for eval-mode forward.
struct BNParams {
  Tensor gamma;  // [c]
  Tensor beta;   // [c]
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;
  double epsilon = 1e-5;

  BNParams() = default;
  explicit BNParams(int channels, double momentum_ = 0.9, double epsilon_ = 1e-5);
  int channels() const { return static_cast<int>(running_mean.size()); }
};

struct DenseParams {
  Tensor weight;  // [in, out], bias-free
  int fan_in() const { return weight.dim(0); }
  int fan_out() const { return weight.dim(1); }
};

struct ConvParams {
  Tensor weight;  // [c_out, c_in, kh, kw], bias-free
  int stride = 1;
  int pad = 1;
  int fan_in() const { return weight.dim(1) * weight.dim(2) * weight.dim(3); }
  int fan_out() const { return weight.dim(0); }
};

using LayerWeights = std::variant<DenseParams, ConvParams>;

/// z = x.W (dense). Pre-activations are bias-free; BN absorbs shifts.
Tensor dense_preact(Tape& tape, const Tensor& x, const DenseParams& p);
Tensor conv_preact(Tape& tape, const Tensor& x, const ConvParams& p);
Tensor weighted_sum(Tape& tape, const Tensor& x, const LayerWeights& w);
/// Same weighted sum computed with an explicit (possibly noisy) weight tensor.
Tensor weighted_sum_with(Tape& tape, const Tensor& x, const LayerWeights& w, const Tensor& weight);

/// Normalize per channel by batch statistics (train) or running statistics
/// (eval). Population variance; gamma/beta are applied separately by
/// affine_activation. In train mode running stats are updated by EMA
/// (running <- momentum*running + (1-momentum)*batch) unless update_running
/// is false.
Tensor batchnorm_standard(Tape& tape, const Tensor& z, BNParams& p, Mode mode,
                          bool update_running = true);

/// Normalize z by the batch statistics of z_s. Running statistics are
/// updated from z, not z_s, so eval-mode forward stays consistent with the
/// noisy training-time output.
Tensor batchnorm_signal_stats(Tape& tape, const Tensor& z, const Tensor& z_s, BNParams& p,
                              bool update_running = true);

/// phi(gamma (.) zhat + beta)
Tensor affine_activation(Tape& tape, const Tensor& zhat, const BNParams& p, ActivationKind phi);

/// A weighted layer together with its batch-norm state; the building block
/// every noise variant wraps.
struct NormLayer {
  LayerWeights weights;
  BNParams bn;
  ActivationKind phi = ActivationKind::relu;

  static NormLayer dense(int in, int out, ActivationKind phi = ActivationKind::relu);
  static NormLayer conv(int c_in, int c_out, int ksize, int stride, int pad,
                        ActivationKind phi = ActivationKind::relu);
};

/// Normalized pre-activation: BN(x.W).
Tensor preact_norm(Tape& tape, const Tensor& x, NormLayer& layer, Mode mode,
                   bool update_running = true);
/// Full layer activation: phi(gamma (.) BN(x.W) + beta).
Tensor layer_activation(Tape& tape, const Tensor& x, NormLayer& layer, Mode mode,
                        bool update_running = true);

/// Batch mean/variance per channel (population variance), values only.
void batch_stats(const Tensor& z, std::vector<double>& mean_out, std::vector<double>& var_out);

}  // namespace noiselab
