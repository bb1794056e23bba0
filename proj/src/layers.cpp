// SPDX-License-Identifier: Apache-2.0
#include "noiselab/layers.hpp"

#include <cmath>

namespace noiselab {
namespace {

std::vector<int> norm_axes(const Tensor& z) {
  if (z.rank() == 2) return {0};
  if (z.rank() == 4) return {0, 2, 3};
  throw ShapeError("batch norm expects [batch,features] or [batch,c,h,w], got " +
                   shape_str(z.shape()));
}

std::int64_t effective_samples(const Tensor& z) {
  std::int64_t n = z.dim(0);
  if (z.rank() == 4) n *= static_cast<std::int64_t>(z.dim(2)) * z.dim(3);
  return n;
}

Shape channel_bcast_shape(const Tensor& z) {
  if (z.rank() == 2) return Shape{z.dim(1)};
  return Shape{z.dim(1), 1, 1};
}

// (z - mean(src)) / sqrt(var(src) + eps), statistics on the tape.
Tensor normalize_by_stats_of(Tape& tape, const Tensor& z, const Tensor& src, double eps) {
  const auto axes = norm_axes(src);
  Tensor mean = reduce_mean(tape, src, axes, true);
  Tensor centered_src = sub(tape, src, mean);
  Tensor var = reduce_mean(tape, square(tape, centered_src), axes, true);
  Tensor denom = sqrt(tape, add(tape, var, Tensor::scalar(eps)));
  Tensor centered = z.same_payload(src) ? centered_src : sub(tape, z, mean);
  return div(tape, centered, denom);
}

void update_running_stats(BNParams& p, const Tensor& z) {
  std::vector<double> mean, var;
  batch_stats(z, mean, var);
  const double m = p.momentum;
  for (size_t c = 0; c < mean.size(); ++c) {
    p.running_mean[c] = m * p.running_mean[c] + (1.0 - m) * mean[c];
    p.running_var[c] = m * p.running_var[c] + (1.0 - m) * var[c];
  }
}

void check_channels(const BNParams& p, const Tensor& z) {
  if (p.channels() != z.dim(1)) {
    throw ShapeError("batch norm has " + std::to_string(p.channels()) + " channels but input is " +
                     shape_str(z.shape()));
  }
}

}  // namespace

BNParams::BNParams(int channels, double momentum_, double epsilon_) {
  if (channels <= 0) throw ConfigError("batch norm channel count must be positive");
  if (epsilon_ < 0.0) throw ConfigError("batch norm epsilon must be non-negative");
  if (momentum_ <= 0.0 || momentum_ >= 1.0) throw ConfigError("batch norm momentum must be in (0,1)");
  gamma = Tensor::ones(Shape{channels});
  beta = Tensor::zeros(Shape{channels});
  running_mean.assign(static_cast<size_t>(channels), 0.0);
  running_var.assign(static_cast<size_t>(channels), 1.0);
  momentum = momentum_;
  epsilon = epsilon_;
}

void batch_stats(const Tensor& z, std::vector<double>& mean_out, std::vector<double>& var_out) {
  const int c = z.dim(1);
  const std::int64_t n = effective_samples(z);
  mean_out.assign(static_cast<size_t>(c), 0.0);
  var_out.assign(static_cast<size_t>(c), 0.0);
  const auto& v = z.values();
  const std::int64_t spatial = z.rank() == 4 ? static_cast<std::int64_t>(z.dim(2)) * z.dim(3) : 1;
  const std::int64_t batch = z.dim(0);
  for (std::int64_t s = 0; s < batch; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const double* base = v.data() + (s * c + ch) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) mean_out[static_cast<size_t>(ch)] += base[i];
    }
  }
  for (auto& m : mean_out) m /= static_cast<double>(n);
  for (std::int64_t s = 0; s < batch; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const double* base = v.data() + (s * c + ch) * spatial;
      const double mu = mean_out[static_cast<size_t>(ch)];
      for (std::int64_t i = 0; i < spatial; ++i) {
        const double d = base[i] - mu;
        var_out[static_cast<size_t>(ch)] += d * d;
      }
    }
  }
  for (auto& vv : var_out) vv /= static_cast<double>(n);
}

Tensor dense_preact(Tape& tape, const Tensor& x, const DenseParams& p) {
  if (x.rank() != 2 || x.dim(1) != p.fan_in()) {
    throw ShapeError("dense layer expects input width " + std::to_string(p.fan_in()) + ", got " +
                     shape_str(x.shape()));
  }
  return matmul(tape, x, p.weight);
}

Tensor conv_preact(Tape& tape, const Tensor& x, const ConvParams& p) {
  return conv2d(tape, x, p.weight, p.stride, p.pad);
}

Tensor weighted_sum(Tape& tape, const Tensor& x, const LayerWeights& w) {
  if (const auto* d = std::get_if<DenseParams>(&w)) return dense_preact(tape, x, *d);
  return conv_preact(tape, x, std::get<ConvParams>(w));
}

Tensor weighted_sum_with(Tape& tape, const Tensor& x, const LayerWeights& w, const Tensor& weight) {
  if (std::holds_alternative<DenseParams>(w)) return matmul(tape, x, weight);
  const auto& c = std::get<ConvParams>(w);
  return conv2d(tape, x, weight, c.stride, c.pad);
}

Tensor batchnorm_standard(Tape& tape, const Tensor& z, BNParams& p, Mode mode,
                          bool update_running) {
  check_channels(p, z);
  if (mode == Mode::train) {
    if (effective_samples(z) < 2) {
      throw ContractError("batch norm needs at least 2 samples in train mode, input is " +
                          shape_str(z.shape()));
    }
    Tensor out = normalize_by_stats_of(tape, z, z, p.epsilon);
    if (update_running) update_running_stats(p, z);
    return out;
  }
  if (p.epsilon == 0.0) {
    for (double v : p.running_var) {
      if (v == 0.0) throw NumericError("eval-mode batch norm with zero running variance and epsilon=0");
    }
  }
  const Shape bshape = channel_bcast_shape(z);
  Tensor mean(bshape, p.running_mean);
  std::vector<double> denom(p.running_var.size());
  for (size_t i = 0; i < denom.size(); ++i) denom[i] = std::sqrt(p.running_var[i] + p.epsilon);
  Tensor scale(bshape, denom);
  return div(tape, sub(tape, z, mean), scale);
}

Tensor batchnorm_signal_stats(Tape& tape, const Tensor& z, const Tensor& z_s, BNParams& p,
                              bool update_running) {
  if (z.shape() != z_s.shape()) {
    throw ShapeError("signal-statistics batch norm needs matching shapes, got " +
                     shape_str(z.shape()) + " and " + shape_str(z_s.shape()));
  }
  check_channels(p, z);
  if (effective_samples(z) < 2) {
    throw ContractError("batch norm needs at least 2 samples in train mode, input is " +
                        shape_str(z.shape()));
  }
  Tensor out = normalize_by_stats_of(tape, z, z_s, p.epsilon);
  if (update_running) update_running_stats(p, z);
  return out;
}

Tensor affine_activation(Tape& tape, const Tensor& zhat, const BNParams& p, ActivationKind phi) {
  check_channels(p, zhat);
  const Shape bshape = channel_bcast_shape(zhat);
  Tensor g = reshape(tape, p.gamma, bshape);
  Tensor b = reshape(tape, p.beta, bshape);
  Tensor out = add(tape, mul(tape, zhat, g), b);
  if (phi == ActivationKind::relu) out = relu(tape, out);
  return out;
}

NormLayer NormLayer::dense(int in, int out, ActivationKind phi) {
  NormLayer l;
  l.weights = DenseParams{Tensor::zeros(Shape{in, out})};
  l.bn = BNParams(out);
  l.phi = phi;
  return l;
}

NormLayer NormLayer::conv(int c_in, int c_out, int ksize, int stride, int pad, ActivationKind phi) {
  NormLayer l;
  l.weights = ConvParams{Tensor::zeros(Shape{c_out, c_in, ksize, ksize}), stride, pad};
  l.bn = BNParams(c_out);
  l.phi = phi;
  return l;
}

Tensor preact_norm(Tape& tape, const Tensor& x, NormLayer& layer, Mode mode, bool update_running) {
  return batchnorm_standard(tape, weighted_sum(tape, x, layer.weights), layer.bn, mode,
                            mode == Mode::train && update_running);
}

Tensor layer_activation(Tape& tape, const Tensor& x, NormLayer& layer, Mode mode,
                        bool update_running) {
  return affine_activation(tape, preact_norm(tape, x, layer, mode, update_running), layer.bn,
                           layer.phi);
}

}  // namespace noiselab
