// SPDX-License-Identifier: Apache-2.0
#include "noiselab/noise.hpp"

#include <cmath>

namespace noiselab {
namespace {

constexpr double kSqrt3 = 1.7320508075688772935274463415059;

void reject_eval_mask(Mode mode, const void* fixed) {
  if (mode == Mode::eval && fixed != nullptr) {
    throw ContractError("noise layer called in eval mode with a live mask");
  }
}

}  // namespace

double NoiseSpec::variance() const {
  if (kind == NoiseKind::bernoulli_dropout) return (1.0 - keep_prob) / keep_prob;
  return sigma * sigma;
}

void NoiseSpec::validate() const {
  if (kind == NoiseKind::bernoulli_dropout) {
    if (keep_prob <= 0.0 || keep_prob > 1.0) {
      throw ConfigError("dropout keep probability must be in (0,1], got " +
                        std::to_string(keep_prob));
    }
  } else if (sigma < 0.0) {
    throw ConfigError("noise standard deviation must satisfy sigma >= 0, got " +
                      std::to_string(sigma));
  }
}

double sample_mask_value(const NoiseSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case NoiseKind::uniform:
      return 1.0 + spec.sigma * kSqrt3 * (2.0 * rng.uniform01() - 1.0);
    case NoiseKind::gaussian:
      return 1.0 + spec.sigma * rng.gaussian();
    case NoiseKind::bernoulli_dropout:
      return rng.uniform01() < spec.keep_prob ? 1.0 / spec.keep_prob : 0.0;
  }
  return 1.0;
}

Tensor sample_mask(const NoiseSpec& spec, const Shape& shape, Rng& rng) {
  spec.validate();
  Shape mask_shape = shape;
  if (spec.share_spatial && shape.size() == 4) {
    mask_shape = Shape{shape[0], shape[1], 1, 1};
  }
  Tensor mask(mask_shape);
  for (auto& v : mask.mutable_values()) v = sample_mask_value(spec, rng);
  return mask;
}

Tensor apply_mn(Tape& tape, const Tensor& x, const NoiseSpec& spec, Rng& rng, Mode mode) {
  if (mode == Mode::eval) return x;
  Tensor u = sample_mask(spec, x.shape(), rng);
  return mul(tape, x, u);
}

Tensor apply_weight_noise(Tape& tape, const Tensor& weight, const NoiseSpec& spec, Rng& rng,
                          Mode mode) {
  if (mode == Mode::eval) return weight;
  NoiseSpec per_weight = spec;
  per_weight.share_spatial = false;  // one independent entry per weight
  Tensor u = sample_mask(per_weight, weight.shape(), rng);
  return mul(tape, weight, u);
}

Tensor ncmn0_layer(Tape& tape, const Tensor& x, NormLayer& layer, const NoiseSpec& spec, Rng& rng,
                   Mode mode, const Tensor* fixed_mask) {
  reject_eval_mask(mode, fixed_mask);
  Tensor zs_hat = preact_norm(tape, x, layer, mode, true);
  if (mode == Mode::eval) return zs_hat;
  Tensor u = fixed_mask ? *fixed_mask : sample_mask(spec, zs_hat.shape(), rng);
  Tape scratch;
  Tensor v = sub(scratch, u, Tensor::scalar(1.0));
  Tensor noise = mul(scratch, v, zs_hat);
  return add(tape, zs_hat, stop_gradient(noise));
}

Tensor ncmn1_layer(Tape& tape, const Tensor& x, NormLayer& layer, const NoiseSpec& spec, Rng& rng,
                   Mode mode, const Tensor* fixed_mask) {
  reject_eval_mask(mode, fixed_mask);
  if (mode == Mode::eval) return preact_norm(tape, x, layer, Mode::eval);

  Tensor z_s = weighted_sum(tape, x, layer.weights);
  Tensor bn_s = batchnorm_standard(tape, z_s, layer.bn, Mode::train, false);

  // Noisy pass carries no gradient; running statistics come from it.
  Tape scratch;
  Tensor u = fixed_mask ? *fixed_mask : sample_mask(spec, x.shape(), rng);
  Tensor x_noisy = mul(scratch, x, u);
  Tensor z = weighted_sum(scratch, x_noisy, layer.weights);
  Tensor bn_n = batchnorm_standard(scratch, z, layer.bn, Mode::train, true);
  Tensor noise = sub(scratch, bn_n, bn_s);
  return add(tape, bn_s, stop_gradient(noise));
}

Tensor ncmn2_block(Tape& tape, const Tensor& x, NormLayer& layer1, NormLayer& layer2,
                   const NoiseSpec& spec, Rng& rng, Mode mode, const Ncmn2Masks* fixed_masks) {
  reject_eval_mask(mode, fixed_masks);
  if (mode == Mode::eval) {
    Tensor h = layer_activation(tape, x, layer1, Mode::eval);
    return preact_norm(tape, h, layer2, Mode::eval);
  }

  Tensor h = layer_activation(tape, x, layer1, Mode::train, false);
  Tensor zs_hat = preact_norm(tape, h, layer2, Mode::train, false);

  Tape scratch;
  Tensor u1 = fixed_masks ? fixed_masks->u1 : sample_mask(spec, x.shape(), rng);
  Tensor x_noisy = mul(scratch, x, u1);
  Tensor h_noisy = layer_activation(scratch, x_noisy, layer1, Mode::train, true);
  Tensor u2 = fixed_masks ? fixed_masks->u2 : sample_mask(spec, h_noisy.shape(), rng);
  Tensor h_masked = mul(scratch, h_noisy, u2);
  Tensor zn_hat = preact_norm(scratch, h_masked, layer2, Mode::train, true);
  Tensor noise = sub(scratch, zn_hat, zs_hat);
  return add(tape, zs_hat, stop_gradient(noise));
}

Tensor shake_block(Tape& tape, const Tensor& x, ShakeBranch& branch1, ShakeBranch& branch2,
                   const ShakeConfig& cfg, Rng& rng, Mode mode,
                   std::optional<double> fixed_alpha) {
  Tensor h1 = layer_activation(tape, x, branch1.layer1, mode);
  Tensor z1 = preact_norm(tape, h1, branch1.layer2, mode);
  Tensor h2 = layer_activation(tape, x, branch2.layer1, mode);
  Tensor z2 = preact_norm(tape, h2, branch2.layer2, mode);
  if (z1.shape() != z2.shape()) {
    throw ShapeError("shake branches disagree on output shape: " + shape_str(z1.shape()) +
                     " vs " + shape_str(z2.shape()));
  }

  const Shape ashape = cfg.per_sample
                           ? (z1.rank() == 4 ? Shape{z1.dim(0), 1, 1, 1} : Shape{z1.dim(0), 1})
                           : Shape{};
  if (mode == Mode::eval) {
    Tensor half = Tensor::full(ashape, 0.5);
    return add(tape, mul(tape, z1, half), mul(tape, z2, half));
  }

  Tensor alpha1(ashape);
  if (fixed_alpha) {
    for (auto& v : alpha1.mutable_values()) v = *fixed_alpha;
  } else {
    for (auto& v : alpha1.mutable_values()) v = rng.uniform01();
  }
  Tensor alpha_back(ashape);
  if (cfg.backward_mode == ShakeConfig::BackwardMode::even || fixed_alpha) {
    for (auto& v : alpha_back.mutable_values()) v = 0.5;
  } else {
    for (auto& v : alpha_back.mutable_values()) v = rng.uniform01();
  }

  Tensor one_minus_back(ashape);
  for (std::int64_t i = 0; i < alpha_back.size(); ++i) {
    one_minus_back.mutable_values()[i] = 1.0 - alpha_back.values()[i];
  }
  Tensor live = add(tape, mul(tape, z1, alpha_back), mul(tape, z2, one_minus_back));

  Tape scratch;
  Tensor coeff(ashape);
  for (std::int64_t i = 0; i < alpha1.size(); ++i) {
    coeff.mutable_values()[i] = alpha1.values()[i] - alpha_back.values()[i];
  }
  Tensor noise = mul(scratch, coeff, sub(scratch, z1, z2));
  return add(tape, live, stop_gradient(noise));
}

}  // namespace noiselab
