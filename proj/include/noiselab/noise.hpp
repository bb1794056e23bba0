// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>

#include "noiselab/layers.hpp"
#include "noiselab/rng.hpp"

namespace noiselab {

enum class NoiseKind { uniform, gaussian, bernoulli_dropout };

/// Multiplicative-noise mask distribution. Every kind satisfies E[u] = 1:
/// uniform on [1 - sigma*sqrt(3), 1 + sigma*sqrt(3)], gaussian with mean 1
/// and std sigma, dropout u = m/p with m ~ Bern(p).
struct NoiseSpec {
  NoiseKind kind = NoiseKind::uniform;
  double sigma = 0.0;       // uniform/gaussian
  double keep_prob = 1.0;   // dropout
  bool share_spatial = true;  // one mask value per (sample, feature map)
  std::uint64_t seed = 0;     // for standalone sampling contexts

  /// Var[u]: sigma^2, or (1-p)/p for dropout.
  double variance() const;
  void validate() const;
};

struct ShakeConfig {
  enum class BackwardMode { even, shake };
  BackwardMode backward_mode = BackwardMode::even;
  bool per_sample = true;  // alpha per input image vs per batch
};

/// Draw a mask u with E[u]=1 and Var[u]=spec.variance(). For 4-d shapes with
/// share_spatial the mask is [b,c,1,1] and broadcasts across h,w. Masks are
/// plain value tensors, never differentiated.
Tensor sample_mask(const NoiseSpec& spec, const Shape& shape, Rng& rng);

/// One draw of u from the mask distribution.
double sample_mask_value(const NoiseSpec& spec, Rng& rng);

/// x~ = u (.) x at train time, identity at eval.
Tensor apply_mn(Tape& tape, const Tensor& x, const NoiseSpec& spec, Rng& rng, Mode mode);

/// Noisy weight view w~ = u (.) w with an independent mask entry per weight
/// (DropConnect-style). share_spatial does not apply to weights.
Tensor apply_weight_noise(Tape& tape, const Tensor& weight, const NoiseSpec& spec, Rng& rng,
                          Mode mode);

/// zhat' = zhat_s + AsConst(v (.) zhat_s) with zhat_s = BN(x.W) and
/// v = u - 1. Single forward pass; gradients see only the clean path.
Tensor ncmn0_layer(Tape& tape, const Tensor& x, NormLayer& layer, const NoiseSpec& spec, Rng& rng,
                   Mode mode, const Tensor* fixed_mask = nullptr);

/// zhat' = BN(z_s) + AsConst(BN(z) - BN(z_s)) with z_s = x.W and
/// z = (u (.) x).W. Forward value equals BN(z); backward flows only through
/// BN(z_s); running stats come from z.
Tensor ncmn1_layer(Tape& tape, const Tensor& x, NormLayer& layer, const NoiseSpec& spec, Rng& rng,
                   Mode mode, const Tensor* fixed_mask = nullptr);

struct Ncmn2Masks {
  Tensor u1, u2;
};

/// Two-layer variant: zhat_s from the clean composite, the noise component
/// from an independent two-mask noisy composite, truncated.
Tensor ncmn2_block(Tape& tape, const Tensor& x, NormLayer& layer1, NormLayer& layer2,
                   const NoiseSpec& spec, Rng& rng, Mode mode,
                   const Ncmn2Masks* fixed_masks = nullptr);

struct ShakeBranch {
  NormLayer layer1, layer2;
};

/// Random convex average of two residual branches. Forward weight
/// alpha1 ~ U[0,1] (per sample if configured); backward weight alpha' is 1/2
/// in even mode or an independent U[0,1] draw in shake mode. fixed_alpha
/// forces a deterministic alpha (0.5 reproduces the noiseless average).
Tensor shake_block(Tape& tape, const Tensor& x, ShakeBranch& branch1, ShakeBranch& branch2,
                   const ShakeConfig& cfg, Rng& rng, Mode mode,
                   std::optional<double> fixed_alpha = std::nullopt);

}  // namespace noiselab
