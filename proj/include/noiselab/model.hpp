// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "noiselab/noise.hpp"

namespace noiselab {

enum class Architecture { plain_cnn, residual, residual_2branch };
enum class NoiseType { none, mn, weight_mn, ncmn0, ncmn1, ncmn2, shake };

std::string to_string(Architecture a);
std::string to_string(NoiseType n);
Architecture architecture_from_string(const std::string& s);
NoiseType noise_type_from_string(const std::string& s);

struct ModelConfig {
  Architecture architecture = Architecture::plain_cnn;
  int depth = 4;             // number of weighted hidden layers (stem + block convs for residual)
  int width_multiplier = 1;  // k
  int base_width = 8;
  int class_count = 2;
  NoiseType noise_type = NoiseType::none;
  NoiseSpec noise_spec;
  ShakeConfig shake;
  bool skip_first_noise = false;  // leave the first weighted layer noise-free

  void validate() const;
};

/// Per-sample layout: {features} for vector data, {c,h,w} for images.
struct DataShape {
  Shape sample;
  bool is_image() const { return sample.size() == 3; }
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct CapturedActivation {
  std::string name;
  int map_size = 1;  // spatial extent (h) of the feature map, 1 for vectors
  Tensor values;
};

/// Eval-mode forward can capture post-normalization activations (plain nets)
/// or block outputs (residual nets), plus the inputs of each weighted layer.
struct ActivationProbe {
  bool want_layer_inputs = false;
  std::vector<CapturedActivation> post_norm;
  std::vector<CapturedActivation> layer_inputs;
};

struct ResBlock {
  NormLayer layer1, layer2;
};

struct Shake2Block {
  ShakeBranch branch1, branch2;
  BNParams affine;  // gamma/beta applied to the combined branch output
};

class Model {
 public:
  Model() = default;

  Tensor forward(Tape& tape, const Tensor& x, Mode mode, Rng& noise_rng,
                 ActivationProbe* probe = nullptr);

  std::vector<NamedParam> parameters();
  void zero_grads();
  long long parameter_count();

  const ModelConfig& config() const { return cfg_; }

  /// Structural checks (e.g. NCMN-2 blocks must not share parameters).
  void validate();

  // Layer graph, exposed for construction and tests.
  ModelConfig cfg_;
  DataShape input_;
  std::vector<NormLayer> plain_layers_;  // plain_cnn
  NormLayer stem_;                       // residual variants
  std::vector<ResBlock> blocks_;
  std::vector<Shake2Block> shake_blocks_;
  DenseParams classifier_;

 private:
  Tensor forward_plain(Tape& tape, const Tensor& x, Mode mode, Rng& rng, ActivationProbe* probe);
  Tensor forward_residual(Tape& tape, const Tensor& x, Mode mode, Rng& rng,
                          ActivationProbe* probe);
  Tensor forward_2branch(Tape& tape, const Tensor& x, Mode mode, Rng& rng,
                         ActivationProbe* probe);
  Tensor hidden_layer(Tape& tape, const Tensor& x, NormLayer& layer, bool noise_here, Mode mode,
                      Rng& rng, ActivationProbe* probe, const std::string& name);
  Tensor classify(Tape& tape, const Tensor& features);
};

/// He-initialized layer graph per the config; noise attaches to every hidden
/// layer unless skip_first_noise exempts the first.
Model build_model(const ModelConfig& cfg, const DataShape& input, Rng& init_rng);

}  // namespace noiselab
