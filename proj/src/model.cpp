// SPDX-License-Identifier: Apache-2.0
#include "noiselab/model.hpp"

#include <cmath>
#include <set>

namespace noiselab {
namespace {

void he_init(Tensor weight, int fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : weight.mutable_values()) v = std * rng.gaussian();
}

void init_norm_layer(NormLayer& layer, Rng& rng) {
  if (auto* d = std::get_if<DenseParams>(&layer.weights)) {
    he_init(d->weight, d->fan_in(), rng);
  } else {
    auto& c = std::get<ConvParams>(layer.weights);
    he_init(c.weight, c.fan_in(), rng);
  }
}

// Layer counts per stage: the remainder goes to the earlier stages.
std::vector<int> stage_split(int depth) {
  const int base = depth / 3;
  const int rem = depth % 3;
  return {base + (rem > 0 ? 1 : 0), base + (rem > 1 ? 1 : 0), base};
}

void collect_layer(const std::string& prefix, NormLayer& l, std::vector<NamedParam>& out) {
  if (auto* d = std::get_if<DenseParams>(&l.weights)) {
    out.push_back({prefix + ".weight", d->weight});
  } else {
    out.push_back({prefix + ".weight", std::get<ConvParams>(l.weights).weight});
  }
  out.push_back({prefix + ".gamma", l.bn.gamma});
  out.push_back({prefix + ".beta", l.bn.beta});
}

const Tensor& layer_weight(const NormLayer& l) {
  if (const auto* d = std::get_if<DenseParams>(&l.weights)) return d->weight;
  return std::get<ConvParams>(l.weights).weight;
}

}  // namespace

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::plain_cnn: return "plain_cnn";
    case Architecture::residual: return "residual";
    case Architecture::residual_2branch: return "residual_2branch";
  }
  return "?";
}

std::string to_string(NoiseType n) {
  switch (n) {
    case NoiseType::none: return "none";
    case NoiseType::mn: return "mn";
    case NoiseType::weight_mn: return "weight_mn";
    case NoiseType::ncmn0: return "ncmn0";
    case NoiseType::ncmn1: return "ncmn1";
    case NoiseType::ncmn2: return "ncmn2";
    case NoiseType::shake: return "shake";
  }
  return "?";
}

Architecture architecture_from_string(const std::string& s) {
  if (s == "plain_cnn") return Architecture::plain_cnn;
  if (s == "residual") return Architecture::residual;
  if (s == "residual_2branch") return Architecture::residual_2branch;
  throw ConfigError("unknown architecture '" + s + "'");
}

NoiseType noise_type_from_string(const std::string& s) {
  if (s == "none") return NoiseType::none;
  if (s == "mn") return NoiseType::mn;
  if (s == "weight_mn") return NoiseType::weight_mn;
  if (s == "ncmn0") return NoiseType::ncmn0;
  if (s == "ncmn1") return NoiseType::ncmn1;
  if (s == "ncmn2") return NoiseType::ncmn2;
  if (s == "shake") return NoiseType::shake;
  throw ConfigError("unknown noise type '" + s + "'");
}

void ModelConfig::validate() const {
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (width_multiplier < 1) throw ConfigError("width_multiplier must be >= 1");
  if (base_width < 1) throw ConfigError("base_width must be >= 1");
  if (class_count < 2) throw ConfigError("class_count must be >= 2");
  noise_spec.validate();

  if (noise_type == NoiseType::shake && architecture != Architecture::residual_2branch) {
    throw ConfigError("shake noise requires architecture residual_2branch");
  }
  if (architecture == Architecture::residual_2branch && noise_type != NoiseType::none &&
      noise_type != NoiseType::shake) {
    throw ConfigError("residual_2branch supports only noise types none and shake");
  }
  if (architecture != Architecture::plain_cnn) {
    if (depth < 3 || (depth - 1) % 2 != 0) {
      throw ConfigError("residual architectures need depth = 1 + 2*blocks (odd, >= 3)");
    }
  }
  if (noise_type == NoiseType::ncmn2 && architecture == Architecture::plain_cnn) {
    const int noisy_layers = depth - (skip_first_noise ? 1 : 0);
    if (noisy_layers % 2 != 0) {
      throw ConfigError("ncmn2 needs an even number of layers to pair into blocks, got " +
                        std::to_string(noisy_layers));
    }
  }
}

Model build_model(const ModelConfig& cfg, const DataShape& input, Rng& init_rng) {
  cfg.validate();
  if (input.sample.size() != 1 && input.sample.size() != 3) {
    throw ConfigError("dataset sample shape must be [features] or [c,h,w], got " +
                      shape_str(input.sample));
  }

  Model m;
  m.cfg_ = cfg;
  m.input_ = input;
  const int w1 = cfg.base_width * cfg.width_multiplier;

  if (cfg.architecture == Architecture::plain_cnn) {
    int features_out = 0;
    if (input.is_image()) {
      const auto stages = stage_split(cfg.depth);
      const int widths[3] = {w1, 2 * w1, 4 * w1};
      int c_in = input.sample[0];
      for (int s = 0; s < 3; ++s) {
        for (int i = 0; i < stages[static_cast<size_t>(s)]; ++i) {
          const int stride = (s > 0 && i == 0) ? 2 : 1;
          m.plain_layers_.push_back(NormLayer::conv(c_in, widths[s], 3, stride, 1));
          c_in = widths[s];
        }
      }
      features_out = c_in;
    } else {
      int f_in = input.sample[0];
      for (int i = 0; i < cfg.depth; ++i) {
        m.plain_layers_.push_back(NormLayer::dense(f_in, w1));
        f_in = w1;
      }
      features_out = w1;
    }
    for (auto& l : m.plain_layers_) init_norm_layer(l, init_rng);
    m.classifier_ = DenseParams{Tensor::zeros(Shape{features_out, cfg.class_count})};
    he_init(m.classifier_.weight, features_out, init_rng);
    m.validate();
    return m;
  }

  // Residual variants: stem conv/dense, then constant-width blocks of two
  // weighted layers, identity skip.
  const int blocks = (cfg.depth - 1) / 2;
  const bool image = input.is_image();
  if (image) {
    m.stem_ = NormLayer::conv(input.sample[0], w1, 3, 1, 1);
  } else {
    m.stem_ = NormLayer::dense(input.sample[0], w1);
  }
  init_norm_layer(m.stem_, init_rng);

  auto make_layer = [&](int in, int out, ActivationKind phi) {
    NormLayer l = image ? NormLayer::conv(in, out, 3, 1, 1) : NormLayer::dense(in, out);
    l.phi = phi;
    init_norm_layer(l, init_rng);
    return l;
  };

  if (cfg.architecture == Architecture::residual) {
    for (int b = 0; b < blocks; ++b) {
      ResBlock block;
      block.layer1 = make_layer(w1, w1, ActivationKind::relu);
      block.layer2 = make_layer(w1, w1, ActivationKind::identity);
      m.blocks_.push_back(std::move(block));
    }
  } else {
    for (int b = 0; b < blocks; ++b) {
      Shake2Block block;
      block.branch1.layer1 = make_layer(w1, w1, ActivationKind::relu);
      block.branch1.layer2 = make_layer(w1, w1, ActivationKind::identity);
      block.branch2.layer1 = make_layer(w1, w1, ActivationKind::relu);
      block.branch2.layer2 = make_layer(w1, w1, ActivationKind::identity);
      block.affine = BNParams(w1);
      m.shake_blocks_.push_back(std::move(block));
    }
  }
  m.classifier_ = DenseParams{Tensor::zeros(Shape{w1, cfg.class_count})};
  he_init(m.classifier_.weight, w1, init_rng);
  m.validate();
  return m;
}

void Model::validate() {
  if (cfg_.noise_type != NoiseType::ncmn2) return;
  // NCMN-2 blocks must own their parameters exclusively.
  std::set<const void*> seen;
  auto check = [&](const NormLayer& l) {
    const void* key = layer_weight(l).values().data();
    if (!seen.insert(key).second) {
      throw ConfigError("NCMN-2 blocks must not share layer parameters");
    }
  };
  if (cfg_.architecture == Architecture::plain_cnn) {
    const size_t start = cfg_.skip_first_noise ? 1 : 0;
    for (size_t i = start; i < plain_layers_.size(); ++i) check(plain_layers_[i]);
  } else {
    for (auto& b : blocks_) {
      check(b.layer1);
      check(b.layer2);
    }
  }
}

std::vector<NamedParam> Model::parameters() {
  std::vector<NamedParam> out;
  if (cfg_.architecture == Architecture::plain_cnn) {
    for (size_t i = 0; i < plain_layers_.size(); ++i) {
      collect_layer("layer" + std::to_string(i), plain_layers_[i], out);
    }
  } else {
    collect_layer("stem", stem_, out);
    for (size_t b = 0; b < blocks_.size(); ++b) {
      collect_layer("block" + std::to_string(b) + ".conv1", blocks_[b].layer1, out);
      collect_layer("block" + std::to_string(b) + ".conv2", blocks_[b].layer2, out);
    }
    for (size_t b = 0; b < shake_blocks_.size(); ++b) {
      const std::string p = "block" + std::to_string(b);
      collect_layer(p + ".b1.conv1", shake_blocks_[b].branch1.layer1, out);
      collect_layer(p + ".b1.conv2", shake_blocks_[b].branch1.layer2, out);
      collect_layer(p + ".b2.conv1", shake_blocks_[b].branch2.layer1, out);
      collect_layer(p + ".b2.conv2", shake_blocks_[b].branch2.layer2, out);
      out.push_back({p + ".affine.gamma", shake_blocks_[b].affine.gamma});
      out.push_back({p + ".affine.beta", shake_blocks_[b].affine.beta});
    }
  }
  out.push_back({"classifier.weight", classifier_.weight});
  return out;
}

void Model::zero_grads() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

long long Model::parameter_count() {
  long long n = 0;
  for (auto& p : parameters()) n += p.tensor.size();
  return n;
}

Tensor Model::hidden_layer(Tape& tape, const Tensor& x, NormLayer& layer, bool noise_here,
                           Mode mode, Rng& rng, ActivationProbe* probe, const std::string& name) {
  if (probe && probe->want_layer_inputs) {
    const int in_size = x.rank() == 4 ? x.dim(2) : 1;
    probe->layer_inputs.push_back({name, in_size, x.detached()});
  }
  const NoiseType nt = noise_here ? cfg_.noise_type : NoiseType::none;
  Tensor zhat;
  if (mode == Mode::eval) {
    zhat = preact_norm(tape, x, layer, Mode::eval);
  } else {
    switch (nt) {
      case NoiseType::none:
      case NoiseType::shake:
      case NoiseType::ncmn2:
        zhat = preact_norm(tape, x, layer, Mode::train);
        break;
      case NoiseType::mn:
        zhat = preact_norm(tape, apply_mn(tape, x, cfg_.noise_spec, rng, mode), layer, Mode::train);
        break;
      case NoiseType::weight_mn: {
        Tensor w = apply_weight_noise(tape, layer_weight(layer), cfg_.noise_spec, rng, mode);
        Tensor z = weighted_sum_with(tape, x, layer.weights, w);
        zhat = batchnorm_standard(tape, z, layer.bn, Mode::train);
        break;
      }
      case NoiseType::ncmn0:
        zhat = ncmn0_layer(tape, x, layer, cfg_.noise_spec, rng, mode);
        break;
      case NoiseType::ncmn1:
        zhat = ncmn1_layer(tape, x, layer, cfg_.noise_spec, rng, mode);
        break;
    }
  }
  // Correlation is measured per plain-CNN layer after normalization, skipping
  // the first layer; residual nets measure block outputs instead.
  if (probe && mode == Mode::eval && cfg_.architecture == Architecture::plain_cnn &&
      name != "layer0") {
    const int map_size = zhat.rank() == 4 ? zhat.dim(2) : 1;
    probe->post_norm.push_back({name, map_size, zhat.detached()});
  }
  return affine_activation(tape, zhat, layer.bn, layer.phi);
}

Tensor Model::forward_plain(Tape& tape, const Tensor& x, Mode mode, Rng& rng,
                            ActivationProbe* probe) {
  Tensor h = x;
  const size_t start = cfg_.skip_first_noise ? 1 : 0;
  if (cfg_.noise_type == NoiseType::ncmn2 && mode == Mode::train) {
    if (start == 1) h = hidden_layer(tape, h, plain_layers_[0], false, mode, rng, probe, "layer0");
    for (size_t i = start; i + 1 < plain_layers_.size(); i += 2) {
      NormLayer& l1 = plain_layers_[i];
      NormLayer& l2 = plain_layers_[i + 1];
      Tensor zhat = ncmn2_block(tape, h, l1, l2, cfg_.noise_spec, rng, mode);
      h = affine_activation(tape, zhat, l2.bn, l2.phi);
    }
  } else {
    for (size_t i = 0; i < plain_layers_.size(); ++i) {
      const bool noise_here = i >= start;
      h = hidden_layer(tape, h, plain_layers_[i], noise_here, mode, rng, probe,
                       "layer" + std::to_string(i));
    }
  }
  return classify(tape, h);
}

Tensor Model::forward_residual(Tape& tape, const Tensor& x, Mode mode, Rng& rng,
                               ActivationProbe* probe) {
  Tensor h = hidden_layer(tape, x, stem_, !cfg_.skip_first_noise, mode, rng, probe, "stem");
  for (size_t b = 0; b < blocks_.size(); ++b) {
    const std::string name = "block" + std::to_string(b);
    ResBlock& block = blocks_[b];
    Tensor residual;
    if (cfg_.noise_type == NoiseType::ncmn2 && mode == Mode::train) {
      Tensor zhat = ncmn2_block(tape, h, block.layer1, block.layer2, cfg_.noise_spec, rng, mode);
      residual = affine_activation(tape, zhat, block.layer2.bn, ActivationKind::identity);
    } else {
      Tensor hh = hidden_layer(tape, h, block.layer1, true, mode, rng, nullptr, name + ".conv1");
      residual = hidden_layer(tape, hh, block.layer2, true, mode, rng, nullptr, name + ".conv2");
    }
    h = add(tape, h, residual);
    if (probe && mode == Mode::eval) {
      const int map_size = h.rank() == 4 ? h.dim(2) : 1;
      probe->post_norm.push_back({name, map_size, h.detached()});
    }
  }
  return classify(tape, h);
}

Tensor Model::forward_2branch(Tape& tape, const Tensor& x, Mode mode, Rng& rng,
                              ActivationProbe* probe) {
  Tensor h = hidden_layer(tape, x, stem_, false, mode, rng, probe, "stem");
  const bool noise_off =
      cfg_.noise_type == NoiseType::none || cfg_.noise_spec.variance() == 0.0;
  std::optional<double> fixed_alpha;
  if (noise_off) fixed_alpha = 0.5;
  for (size_t b = 0; b < shake_blocks_.size(); ++b) {
    Shake2Block& block = shake_blocks_[b];
    Tensor zhat =
        shake_block(tape, h, block.branch1, block.branch2, cfg_.shake, rng, mode, fixed_alpha);
    Tensor residual = affine_activation(tape, zhat, block.affine, ActivationKind::identity);
    h = add(tape, h, residual);
    if (probe && mode == Mode::eval) {
      const int map_size = h.rank() == 4 ? h.dim(2) : 1;
      probe->post_norm.push_back({"block" + std::to_string(b), map_size, h.detached()});
    }
  }
  return classify(tape, h);
}

Tensor Model::classify(Tape& tape, const Tensor& features) {
  Tensor pooled = features;
  if (features.rank() == 4) {
    pooled = reduce_mean(tape, features, {2, 3}, false);
  }
  return dense_preact(tape, pooled, classifier_);
}

Tensor Model::forward(Tape& tape, const Tensor& x, Mode mode, Rng& noise_rng,
                      ActivationProbe* probe) {
  switch (cfg_.architecture) {
    case Architecture::plain_cnn: return forward_plain(tape, x, mode, noise_rng, probe);
    case Architecture::residual: return forward_residual(tape, x, mode, noise_rng, probe);
    case Architecture::residual_2branch: return forward_2branch(tape, x, mode, noise_rng, probe);
  }
  throw ContractError("unreachable architecture");
}

}  // namespace noiselab
