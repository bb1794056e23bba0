// SPDX-License-Identifier: Apache-2.0
#include "noiselab/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace noiselab {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(int line, const std::string& msg) {
  throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

double parse_double(const std::string& v, int line) {
  try {
    size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) fail(line, "trailing characters in number '" + v + "'");
    return d;
  } catch (const ConfigError&) {
    throw;
  } catch (...) {
    fail(line, "expected a number, got '" + v + "'");
  }
}

long long parse_int(const std::string& v, int line) {
  try {
    size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) fail(line, "trailing characters in integer '" + v + "'");
    return i;
  } catch (const ConfigError&) {
    throw;
  } catch (...) {
    fail(line, "expected an integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& v, int line) {
  if (v == "true") return true;
  if (v == "false") return false;
  fail(line, "expected true or false, got '" + v + "'");
}

std::vector<std::uint64_t> parse_seed_list(const std::string& v, int line) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) fail(line, "empty entry in seed list");
    if (item.find('-') != std::string::npos) {
      fail(line, "seeds must be unsigned, got '" + item + "'");
    }
    try {
      out.push_back(std::stoull(item));
    } catch (...) {
      fail(line, "expected an unsigned integer seed, got '" + item + "'");
    }
  }
  if (out.empty()) fail(line, "seed list must name at least one seed");
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

const char* bool_str(bool b) { return b ? "true" : "false"; }

std::string noise_kind_str(NoiseKind k) {
  switch (k) {
    case NoiseKind::uniform: return "uniform";
    case NoiseKind::gaussian: return "gaussian";
    case NoiseKind::bernoulli_dropout: return "bernoulli_dropout";
  }
  return "?";
}

NoiseKind noise_kind_from(const std::string& s, int line) {
  if (s == "uniform") return NoiseKind::uniform;
  if (s == "gaussian") return NoiseKind::gaussian;
  if (s == "bernoulli_dropout") return NoiseKind::bernoulli_dropout;
  fail(line, "unknown noise_kind '" + s + "'");
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 for batch norm");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (optimizer.alpha0 < 0.0) throw ConfigError("alpha0 must be >= 0");
  if (optimizer.momentum < 0.0 || optimizer.momentum >= 1.0) {
    throw ConfigError("momentum must be in [0,1)");
  }
  if (optimizer.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (diagnostics.snr_samples < 10000) throw ConfigError("snr_samples must be >= 10000");
  if (dataset.kind == DatasetSpec::Kind::cifar10_binary) {
    if (model.class_count != 10) {
      throw ConfigError("cifar10_binary requires class_count = 10");
    }
    if (dataset.path.empty()) throw ConfigError("cifar10_binary requires data_path");
    if (dataset.subset_size < 0 || dataset.test_size < 0) {
      throw ConfigError("subset_size and test_size must be >= 0");
    }
  } else {
    if (dataset.train_samples < 2) throw ConfigError("synth_train_samples must be >= 2");
    if (dataset.test_samples < 1) throw ConfigError("synth_test_samples must be >= 1");
  }
}

std::string ExperimentConfig::echo() const {
  std::ostringstream os;
  os << "# model\n";
  os << "architecture = " << to_string(model.architecture) << "\n";
  os << "depth = " << model.depth << "\n";
  os << "width_multiplier = " << model.width_multiplier << "\n";
  os << "base_width = " << model.base_width << "\n";
  os << "class_count = " << model.class_count << "\n";
  os << "# noise\n";
  os << "noise_type = " << to_string(model.noise_type) << "\n";
  os << "noise_kind = " << noise_kind_str(model.noise_spec.kind) << "\n";
  os << "sigma = " << format_double(model.noise_spec.sigma) << "\n";
  os << "keep_prob = " << format_double(model.noise_spec.keep_prob) << "\n";
  os << "share_spatial = " << bool_str(model.noise_spec.share_spatial) << "\n";
  os << "skip_first_noise = " << bool_str(model.skip_first_noise) << "\n";
  os << "shake_backward = "
     << (model.shake.backward_mode == ShakeConfig::BackwardMode::even ? "even" : "shake") << "\n";
  os << "shake_per_sample = " << bool_str(model.shake.per_sample) << "\n";
  os << "# dataset\n";
  os << "dataset = " << to_string(dataset.kind) << "\n";
  os << "data_path = " << dataset.path << "\n";
  os << "subset_size = " << dataset.subset_size << "\n";
  os << "test_size = " << dataset.test_size << "\n";
  os << "synth_features = " << dataset.features << "\n";
  os << "synth_image_size = " << dataset.image_size << "\n";
  os << "synth_channels = " << dataset.channels << "\n";
  os << "synth_train_samples = " << dataset.train_samples << "\n";
  os << "synth_test_samples = " << dataset.test_samples << "\n";
  os << "dataset_seed = " << dataset.seed << "\n";
  os << "# optimization\n";
  os << "epochs = " << epochs << "\n";
  os << "batch_size = " << batch_size << "\n";
  os << "alpha0 = " << format_double(optimizer.alpha0) << "\n";
  os << "momentum = " << format_double(optimizer.momentum) << "\n";
  os << "weight_decay = " << format_double(optimizer.weight_decay) << "\n";
  os << "# run\n";
  os << "seeds = ";
  for (size_t i = 0; i < seeds.size(); ++i) {
    if (i) os << ",";
    os << seeds[i];
  }
  os << "\n";
  os << "output_dir = " << output_dir << "\n";
  os << "# diagnostics\n";
  os << "report_correlation = " << bool_str(diagnostics.correlation) << "\n";
  os << "report_snr = " << bool_str(diagnostics.snr) << "\n";
  os << "snr_samples = " << diagnostics.snr_samples << "\n";
  return os.str();
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(line_no, "expected 'key = value', got '" + trim(raw) + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(line_no, "missing key before '='");

    try {
      if (key == "architecture") {
        cfg.model.architecture = architecture_from_string(value);
      } else if (key == "depth") {
        cfg.model.depth = static_cast<int>(parse_int(value, line_no));
      } else if (key == "width_multiplier") {
        cfg.model.width_multiplier = static_cast<int>(parse_int(value, line_no));
      } else if (key == "base_width") {
        cfg.model.base_width = static_cast<int>(parse_int(value, line_no));
      } else if (key == "class_count") {
        cfg.model.class_count = static_cast<int>(parse_int(value, line_no));
        cfg.dataset.classes = cfg.model.class_count;
      } else if (key == "noise_type") {
        cfg.model.noise_type = noise_type_from_string(value);
      } else if (key == "noise_kind") {
        cfg.model.noise_spec.kind = noise_kind_from(value, line_no);
      } else if (key == "sigma") {
        const double s = parse_double(value, line_no);
        if (s < 0.0) fail(line_no, "constraint violated: sigma >= 0");
        cfg.model.noise_spec.sigma = s;
      } else if (key == "keep_prob") {
        const double p = parse_double(value, line_no);
        if (p <= 0.0 || p > 1.0) fail(line_no, "constraint violated: keep_prob in (0,1]");
        cfg.model.noise_spec.keep_prob = p;
      } else if (key == "share_spatial") {
        cfg.model.noise_spec.share_spatial = parse_bool(value, line_no);
      } else if (key == "skip_first_noise") {
        cfg.model.skip_first_noise = parse_bool(value, line_no);
      } else if (key == "shake_backward") {
        if (value == "even") {
          cfg.model.shake.backward_mode = ShakeConfig::BackwardMode::even;
        } else if (value == "shake") {
          cfg.model.shake.backward_mode = ShakeConfig::BackwardMode::shake;
        } else {
          fail(line_no, "shake_backward must be even or shake");
        }
      } else if (key == "shake_per_sample") {
        cfg.model.shake.per_sample = parse_bool(value, line_no);
      } else if (key == "dataset") {
        cfg.dataset.kind = dataset_kind_from_string(value);
      } else if (key == "data_path") {
        cfg.dataset.path = value;
      } else if (key == "subset_size") {
        cfg.dataset.subset_size = static_cast<int>(parse_int(value, line_no));
      } else if (key == "test_size") {
        cfg.dataset.test_size = static_cast<int>(parse_int(value, line_no));
      } else if (key == "synth_features") {
        cfg.dataset.features = static_cast<int>(parse_int(value, line_no));
      } else if (key == "synth_image_size") {
        cfg.dataset.image_size = static_cast<int>(parse_int(value, line_no));
      } else if (key == "synth_channels") {
        cfg.dataset.channels = static_cast<int>(parse_int(value, line_no));
      } else if (key == "synth_train_samples") {
        cfg.dataset.train_samples = static_cast<int>(parse_int(value, line_no));
      } else if (key == "synth_test_samples") {
        cfg.dataset.test_samples = static_cast<int>(parse_int(value, line_no));
      } else if (key == "dataset_seed") {
        cfg.dataset.seed = static_cast<std::uint64_t>(parse_int(value, line_no));
      } else if (key == "epochs") {
        cfg.epochs = static_cast<int>(parse_int(value, line_no));
      } else if (key == "batch_size") {
        cfg.batch_size = static_cast<int>(parse_int(value, line_no));
      } else if (key == "alpha0") {
        cfg.optimizer.alpha0 = parse_double(value, line_no);
      } else if (key == "momentum") {
        cfg.optimizer.momentum = parse_double(value, line_no);
      } else if (key == "weight_decay") {
        cfg.optimizer.weight_decay = parse_double(value, line_no);
      } else if (key == "seeds") {
        cfg.seeds = parse_seed_list(value, line_no);
      } else if (key == "output_dir") {
        cfg.output_dir = value;
      } else if (key == "report_correlation") {
        cfg.diagnostics.correlation = parse_bool(value, line_no);
      } else if (key == "report_snr") {
        cfg.diagnostics.snr = parse_bool(value, line_no);
      } else if (key == "snr_samples") {
        cfg.diagnostics.snr_samples = parse_int(value, line_no);
      } else {
        fail(line_no, "unknown key '" + key + "'");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      fail(line_no, e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace noiselab
