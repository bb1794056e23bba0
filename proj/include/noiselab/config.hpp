// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "noiselab/dataset.hpp"
#include "noiselab/model.hpp"
#include "noiselab/train.hpp"

namespace noiselab {

struct DiagnosticsSpec {
  bool correlation = false;
  bool snr = false;
  long long snr_samples = 200000;
};

/// One experiment: model + dataset + optimization + seeds + outputs.
/// Configs are flat `key = value` text; see parse_config for the grammar.
struct ExperimentConfig {
  ModelConfig model;
  DatasetSpec dataset;
  OptimizerConfig optimizer;
  int epochs = 10;
  int batch_size = 64;
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "out";
  DiagnosticsSpec diagnostics;

  void validate() const;
  /// Canonical text form with every default resolved; parse(echo()) is a
  /// fixed point.
  std::string echo() const;
};

/// Parses flat `key = value` lines ('#' starts a comment, blank lines are
/// skipped, list values are comma-separated). Unknown keys, type mismatches
/// and constraint violations raise ConfigError naming the offending line.
ExperimentConfig parse_config(const std::string& text);

ExperimentConfig parse_config_file(const std::string& path);

}  // namespace noiselab
