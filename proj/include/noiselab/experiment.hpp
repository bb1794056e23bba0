// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>

#include "noiselab/config.hpp"
#include "noiselab/diagnostics.hpp"

namespace noiselab {

/// Environment variable that, when set, prefixes relative output_dir paths.
inline constexpr const char* kOutputRootEnv = "NOISELAB_OUTPUT_ROOT";

struct LayerSnr {
  std::string layer;
  int units = 0;
  double analytic_mean = 0.0;
  SNRReport unit0;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  TrainReport report;
  std::optional<CorrelationReport> correlation;
  std::vector<LayerSnr> snr;
};

struct Aggregate {
  double mean = 0.0;
  double std_dev = 0.0;  // population
};

Aggregate aggregate(const std::vector<double>& values);

struct ReportBundle {
  std::string config_input;  // byte-identical to what was parsed
  std::string config_echo;
  std::vector<SeedOutcome> outcomes;
  Aggregate final_eval_acc;
  bool diverged = false;
  std::string output_dir;  // resolved
};

/// Trains every seed, writes train.csv / summary.json / checkpoints and the
/// optional diagnostics reports into the resolved output directory.
ReportBundle run_experiment(const ExperimentConfig& cfg, const std::string& config_input_text);

struct SweepPoint {
  int width = 1;
  double sigma = 0.0;
  double mean_error = 0.0;
  bool argmin = false;
};

struct SweepReport {
  std::vector<SweepPoint> points;
  std::string output_dir;
  bool diverged = false;
};

/// One run per (width, sigma); emits sweep.csv / sweep.json with the
/// per-width error minimum marked.
SweepReport sweep_noise_variance(const ExperimentConfig& cfg, const std::string& config_input_text,
                                 const std::vector<double>& sigma_grid,
                                 const std::vector<int>& widths = {});

std::string resolve_output_dir(const std::string& configured);

/// Versioned text checkpoint (hex floats, exact round trip) of all trainable
/// parameters and batch-norm running statistics.
void save_checkpoint(Model& model, const std::string& path);
void load_checkpoint(Model& model, const std::string& path);

CorrelationReport run_correlation_report(Model& model, const Dataset& eval_data, int batch);
std::vector<LayerSnr> run_snr_report(Model& model, const Dataset& eval_data, double sigma,
                                     NoiseKind kind, long long n_samples, int batch);

void write_reports(const ReportBundle& bundle, const ExperimentConfig& cfg);

}  // namespace noiselab
