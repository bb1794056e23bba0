// SPDX-License-Identifier: Apache-2.0
//
// Experiment driver: run / sweep / gradcheck / diagnose subcommands.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "noiselab/diagnostics.hpp"
#include "noiselab/experiment.hpp"
#include "noiselab/version.hpp"

namespace {

using namespace noiselab;

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<double> parse_grid(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stod(item));
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoi(item));
  }
  return out;
}

int cmd_run(const std::string& config_path) {
  const std::string text = slurp(config_path);
  const ExperimentConfig cfg = parse_config(text);
  const ReportBundle bundle = run_experiment(cfg, text);
  std::printf("run: %zu seed(s), eval accuracy %.4f +- %.4f -> %s\n", bundle.outcomes.size(),
              bundle.final_eval_acc.mean, bundle.final_eval_acc.std_dev,
              bundle.output_dir.c_str());
  if (bundle.diverged) {
    std::fprintf(stderr, "run diverged; partial reports kept in %s\n", bundle.output_dir.c_str());
    return 3;
  }
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& grid_csv,
              const std::string& widths_csv) {
  const std::string text = slurp(config_path);
  const ExperimentConfig cfg = parse_config(text);
  const auto grid = parse_grid(grid_csv);
  const auto widths = widths_csv.empty() ? std::vector<int>{} : parse_int_list(widths_csv);
  const SweepReport report = sweep_noise_variance(cfg, text, grid, widths);
  for (const auto& p : report.points) {
    std::printf("width %d  sigma %.4f  mean error %.4f%s\n", p.width, p.sigma, p.mean_error,
                p.argmin ? "  <- argmin" : "");
  }
  std::printf("sweep reports -> %s\n", report.output_dir.c_str());
  return report.diverged ? 3 : 0;
}

// Compact gradient oracle over representative composites, with fresh random
// instantiations per case.
int cmd_gradcheck() {
  Rng rng(20240531);
  auto rand_tensor = [&](Shape shape, double scale) {
    Tensor t(shape);
    for (auto& v : t.mutable_values()) v = scale * rng.gaussian();
    return t;
  };

  struct Case {
    std::string name;
    double max_rel_err;
    bool pass;
  };
  std::vector<Case> cases;
  const GradCheckOptions opts;

  {
    Tensor x = rand_tensor({4, 5}, 1.0);
    Tensor w = rand_tensor({5, 3}, 0.7);
    auto build = [&](Tape& t) { return sum_all(t, square(t, matmul(t, x, w))); };
    auto rep = grad_check(build, {{"x", x}, {"w", w}}, opts);
    cases.push_back({"matmul+square", rep.max_rel_err, rep.pass(opts.tolerance)});
  }
  {
    Tensor x = rand_tensor({2, 3, 5, 5}, 1.0);
    Tensor k = rand_tensor({4, 3, 3, 3}, 0.5);
    auto build = [&](Tape& t) { return sum_all(t, square(t, conv2d(t, x, k, 1, 1))); };
    auto rep = grad_check(build, {{"x", x}, {"k", k}}, opts);
    cases.push_back({"conv2d+square", rep.max_rel_err, rep.pass(opts.tolerance)});
  }
  {
    NormLayer layer = NormLayer::dense(6, 4);
    Tensor w = std::get<DenseParams>(layer.weights).weight;
    for (auto& v : w.mutable_values()) v = 0.6 * rng.gaussian();
    Tensor x = rand_tensor({8, 6}, 1.0);
    auto build = [&](Tape& t) {
      return sum_all(t, square(t, layer_activation(t, x, layer, Mode::train, false)));
    };
    auto rep = grad_check(
        build, {{"x", x}, {"w", w}, {"gamma", layer.bn.gamma}, {"beta", layer.bn.beta}}, opts);
    cases.push_back({"dense+bn+relu", rep.max_rel_err, rep.pass(opts.tolerance)});
  }

  bool all_pass = true;
  for (const auto& c : cases) {
    std::printf("%-16s max rel err %.3e  %s\n", c.name.c_str(), c.max_rel_err,
                c.pass ? "ok" : "FAIL");
    all_pass = all_pass && c.pass;
  }
  return all_pass ? 0 : 3;
}

int cmd_diagnose(const std::string& config_path, const std::string& checkpoint) {
  const std::string text = slurp(config_path);
  const ExperimentConfig cfg = parse_config(text);
  const DatasetPair data = load_dataset(cfg.dataset);
  Rng init = Rng(cfg.seeds.front()).stream("init");
  Model model = build_model(cfg.model, DataShape{data.train.sample_shape}, init);
  load_checkpoint(model, checkpoint);

  const auto corr = run_correlation_report(model, data.test, 512);
  std::printf("correlation grand mean |rho| = %.4f\n", corr.grand_mean);
  for (const auto& g : corr.groups) {
    std::printf("  map %2dx%-2d  mean |rho| %.4f  (std across %d layers %.4f)\n", g.map_size,
                g.map_size, g.mean_abs_corr, g.layer_count, g.std_across_layers);
  }
  const double sigma = cfg.model.noise_spec.sigma > 0 ? cfg.model.noise_spec.sigma : 0.35;
  const auto snr = run_snr_report(model, data.test, sigma, cfg.model.noise_spec.kind,
                                  cfg.diagnostics.snr_samples, 64);
  for (const auto& l : snr) {
    std::printf("  %-14s units %3d  SNR analytic %.3f  unit0 mc %.3f (gap %.2f%%)\n",
                l.layer.c_str(), l.units, l.analytic_mean, l.unit0.snr_monte_carlo,
                100.0 * l.unit0.relative_gap);
  }

  nlohmann::json j;
  j["version"] = kVersion;
  j["checkpoint"] = checkpoint;
  j["correlation_grand_mean"] = corr.grand_mean;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : corr.per_layer) {
    layers.push_back({{"layer", l.name}, {"map_size", l.map_size}, {"mean_abs_corr", l.mean_abs_corr}});
  }
  j["correlation_per_layer"] = layers;
  nlohmann::json snrj = nlohmann::json::array();
  for (const auto& l : snr) {
    snrj.push_back({{"layer", l.layer},
                    {"units", l.units},
                    {"snr_analytic_mean", l.analytic_mean},
                    {"unit0_monte_carlo", l.unit0.snr_monte_carlo}});
  }
  j["snr"] = snrj;
  const std::string out = resolve_output_dir(cfg.output_dir);
  std::filesystem::create_directories(out);
  std::ofstream of(out + "/diagnose.json");
  of << j.dump(2) << "\n";
  std::printf("diagnose report -> %s/diagnose.json\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multiplicative-noise workbench"};
  app.set_version_flag("--version", std::string(noiselab::kVersion));
  app.require_subcommand(1);

  std::string config_path, checkpoint, grid_csv = "0.0", widths_csv;

  auto* run = app.add_subcommand("run", "train every seed of a config and write reports");
  run->add_option("config", config_path, "config file")->required();

  auto* sweep = app.add_subcommand("sweep", "run a noise-variance sweep");
  sweep->add_option("config", config_path, "config file")->required();
  sweep->add_option("--sigma-grid", grid_csv, "comma-separated sigma values")->required();
  sweep->add_option("--widths", widths_csv, "comma-separated width multipliers");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient oracle");

  auto* diagnose = app.add_subcommand("diagnose", "correlation/SNR reports for a checkpoint");
  diagnose->add_option("config", config_path, "config file")->required();
  diagnose->add_option("--model", checkpoint, "checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path);
    if (sweep->parsed()) return cmd_sweep(config_path, grid_csv, widths_csv);
    if (gradcheck->parsed()) return cmd_gradcheck();
    if (diagnose->parsed()) return cmd_diagnose(config_path, checkpoint);
  } catch (const noiselab::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const noiselab::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const noiselab::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
