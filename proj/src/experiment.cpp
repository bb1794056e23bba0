// SPDX-License-Identifier: Apache-2.0
#include "noiselab/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "noiselab/version.hpp"

namespace noiselab {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string hexfmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

std::string timestamp_utc() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<std::pair<std::string, NormLayer*>> model_layers(Model& m) {
  std::vector<std::pair<std::string, NormLayer*>> out;
  if (m.cfg_.architecture == Architecture::plain_cnn) {
    for (size_t i = 0; i < m.plain_layers_.size(); ++i) {
      out.push_back({"layer" + std::to_string(i), &m.plain_layers_[i]});
    }
    return out;
  }
  out.push_back({"stem", &m.stem_});
  for (size_t b = 0; b < m.blocks_.size(); ++b) {
    out.push_back({"block" + std::to_string(b) + ".conv1", &m.blocks_[b].layer1});
    out.push_back({"block" + std::to_string(b) + ".conv2", &m.blocks_[b].layer2});
  }
  for (size_t b = 0; b < m.shake_blocks_.size(); ++b) {
    const std::string p = "block" + std::to_string(b);
    out.push_back({p + ".b1.conv1", &m.shake_blocks_[b].branch1.layer1});
    out.push_back({p + ".b1.conv2", &m.shake_blocks_[b].branch1.layer2});
    out.push_back({p + ".b2.conv1", &m.shake_blocks_[b].branch2.layer1});
    out.push_back({p + ".b2.conv2", &m.shake_blocks_[b].branch2.layer2});
  }
  return out;
}

std::vector<int> head_indices(int n, int max) {
  std::vector<int> idx(static_cast<size_t>(std::min(n, max)));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  return idx;
}

// Rows are layer-input samples for one output unit: dense rows are the
// batch, conv rows are kernel-window patches across batch and positions.
struct PatchMatrix {
  int dim = 0;
  std::vector<double> rows;  // n x dim
  long long count() const { return dim == 0 ? 0 : static_cast<long long>(rows.size()) / dim; }
};

PatchMatrix gather_patches(const Tensor& input, const NormLayer& layer, long long max_rows) {
  PatchMatrix pm;
  if (std::holds_alternative<DenseParams>(layer.weights)) {
    pm.dim = input.dim(1);
    const long long n = std::min<long long>(input.dim(0), max_rows);
    pm.rows.assign(input.values().begin(), input.values().begin() + n * pm.dim);
    return pm;
  }
  const auto& c = std::get<ConvParams>(layer.weights);
  const int kh = c.weight.dim(2), kw = c.weight.dim(3);
  const int ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int oh = (h + 2 * c.pad - kh) / c.stride + 1;
  const int ow = (w + 2 * c.pad - kw) / c.stride + 1;
  pm.dim = ci * kh * kw;
  const auto& v = input.values();
  for (int s = 0; s < input.dim(0) && pm.count() < max_rows; ++s) {
    for (int oy = 0; oy < oh && pm.count() < max_rows; ++oy) {
      for (int ox = 0; ox < ow && pm.count() < max_rows; ++ox) {
        for (int cc = 0; cc < ci; ++cc) {
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const int y = oy * c.stride - c.pad + ky;
              const int x = ox * c.stride - c.pad + kx;
              double val = 0.0;
              if (y >= 0 && y < h && x >= 0 && x < w) {
                val = v[((static_cast<std::int64_t>(s) * ci + cc) * h + y) * w + x];
              }
              pm.rows.push_back(val);
            }
          }
        }
      }
    }
  }
  return pm;
}

std::vector<double> unit_weights(const NormLayer& layer, int unit) {
  if (const auto* d = std::get_if<DenseParams>(&layer.weights)) {
    const int in = d->fan_in(), out = d->fan_out();
    std::vector<double> w(static_cast<size_t>(in));
    for (int i = 0; i < in; ++i) w[static_cast<size_t>(i)] = d->weight.values()[static_cast<size_t>(i) * out + unit];
    return w;
  }
  const auto& c = std::get<ConvParams>(layer.weights);
  const int dim = c.fan_in();
  const auto& v = c.weight.values();
  return std::vector<double>(v.begin() + static_cast<std::int64_t>(unit) * dim,
                             v.begin() + static_cast<std::int64_t>(unit + 1) * dim);
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << body;
}

}  // namespace

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  if (values.empty()) return a;
  for (double v : values) a.mean += v;
  a.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - a.mean) * (v - a.mean);
  a.std_dev = std::sqrt(var / static_cast<double>(values.size()));
  return a;
}

std::string resolve_output_dir(const std::string& configured) {
  const char* root = std::getenv(kOutputRootEnv);
  if (root != nullptr && root[0] != '\0' && fs::path(configured).is_relative()) {
    return (fs::path(root) / configured).string();
  }
  return configured;
}

void save_checkpoint(Model& model, const std::string& path) {
  std::ostringstream os;
  os << "noiselab-checkpoint v1\n";
  for (auto& p : model.parameters()) {
    os << "param " << p.name << " " << p.tensor.rank();
    for (int d : p.tensor.shape()) os << " " << d;
    os << "\n";
    const auto& v = p.tensor.values();
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) os << " ";
      os << hexfmt(v[i]);
    }
    os << "\n";
  }
  for (auto& [name, layer] : model_layers(model)) {
    for (const char* which : {"running_mean", "running_var"}) {
      const auto& v = std::string(which) == "running_mean" ? layer->bn.running_mean
                                                           : layer->bn.running_var;
      os << "stat " << name << "." << which << " " << v.size() << "\n";
      for (size_t i = 0; i < v.size(); ++i) {
        if (i) os << " ";
        os << hexfmt(v[i]);
      }
      os << "\n";
    }
  }
  os << "end\n";
  write_text(path, os.str());
}

void load_checkpoint(Model& model, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::string header;
  std::getline(in, header);
  if (header != "noiselab-checkpoint v1") {
    throw DataError("unsupported checkpoint header '" + header + "' in " + path);
  }

  std::map<std::string, Tensor> params;
  for (auto& p : model.parameters()) params.emplace(p.name, p.tensor);
  std::map<std::string, std::vector<double>*> stats;
  for (auto& [name, layer] : model_layers(model)) {
    stats[name + ".running_mean"] = &layer->bn.running_mean;
    stats[name + ".running_var"] = &layer->bn.running_var;
  }

  // values are hex floats; stream extraction of doubles cannot parse those,
  // so read tokens and strtod them
  auto read_value = [&](double& v) {
    std::string tok;
    if (!(in >> tok)) throw DataError("truncated checkpoint " + path);
    char* end = nullptr;
    v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') {
      throw DataError("bad value token '" + tok + "' in checkpoint " + path);
    }
  };

  std::string word;
  while (in >> word) {
    if (word == "end") return;
    std::string name;
    in >> name;
    if (word == "param") {
      int rank = 0;
      in >> rank;
      Shape shape(static_cast<size_t>(rank));
      for (auto& d : shape) in >> d;
      if (!in) throw DataError("truncated checkpoint " + path);
      auto it = params.find(name);
      if (it == params.end()) throw DataError("checkpoint names unknown parameter " + name);
      if (it->second.shape() != shape) {
        throw DataError("checkpoint shape mismatch for " + name + ": expected " +
                        shape_str(it->second.shape()) + ", got " + shape_str(shape));
      }
      for (auto& v : it->second.mutable_values()) read_value(v);
    } else if (word == "stat") {
      size_t len = 0;
      in >> len;
      if (!in) throw DataError("truncated checkpoint " + path);
      auto it = stats.find(name);
      if (it == stats.end()) throw DataError("checkpoint names unknown statistic " + name);
      if (it->second->size() != len) throw DataError("checkpoint length mismatch for " + name);
      for (auto& v : *it->second) read_value(v);
    } else {
      throw DataError("unexpected checkpoint token '" + word + "' in " + path);
    }
  }
  throw DataError("checkpoint " + path + " missing end marker");
}

CorrelationReport run_correlation_report(Model& model, const Dataset& eval_data, int batch) {
  const auto idx = head_indices(eval_data.size(), batch);
  return correlation_report(model, eval_data.batch(idx));
}

std::vector<LayerSnr> run_snr_report(Model& model, const Dataset& eval_data, double sigma,
                                     NoiseKind kind, long long n_samples, int batch) {
  const auto idx = head_indices(eval_data.size(), batch);
  ActivationProbe probe;
  probe.want_layer_inputs = true;
  Tape tape;
  Rng unused(0);
  model.forward(tape, eval_data.batch(idx), Mode::eval, unused, &probe);

  NoiseSpec spec;
  spec.kind = kind;
  spec.sigma = sigma;
  if (kind == NoiseKind::bernoulli_dropout) spec.keep_prob = 0.5;

  auto layers = model_layers(model);
  std::map<std::string, NormLayer*> by_name(layers.begin(), layers.end());

  std::vector<LayerSnr> out;
  Rng rng = Rng(spec.seed).stream("snr-report");
  for (const auto& captured : probe.layer_inputs) {
    auto it = by_name.find(captured.name);
    if (it == by_name.end()) continue;
    NormLayer& layer = *it->second;
    const PatchMatrix pm = gather_patches(captured.values, layer, 4096);
    if (pm.count() < 2) continue;

    InputMoments moments;
    moments.mean.assign(static_cast<size_t>(pm.dim), 0.0);
    moments.second.assign(static_cast<size_t>(pm.dim),
                          std::vector<double>(static_cast<size_t>(pm.dim), 0.0));
    const long long n = pm.count();
    for (long long r = 0; r < n; ++r) {
      const double* row = pm.rows.data() + r * pm.dim;
      for (int i = 0; i < pm.dim; ++i) {
        moments.mean[static_cast<size_t>(i)] += row[i];
        for (int j = i; j < pm.dim; ++j) {
          moments.second[static_cast<size_t>(i)][static_cast<size_t>(j)] += row[i] * row[j];
        }
      }
    }
    for (int i = 0; i < pm.dim; ++i) {
      moments.mean[static_cast<size_t>(i)] /= static_cast<double>(n);
      for (int j = i; j < pm.dim; ++j) {
        moments.second[static_cast<size_t>(i)][static_cast<size_t>(j)] /= static_cast<double>(n);
        moments.second[static_cast<size_t>(j)][static_cast<size_t>(i)] =
            moments.second[static_cast<size_t>(i)][static_cast<size_t>(j)];
      }
    }

    const int units = std::holds_alternative<DenseParams>(layer.weights)
                          ? std::get<DenseParams>(layer.weights).fan_out()
                          : std::get<ConvParams>(layer.weights).fan_out();
    LayerSnr ls;
    ls.layer = captured.name;
    ls.units = units;
    double sum = 0.0;
    int counted = 0;
    for (int u = 0; u < units; ++u) {
      try {
        sum += snr_analytic(unit_weights(layer, u), moments, sigma);
        ++counted;
      } catch (const NumericError&) {
        // degenerate unit, skip
      }
    }
    ls.analytic_mean = counted > 0 ? sum / counted : 0.0;

    const auto w0 = unit_weights(layer, 0);
    InputSampler sampler = [&pm](Rng& r, std::vector<double>& x) {
      const double* row = pm.rows.data() + static_cast<std::int64_t>(r.below(
                                               static_cast<std::uint64_t>(pm.count()))) *
                                               pm.dim;
      std::copy(row, row + pm.dim, x.begin());
    };
    ls.unit0.sample_count = n_samples;
    ls.unit0.snr_analytic = snr_analytic(w0, moments, sigma);
    ls.unit0.snr_monte_carlo = snr_monte_carlo(w0, sampler, spec, n_samples, rng);
    const double denom = std::max(std::abs(ls.unit0.snr_analytic), 1e-300);
    ls.unit0.relative_gap = std::abs(ls.unit0.snr_monte_carlo - ls.unit0.snr_analytic) / denom;
    out.push_back(std::move(ls));
  }
  return out;
}

void write_reports(const ReportBundle& bundle, const ExperimentConfig& cfg) {
  fs::create_directories(bundle.output_dir);

  std::ostringstream csv;
  csv << "seed,epoch,lr,train_loss,train_acc,eval_acc\n";
  for (const auto& o : bundle.outcomes) {
    for (const auto& e : o.report.epochs) {
      csv << o.seed << "," << e.epoch << "," << fmt(e.lr_last) << "," << fmt(e.train_loss) << ","
          << fmt(e.train_acc) << "," << fmt(e.eval_acc) << "\n";
    }
  }
  write_text(bundle.output_dir + "/train.csv", csv.str());

  json j;
  j["version"] = kVersion;
  j["config_input"] = bundle.config_input;
  j["config_echo"] = bundle.config_echo;
  j["diverged"] = bundle.diverged;
  j["aggregate"] = {{"eval_acc_mean", bundle.final_eval_acc.mean},
                    {"eval_acc_std", bundle.final_eval_acc.std_dev},
                    {"eval_err_mean", 1.0 - bundle.final_eval_acc.mean}};
  json seeds = json::array();
  for (const auto& o : bundle.outcomes) {
    json s;
    s["seed"] = o.seed;
    s["initial_eval_acc"] = o.report.initial_eval_acc;
    s["final_eval_acc"] =
        o.report.epochs.empty() ? o.report.initial_eval_acc : o.report.epochs.back().eval_acc;
    s["param_count"] = o.report.param_count;
    s["diverged"] = o.report.diverged;
    if (o.report.diverged) s["divergence_note"] = o.report.divergence_note;
    if (o.correlation) {
      json corr;
      corr["grand_mean"] = o.correlation->grand_mean;
      json groups = json::array();
      for (const auto& g : o.correlation->groups) {
        groups.push_back({{"map_size", g.map_size},
                          {"mean_abs_corr", g.mean_abs_corr},
                          {"std_across_layers", g.std_across_layers},
                          {"layer_count", g.layer_count}});
      }
      corr["groups"] = groups;
      s["correlation"] = corr;
    }
    if (!o.snr.empty()) {
      json snr = json::array();
      for (const auto& l : o.snr) {
        snr.push_back({{"layer", l.layer},
                       {"units", l.units},
                       {"snr_analytic_mean", l.analytic_mean},
                       {"unit0_analytic", l.unit0.snr_analytic},
                       {"unit0_monte_carlo", l.unit0.snr_monte_carlo},
                       {"unit0_relative_gap", l.unit0.relative_gap},
                       {"samples", l.unit0.sample_count}});
      }
      s["snr"] = snr;
    }
    seeds.push_back(s);
  }
  j["seeds"] = seeds;
  j["meta"] = {{"timestamp", timestamp_utc()}};
  write_text(bundle.output_dir + "/summary.json", j.dump(2) + "\n");

  if (cfg.diagnostics.correlation) {
    std::ostringstream corr_csv;
    corr_csv << "seed,layer,map_size,mean_abs_corr\n";
    for (const auto& o : bundle.outcomes) {
      if (!o.correlation) continue;
      for (const auto& l : o.correlation->per_layer) {
        corr_csv << o.seed << "," << l.name << "," << l.map_size << "," << fmt(l.mean_abs_corr)
                 << "\n";
      }
    }
    write_text(bundle.output_dir + "/correlation.csv", corr_csv.str());
  }
  if (cfg.diagnostics.snr) {
    std::ostringstream snr_csv;
    snr_csv << "seed,layer,units,snr_analytic_mean,unit0_analytic,unit0_monte_carlo,unit0_relative_"
               "gap,samples\n";
    for (const auto& o : bundle.outcomes) {
      for (const auto& l : o.snr) {
        snr_csv << o.seed << "," << l.layer << "," << l.units << "," << fmt(l.analytic_mean) << ","
                << fmt(l.unit0.snr_analytic) << "," << fmt(l.unit0.snr_monte_carlo) << ","
                << fmt(l.unit0.relative_gap) << "," << l.unit0.sample_count << "\n";
      }
    }
    write_text(bundle.output_dir + "/snr.csv", snr_csv.str());
  }
}

ReportBundle run_experiment(const ExperimentConfig& cfg, const std::string& config_input_text) {
  cfg.validate();
  ReportBundle bundle;
  bundle.config_input = config_input_text;
  bundle.config_echo = cfg.echo();
  bundle.output_dir = resolve_output_dir(cfg.output_dir);
  fs::create_directories(bundle.output_dir);

  const DatasetPair data = load_dataset(cfg.dataset);
  const DataShape input{data.train.sample_shape};

  TrainOptions topts;
  topts.epochs = cfg.epochs;
  topts.batch_size = cfg.batch_size;
  topts.optimizer = cfg.optimizer;

  std::vector<double> finals;
  for (const std::uint64_t seed : cfg.seeds) {
    Rng init = Rng(seed).stream("init");
    Model model = build_model(cfg.model, input, init);
    SeedOutcome outcome;
    outcome.seed = seed;
    outcome.report = train(model, data.train, data.test, topts, seed);
    save_checkpoint(model, bundle.output_dir + "/checkpoint_seed" + std::to_string(seed) + ".txt");
    if (outcome.report.diverged) {
      bundle.diverged = true;
    } else {
      finals.push_back(outcome.report.epochs.empty() ? outcome.report.initial_eval_acc
                                                     : outcome.report.epochs.back().eval_acc);
      if (cfg.diagnostics.correlation) {
        outcome.correlation = run_correlation_report(model, data.test, 512);
      }
      if (cfg.diagnostics.snr) {
        outcome.snr = run_snr_report(model, data.test, cfg.model.noise_spec.sigma,
                                     cfg.model.noise_spec.kind, cfg.diagnostics.snr_samples, 64);
      }
    }
    bundle.outcomes.push_back(std::move(outcome));
  }
  bundle.final_eval_acc = aggregate(finals);
  write_reports(bundle, cfg);
  return bundle;
}

SweepReport sweep_noise_variance(const ExperimentConfig& cfg, const std::string& config_input_text,
                                 const std::vector<double>& sigma_grid,
                                 const std::vector<int>& widths) {
  if (sigma_grid.empty()) throw ConfigError("sweep needs a non-empty sigma grid");
  for (double s : sigma_grid) {
    if (s < 0.0) throw ConfigError("sweep sigma values must be >= 0");
  }
  std::vector<int> width_list = widths;
  if (width_list.empty()) width_list.push_back(cfg.model.width_multiplier);

  SweepReport report;
  report.output_dir = resolve_output_dir(cfg.output_dir);
  fs::create_directories(report.output_dir);

  for (const int w : width_list) {
    const size_t first = report.points.size();
    for (const double sigma : sigma_grid) {
      ExperimentConfig sub = cfg;
      sub.model.width_multiplier = w;
      sub.model.noise_spec.sigma = sigma;
      sub.output_dir = cfg.output_dir + "/sweep_w" + std::to_string(w) + "_s" + fmt(sigma);
      const ReportBundle bundle = run_experiment(sub, config_input_text);
      SweepPoint point;
      point.width = w;
      point.sigma = sigma;
      point.mean_error = 1.0 - bundle.final_eval_acc.mean;
      if (bundle.diverged) report.diverged = true;
      report.points.push_back(point);
    }
    size_t best = first;
    for (size_t i = first; i < report.points.size(); ++i) {
      if (report.points[i].mean_error < report.points[best].mean_error) best = i;
    }
    report.points[best].argmin = true;
  }

  std::ostringstream csv;
  csv << "width,sigma,sigma_sq,mean_error,argmin\n";
  for (const auto& p : report.points) {
    csv << p.width << "," << fmt(p.sigma) << "," << fmt(p.sigma * p.sigma) << ","
        << fmt(p.mean_error) << "," << (p.argmin ? 1 : 0) << "\n";
  }
  write_text(report.output_dir + "/sweep.csv", csv.str());

  json j;
  j["version"] = kVersion;
  json points = json::array();
  for (const auto& p : report.points) {
    points.push_back({{"width", p.width},
                      {"sigma", p.sigma},
                      {"sigma_sq", p.sigma * p.sigma},
                      {"mean_error", p.mean_error},
                      {"argmin", p.argmin}});
  }
  j["points"] = points;
  j["diverged"] = report.diverged;
  j["meta"] = {{"timestamp", timestamp_utc()}};
  write_text(report.output_dir + "/sweep.json", j.dump(2) + "\n");
  return report;
}

}  // namespace noiselab
