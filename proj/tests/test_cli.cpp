// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "noiselab/config.hpp"
#include "noiselab/experiment.hpp"

using namespace noiselab;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("noiselab_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string tiny_config(const fs::path& out_dir, const std::string& extra = "") {
  std::ostringstream os;
  os << "architecture = plain_cnn\n"
     << "depth = 2\n"
     << "base_width = 8\n"
     << "class_count = 2\n"
     << "dataset = synthetic_blobs\n"
     << "synth_features = 8\n"
     << "synth_train_samples = 96\n"
     << "synth_test_samples = 48\n"
     << "epochs = 2\n"
     << "batch_size = 32\n"
     << "alpha0 = 0.05\n"
     << "seeds = 1,2,3\n"
     << "output_dir = " << out_dir.string() << "\n"
     << extra;
  return os.str();
}

}  // namespace

TEST_CASE("the documented table-4 style setting parses") {
  const ExperimentConfig cfg = parse_config(
      "noise_type = ncmn1\n"
      "sigma = 0.35\n"
      "alpha0 = 0.04\n");
  CHECK(cfg.model.noise_type == NoiseType::ncmn1);
  CHECK(cfg.model.noise_spec.sigma == 0.35);
  CHECK(cfg.optimizer.alpha0 == 0.04);
}

TEST_CASE("constraint violations name the line and the constraint") {
  try {
    parse_config("depth = 4\nsigma = -0.1\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("sigma >= 0") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("keep_prob = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("dataset = cifar10_binary\ndata_path = x.bin\n"), ConfigError);
}

TEST_CASE("unknown keys and malformed lines are parse errors with line numbers") {
  try {
    parse_config("depth = 4\nnot_a_key = 3\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    CHECK(std::string(e.what()).find("not_a_key") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("just words\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("depth = abc\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("seeds = \n"), ConfigError);
}

TEST_CASE("empty config yields every documented default, echoed") {
  const ExperimentConfig cfg = parse_config("");
  CHECK(cfg.model.depth == 4);
  CHECK(cfg.model.noise_type == NoiseType::none);
  CHECK(cfg.batch_size == 64);
  CHECK(cfg.optimizer.alpha0 == 0.04);
  CHECK(cfg.optimizer.momentum == 0.9);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{1});
  const std::string echo = cfg.echo();
  CHECK(echo.find("depth = 4") != std::string::npos);
  CHECK(echo.find("noise_type = none") != std::string::npos);
}

TEST_CASE("config round-trip is a fixed point") {
  const std::string text =
      "# comment\n"
      "architecture = residual\n"
      "depth = 5\n"
      "noise_type = ncmn2\n"
      "sigma = 0.35\n"
      "alpha0 = 0.03\n"
      "weight_decay = 2e-05\n"
      "seeds = 4,5\n";
  const ExperimentConfig cfg = parse_config(text);
  const std::string echo1 = cfg.echo();
  const std::string echo2 = parse_config(echo1).echo();
  CHECK(echo1 == echo2);

  const std::string default_echo = parse_config("").echo();
  CHECK(parse_config(default_echo).echo() == default_echo);
}

TEST_CASE("blob generation is deterministic and labeled in range") {
  DatasetSpec spec;
  spec.kind = DatasetSpec::Kind::synthetic_blobs;
  spec.classes = 2;
  spec.features = 16;
  spec.train_samples = 512;
  spec.test_samples = 32;
  spec.seed = 7;
  const DatasetPair a = make_blobs(spec);
  const DatasetPair b = make_blobs(spec);
  CHECK(a.train.size() == 512);
  CHECK(a.train.data == b.train.data);
  CHECK(a.train.labels == b.train.labels);
  for (int lab : a.train.labels) CHECK((lab == 0 || lab == 1));
}

TEST_CASE("cifar-10 binary fixture round-trips byte for byte") {
  const fs::path dir = fresh_dir("cifar");
  const fs::path file = dir / "two_records.bin";
  {
    std::ofstream out(file, std::ios::binary);
    // record 1: label 3, pixel k = (k*7+13) % 256
    out.put(3);
    for (int k = 0; k < 3072; ++k) out.put(static_cast<char>((k * 7 + 13) % 256));
    // record 2: label 7, pixel k = (k*11+5) % 256
    out.put(7);
    for (int k = 0; k < 3072; ++k) out.put(static_cast<char>((k * 11 + 5) % 256));
  }
  const Dataset d = read_cifar10_records(file.string(), 0);
  REQUIRE(d.size() == 2);
  CHECK(d.labels == std::vector<int>{3, 7});
  CHECK(d.sample_shape == Shape{3, 32, 32});
  for (int k = 0; k < 3072; ++k) {
    CHECK(d.data[static_cast<size_t>(k)] == static_cast<double>((k * 7 + 13) % 256) / 255.0);
    CHECK(d.data[static_cast<size_t>(3072 + k)] ==
          static_cast<double>((k * 11 + 5) % 256) / 255.0);
  }
  fs::remove_all(dir);
}

TEST_CASE("cifar-10 format errors") {
  const fs::path dir = fresh_dir("cifar_bad");
  {
    std::ofstream out(dir / "truncated.bin", std::ios::binary);
    for (int k = 0; k < 3072; ++k) out.put(0);  // one byte short of a record
  }
  CHECK_THROWS_AS(read_cifar10_records((dir / "truncated.bin").string(), 0), DataError);
  {
    std::ofstream out(dir / "badlabel.bin", std::ios::binary);
    out.put(static_cast<char>(11));
    for (int k = 0; k < 3072; ++k) out.put(0);
  }
  CHECK_THROWS_AS(read_cifar10_records((dir / "badlabel.bin").string(), 0), DataError);
  CHECK_THROWS_AS(read_cifar10_records((dir / "missing.bin").string(), 0), DataError);
  fs::remove_all(dir);
}

TEST_CASE("single cifar file splits into train and test subsets") {
  const fs::path dir = fresh_dir("cifar_split");
  const fs::path file = dir / "six.bin";
  {
    std::ofstream out(file, std::ios::binary);
    for (int r = 0; r < 6; ++r) {
      out.put(static_cast<char>(r % 10));
      for (int k = 0; k < 3072; ++k) out.put(static_cast<char>(r));
    }
  }
  DatasetSpec spec;
  spec.kind = DatasetSpec::Kind::cifar10_binary;
  spec.path = file.string();
  spec.subset_size = 4;
  spec.test_size = 2;
  const DatasetPair pair = load_dataset(spec);
  CHECK(pair.train.size() == 4);
  CHECK(pair.test.size() == 2);
  CHECK(pair.test.labels == std::vector<int>{4, 5});

  spec.subset_size = 5;
  spec.test_size = 2;  // 7 > 6 records
  CHECK_THROWS_AS(load_dataset(spec), DataError);
  fs::remove_all(dir);
}

TEST_CASE("population aggregate of known values") {
  const Aggregate a = aggregate({0.90, 0.92, 0.94});
  CHECK(a.mean == doctest::Approx(0.92));
  CHECK(a.std_dev == doctest::Approx(0.0163299316).epsilon(1e-6));
}

TEST_CASE("run_experiment writes deterministic reports") {
  const fs::path out = fresh_dir("run");
  const std::string text = tiny_config(out);
  const ExperimentConfig cfg = parse_config(text);

  const ReportBundle b1 = run_experiment(cfg, text);
  CHECK(b1.outcomes.size() == 3);
  CHECK(!b1.diverged);
  CHECK(fs::exists(out / "train.csv"));
  CHECK(fs::exists(out / "summary.json"));
  CHECK(fs::exists(out / "checkpoint_seed1.txt"));
  const std::string csv1 = read_file(out / "train.csv");
  const std::string json1 = read_file(out / "summary.json");

  const ReportBundle b2 = run_experiment(cfg, text);
  CHECK(read_file(out / "train.csv") == csv1);  // byte-identical body

  auto j1 = nlohmann::json::parse(json1);
  auto j2 = nlohmann::json::parse(read_file(out / "summary.json"));
  CHECK(j1.contains("meta"));
  j1.erase("meta");
  j2.erase("meta");
  CHECK(j1.dump() == j2.dump());  // identical outside the metadata block

  CHECK(j1["config_input"] == text);  // byte-identical config echo in the bundle
  CHECK(b2.config_input == text);
  fs::remove_all(out);
}

TEST_CASE("run_experiment emits diagnostics reports when asked") {
  const fs::path out = fresh_dir("run_diag");
  const std::string text = tiny_config(out,
                                       "report_correlation = true\n"
                                       "report_snr = true\n"
                                       "snr_samples = 20000\n"
                                       "seeds = 1\n");
  const ExperimentConfig cfg = parse_config(text);
  const ReportBundle bundle = run_experiment(cfg, text);
  CHECK(fs::exists(out / "correlation.csv"));
  CHECK(fs::exists(out / "snr.csv"));
  REQUIRE(bundle.outcomes.size() == 1);
  REQUIRE(bundle.outcomes[0].correlation.has_value());
  for (const auto& l : bundle.outcomes[0].correlation->per_layer) {
    CHECK(l.mean_abs_corr >= 0.0);
    CHECK(l.mean_abs_corr <= 1.0);
  }
  CHECK(!bundle.outcomes[0].snr.empty());
  fs::remove_all(out);
}

TEST_CASE("checkpoints round-trip exactly") {
  const DatasetPair data = make_blobs([] {
    DatasetSpec s;
    s.classes = 2;
    s.features = 8;
    s.train_samples = 64;
    s.test_samples = 32;
    s.seed = 3;
    return s;
  }());
  ModelConfig mcfg;
  mcfg.depth = 2;
  mcfg.class_count = 2;
  Rng init = Rng(5).stream("init");
  Model model = build_model(mcfg, DataShape{data.train.sample_shape}, init);
  TrainOptions topts;
  topts.epochs = 1;
  topts.batch_size = 32;
  train(model, data.train, data.test, topts, 5);

  const fs::path dir = fresh_dir("ckpt");
  const std::string path = (dir / "model.txt").string();
  save_checkpoint(model, path);

  Rng init2 = Rng(6).stream("init");
  Model restored = build_model(mcfg, DataShape{data.train.sample_shape}, init2);
  load_checkpoint(restored, path);
  auto pa = model.parameters();
  auto pb = restored.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].tensor.values() == pb[i].tensor.values());  // exact
  }
  CHECK(model.plain_layers_[0].bn.running_mean == restored.plain_layers_[0].bn.running_mean);

  ModelConfig wide = mcfg;
  wide.base_width = 16;
  Rng init3 = Rng(7).stream("init");
  Model mismatched = build_model(wide, DataShape{data.train.sample_shape}, init3);
  CHECK_THROWS_AS(load_checkpoint(mismatched, path), DataError);
  fs::remove_all(dir);
}

TEST_CASE("sweep bookkeeping marks the argmin") {
  const fs::path out = fresh_dir("sweep");
  const std::string text = tiny_config(out, "noise_type = ncmn0\nseeds = 1\nepochs = 1\n");
  const ExperimentConfig cfg = parse_config(text);

  const SweepReport single = sweep_noise_variance(cfg, text, {0.0});
  CHECK(single.points.size() == 1);
  CHECK(single.points[0].argmin);

  const SweepReport grid = sweep_noise_variance(cfg, text, {0.0, 0.1, 0.2});
  CHECK(grid.points.size() == 3);
  int argmins = 0;
  for (const auto& p : grid.points) argmins += p.argmin ? 1 : 0;
  CHECK(argmins == 1);
  CHECK(fs::exists(out / "sweep.csv"));
  CHECK(fs::exists(out / "sweep.json"));

  CHECK_THROWS_AS(sweep_noise_variance(cfg, text, {}), ConfigError);
  CHECK_THROWS_AS(sweep_noise_variance(cfg, text, {-0.1}), ConfigError);
  fs::remove_all(out);
}

TEST_CASE("output root environment override") {
  setenv(kOutputRootEnv, "/tmp/noiselab_root", 1);
  CHECK(resolve_output_dir("runs/a") == "/tmp/noiselab_root/runs/a");
  CHECK(resolve_output_dir("/abs/path") == "/abs/path");
  unsetenv(kOutputRootEnv);
  CHECK(resolve_output_dir("runs/a") == "runs/a");
}

#ifdef NOISELAB_CLI_PATH
TEST_CASE("cli exit codes follow the documented contract") {
  const fs::path dir = fresh_dir("cli");
  const std::string cli = NOISELAB_CLI_PATH;

  auto run_cli = [&](const std::string& args) {
    const std::string cmd = cli + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
  };

  {
    std::ofstream bad(dir / "bad.cfg");
    bad << "sigma = -1\n";
  }
  CHECK(run_cli("run " + (dir / "bad.cfg").string()) == 1);

  {
    std::ofstream missing(dir / "missing_data.cfg");
    missing << "dataset = cifar10_binary\nclass_count = 10\ndata_path = " << (dir / "nope.bin").string()
            << "\noutput_dir = " << (dir / "out").string() << "\n";
  }
  CHECK(run_cli("run " + (dir / "missing_data.cfg").string()) == 2);

  {
    std::ofstream good(dir / "good.cfg");
    good << tiny_config(dir / "out_ok", "seeds = 1\nepochs = 1\n");
  }
  CHECK(run_cli("run " + (dir / "good.cfg").string()) == 0);

  {
    std::ofstream diverge(dir / "diverge.cfg");
    diverge << tiny_config(dir / "out_div", "seeds = 1\nepochs = 1\nalpha0 = 1e308\n");
  }
  CHECK(run_cli("run " + (dir / "diverge.cfg").string()) == 3);

  CHECK(run_cli("gradcheck") == 0);

  // diagnose consumes the checkpoint the good run just wrote
  CHECK(run_cli("diagnose " + (dir / "good.cfg").string() + " --model " +
                (dir / "out_ok" / "checkpoint_seed1.txt").string()) == 0);
  CHECK(fs::exists(dir / "out_ok" / "diagnose.json"));
  fs::remove_all(dir);
}
#endif
