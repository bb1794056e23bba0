// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "noiselab/layers.hpp"
#include "test_util.hpp"

using namespace noiselab;
using namespace noiselab::testutil;

TEST_CASE("dense preactivation") {
  Tape tape;
  DenseParams p{Tensor(Shape{2, 1}, {2, 3})};
  Tensor x(Shape{1, 2}, {1, 1});
  CHECK(dense_preact(tape, x, p).values() == std::vector<double>{5});

  DenseParams zero{Tensor::zeros(Shape{2, 3})};
  CHECK(dense_preact(tape, x, zero).values() == std::vector<double>{0, 0, 0});

  CHECK(dense_preact(tape, x, p).values() == matmul(tape, x, p.weight).values());

  Tensor wide(Shape{1, 3}, {1, 1, 1});
  CHECK_THROWS_AS(dense_preact(tape, wide, p), ShapeError);
}

TEST_CASE("batch norm symmetry and constant channels") {
  {
    BNParams bn(1, 0.9, 0.0);
    Tape tape;
    Tensor z(Shape{2, 1}, {1, 3});
    Tensor out = batchnorm_standard(tape, z, bn, Mode::train);
    CHECK(out.values()[0] == doctest::Approx(-1.0));
    CHECK(out.values()[1] == doctest::Approx(1.0));
  }
  {
    BNParams bn(1);  // eps 1e-5
    Tape tape;
    Tensor z(Shape{3, 1}, {5, 5, 5});
    Tensor out = batchnorm_standard(tape, z, bn, Mode::train);
    CHECK(out.values() == std::vector<double>{0, 0, 0});
  }
}

TEST_CASE("batch norm statistics on a random batch") {
  Rng rng(21);
  BNParams bn(8);
  Tape tape;
  Tensor z = random_gaussian({64, 8}, rng, 10.0);
  Tensor out = batchnorm_standard(tape, z, bn, Mode::train);

  // direct statistic computation per channel
  for (int c = 0; c < 8; ++c) {
    double mean = 0.0, var = 0.0;
    for (int b = 0; b < 64; ++b) mean += out.values()[static_cast<size_t>(b) * 8 + c];
    mean /= 64.0;
    for (int b = 0; b < 64; ++b) {
      const double d = out.values()[static_cast<size_t>(b) * 8 + c] - mean;
      var += d * d;
    }
    var /= 64.0;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(var <= 1.0);
    CHECK(var >= 1.0 - 1e-6);  // shrunk only by eps
  }
}

TEST_CASE("batch norm contract and numeric errors") {
  BNParams bn(3);
  Tape tape;
  Tensor single(Shape{1, 3}, {1, 2, 3});
  CHECK_THROWS_AS(batchnorm_standard(tape, single, bn, Mode::train), ContractError);

  BNParams degenerate(2, 0.9, 0.0);
  degenerate.running_var = {1.0, 0.0};
  Tensor z(Shape{4, 2});
  CHECK_THROWS_AS(batchnorm_standard(tape, z, degenerate, Mode::eval), NumericError);
}

TEST_CASE("signal-statistics batch norm hand cases") {
  {
    BNParams bn(1, 0.9, 0.0);
    Tape tape;
    Tensor z_s(Shape{2, 1}, {0, 2});
    Tensor z(Shape{2, 1}, {1, 1});
    Tensor out = batchnorm_signal_stats(tape, z, z_s, bn);
    CHECK(out.values()[0] == doctest::Approx(0.0));
    CHECK(out.values()[1] == doctest::Approx(0.0));
  }
  {
    BNParams bn(1, 0.9, 0.0);
    Tape tape;
    Tensor z_s(Shape{2, 1}, {0, 2});
    Tensor z(Shape{2, 1}, {2, 0});
    Tensor out = batchnorm_signal_stats(tape, z, z_s, bn);
    CHECK(out.values()[0] == doctest::Approx(1.0));
    CHECK(out.values()[1] == doctest::Approx(-1.0));
  }
  {
    BNParams bn(1);
    Tape tape;
    Tensor z(Shape{2, 1}, {1, 2});
    Tensor other(Shape{3, 1}, {1, 2, 3});
    CHECK_THROWS_AS(batchnorm_signal_stats(tape, z, other, bn), ShapeError);
  }
}

TEST_CASE("signal-statistics batch norm degenerates to standard form") {
  Rng rng(4);
  Tensor z = random_tensor({16, 4}, rng);
  BNParams bn_a(4), bn_b(4);
  Tape ta, tb;
  Tensor a = batchnorm_standard(ta, z, bn_a, Mode::train);
  Tensor b = batchnorm_signal_stats(tb, z, z, bn_b);
  CHECK(a.values() == b.values());  // exact
  CHECK(bn_a.running_mean == bn_b.running_mean);
  CHECK(bn_a.running_var == bn_b.running_var);
}

TEST_CASE("signal-statistics batch norm tracks running stats of the noisy input") {
  Rng rng(8);
  Tensor z_s = random_tensor({32, 2}, rng);
  Tensor z(Shape{32, 2});
  for (std::int64_t i = 0; i < z.size(); ++i) {
    z.mutable_values()[i] = z_s.values()[i] + 5.0;  // shifted noisy path
  }
  BNParams bn(2);
  Tape tape;
  batchnorm_signal_stats(tape, z, z_s, bn);
  std::vector<double> mean_z, var_z;
  batch_stats(z, mean_z, var_z);
  for (int c = 0; c < 2; ++c) {
    CHECK(bn.running_mean[static_cast<size_t>(c)] ==
          doctest::Approx(0.1 * mean_z[static_cast<size_t>(c)]));
  }
}

TEST_CASE("affine activation") {
  {
    BNParams bn(3);
    Tape tape;
    Tensor z(Shape{2, 3}, {1, -2, 0.5, 0, 1, -1});
    Tensor out = affine_activation(tape, z, bn, ActivationKind::identity);
    CHECK(out.values() == z.values());
  }
  {
    BNParams bn(1);
    bn.gamma.mutable_values()[0] = 2.0;
    bn.beta.mutable_values()[0] = 1.0;
    Tape tape;
    Tensor z(Shape{2, 1}, {-1, 1});
    Tensor out = affine_activation(tape, z, bn, ActivationKind::relu);
    CHECK(out.values() == std::vector<double>{0, 3});
  }
  {
    BNParams bn(1);
    Tensor z(Shape{1, 1}, {3.0});
    Tape tape;
    Tensor l = sum_all(tape, affine_activation(tape, z, bn, ActivationKind::identity));
    tape.backward(l);
    CHECK(bn.gamma.grad()[0] == 3.0);
  }
}

TEST_CASE("batch mean of squared normalized output is constant per sample") {
  // s = mean_batch(BN(z)^2) with eps=0: the analytic gradient wrt every
  // sample must vanish.
  Rng rng(31);
  Tensor z = random_tensor({6, 1}, rng);
  BNParams bn(1, 0.9, 0.0);
  auto loss = [&](Tape& t) {
    Tensor out = batchnorm_standard(t, z, bn, Mode::train, false);
    return reduce_mean(t, square(t, out), {0, 1}, false);
  };
  const auto g = tape_grad(loss, z);
  for (double gi : g) CHECK(std::abs(gi) < 1e-8);

  // finite differences see only O(step^2) movement
  const auto fd = finite_diff(loss, z, 1e-4);
  for (double fi : fd) CHECK(std::abs(fi) < 1e-6);
}

TEST_CASE("running statistics converge to the data distribution") {
  // Fixed N(3, 2^2) channel; after many batches the running stats sit inside
  // the 3-sigma band of the EMA estimator and eval-mode output tracks
  // train-mode output.
  Rng rng(17);
  BNParams bn(1);
  const int batches = 300, m = 32;
  for (int i = 0; i < batches; ++i) {
    Tensor z(Shape{m, 1});
    for (auto& v : z.mutable_values()) v = 3.0 + 2.0 * rng.gaussian();
    Tape tape;
    batchnorm_standard(tape, z, bn, Mode::train);
  }
  // EMA variance factor (1-m)/(1+m) with momentum 0.9
  const double ema_factor = 0.1 / 1.9;
  const double se_mean = std::sqrt(ema_factor * 4.0 / m);
  const double se_var = std::sqrt(ema_factor * 2.0 * 16.0 / m);
  CHECK(std::abs(bn.running_mean[0] - 3.0) < 3.0 * se_mean);
  CHECK(std::abs(bn.running_var[0] - 4.0) < 3.0 * se_var);

  // Train-vs-eval discrepancy on a fresh batch is driven by the fresh
  // batch's sampling noise plus the EMA noise of the running stats:
  // E[diff^2] ~ (1/m_f + ema/m)/1 + (1/(2 m_f) + ema/m) in normalized units,
  // rms ~ 0.073 here; bound at twice that.
  const int m_fresh = 512;
  Tensor fresh(Shape{m_fresh, 1});
  for (auto& v : fresh.mutable_values()) v = 3.0 + 2.0 * rng.gaussian();
  Tape t1, t2;
  BNParams bn_snapshot = bn;
  Tensor train_out = batchnorm_standard(t1, fresh, bn_snapshot, Mode::train);
  Tensor eval_out = batchnorm_standard(t2, fresh, bn, Mode::eval);
  double rms = 0.0;
  for (std::int64_t i = 0; i < train_out.size(); ++i) {
    const double d = train_out.values()[i] - eval_out.values()[i];
    rms += d * d;
  }
  rms = std::sqrt(rms / static_cast<double>(train_out.size()));
  CHECK(rms < 0.15);
}

TEST_CASE("conv batch norm pools statistics over batch and spatial axes") {
  Rng rng(41);
  BNParams bn(3);
  Tensor z = random_tensor({2, 3, 4, 4}, rng);
  Tape tape;
  Tensor out = batchnorm_standard(tape, z, bn, Mode::train);
  std::vector<double> mean, var;
  batch_stats(out, mean, var);
  for (int c = 0; c < 3; ++c) {
    CHECK(std::abs(mean[static_cast<size_t>(c)]) < 1e-12);
    CHECK(var[static_cast<size_t>(c)] == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("layer gradients pass finite differences through batch norm") {
  Rng rng(55);
  NormLayer layer = NormLayer::dense(5, 3);
  Tensor w = std::get<DenseParams>(layer.weights).weight;
  for (auto& v : w.mutable_values()) v = 0.5 * rng.gaussian();
  Tensor x = random_tensor({6, 5}, rng);
  auto loss = [&](Tape& t) {
    return sum_all(t, square(t, layer_activation(t, x, layer, Mode::train, false)));
  };
  for (Tensor p : {x, w, layer.bn.gamma, layer.bn.beta}) {
    CHECK(max_rel_err(tape_grad(loss, p), finite_diff(loss, p)) < 1e-4);
  }
}
