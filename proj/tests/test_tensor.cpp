// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "noiselab/ops.hpp"
#include "test_util.hpp"

using namespace noiselab;
using namespace noiselab::testutil;

namespace {

// Direct quadruple-loop cross-correlation, the independent oracle for conv2d.
void conv_oracle(const Tensor& x, const Tensor& k, int stride, int pad, Tensor& out) {
  const int b = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  out = Tensor(Shape{b, co, oh, ow});
  auto& ov = out.mutable_values();
  const auto& xv = x.values();
  const auto& kv = k.values();
  for (int s = 0; s < b; ++s)
    for (int o = 0; o < co; ++o)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (int c = 0; c < ci; ++c)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int y = oy * stride - pad + ky;
                const int xx = ox * stride - pad + kx;
                if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
                acc += xv[((static_cast<std::int64_t>(s) * ci + c) * h + y) * w + xx] *
                       kv[((static_cast<std::int64_t>(o) * ci + c) * kh + ky) * kw + kx];
              }
          ov[((static_cast<std::int64_t>(s) * co + o) * oh + oy) * ow + ox] = acc;
        }
}

// Gradients of sum(upstream (.) conv(x,k)) accumulated straight from the
// cross-correlation definition.
void conv_grad_oracle(const Tensor& x, const Tensor& k, const Tensor& upstream, int stride,
                      int pad, Tensor& gx, Tensor& gk) {
  const int b = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = upstream.dim(2), ow = upstream.dim(3);
  gx = Tensor(x.shape());
  gk = Tensor(k.shape());
  auto& gxv = gx.mutable_values();
  auto& gkv = gk.mutable_values();
  const auto& xv = x.values();
  const auto& kv = k.values();
  const auto& uv = upstream.values();
  for (int s = 0; s < b; ++s)
    for (int o = 0; o < co; ++o)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const double g = uv[((static_cast<std::int64_t>(s) * co + o) * oh + oy) * ow + ox];
          for (int c = 0; c < ci; ++c)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int y = oy * stride - pad + ky;
                const int xx = ox * stride - pad + kx;
                if (y < 0 || y >= h || xx < 0 || xx >= w) continue;
                const auto xi = ((static_cast<std::int64_t>(s) * ci + c) * h + y) * w + xx;
                const auto kidx = ((static_cast<std::int64_t>(o) * ci + c) * kh + ky) * kw + kx;
                gxv[xi] += g * kv[kidx];
                gkv[kidx] += g * xv[xi];
              }
        }
}

}  // namespace

TEST_CASE("elementwise mul and scalar broadcast") {
  Tape tape;
  Tensor a(Shape{3}, {1, 2, 3});
  Tensor b(Shape{3}, {2, 2, 2});
  CHECK(mul(tape, a, b).values() == std::vector<double>{2, 4, 6});
  CHECK(mul(tape, a, Tensor::scalar(2.0)).values() == std::vector<double>{2, 4, 6});
}

TEST_CASE("add identity passes upstream gradient through") {
  Tensor x(Shape{3}, {1.0, -2.0, 0.5});
  auto loss = [&](Tape& t) { return sum_all(t, add(t, x, Tensor::zeros(Shape{3}))); };
  Tape tape;
  Tensor l = loss(tape);
  CHECK(l.item() == doctest::Approx(-0.5));
  tape.backward(l);
  CHECK(x.grad() == std::vector<double>{1, 1, 1});
}

TEST_CASE("mul product-rule gradient") {
  Tensor a(Shape{1}, {3.0});
  Tensor b(Shape{1}, {5.0});
  Tape tape;
  Tensor l = sum_all(tape, mul(tape, a, b));
  tape.backward(l);
  CHECK(a.grad()[0] == 5.0);
  CHECK(b.grad()[0] == 3.0);
}

TEST_CASE("broadcast mismatch raises shape error") {
  Tape tape;
  Tensor a(Shape{3}, {1, 2, 3});
  Tensor b(Shape{2}, {1, 2});
  CHECK_THROWS_AS(add(tape, a, b), ShapeError);
}

TEST_CASE("matmul basic and identity") {
  Tape tape;
  Tensor x(Shape{2, 2}, {1, 2, 3, 4});
  Tensor ones(Shape{2, 1}, {1, 1});
  CHECK(matmul(tape, x, ones).values() == std::vector<double>{3, 7});

  Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
  CHECK(matmul(tape, x, eye).values() == x.values());

  Tensor bad(Shape{3, 1}, {1, 1, 1});
  CHECK_THROWS_AS(matmul(tape, x, bad), ShapeError);
}

TEST_CASE("matmul gradient vs central finite differences") {
  Rng rng(11);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({4, 2}, rng);
  auto loss = [&](Tape& t) { return sum_all(t, square(t, matmul(t, x, w))); };
  for (Tensor p : {x, w}) {
    const double err = max_rel_err(tape_grad(loss, p), finite_diff(loss, p));
    CHECK(err < 1e-6);
  }
}

TEST_CASE("conv2d 1x1 kernel scales the input") {
  Tape tape;
  Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor k(Shape{1, 1, 1, 1}, {2});
  CHECK(conv2d(tape, x, k, 1, 0).values() == std::vector<double>{2, 4, 6, 8});

  Tensor zeros(Shape{1, 1, 1, 1}, {0});
  CHECK(conv2d(tape, x, zeros, 1, 0).values() == std::vector<double>{0, 0, 0, 0});
}

TEST_CASE("conv2d invalid configuration") {
  Tape tape;
  Tensor x(Shape{1, 1, 4, 4});
  Tensor k(Shape{1, 1, 3, 3});
  CHECK_THROWS_AS(conv2d(tape, x, k, 0, 1), ConfigError);
  CHECK_THROWS_AS(conv2d(tape, x, k, 1, -1), ConfigError);
  Tensor wrong(Shape{1, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(tape, x, wrong, 1, 1), ShapeError);
  Tensor huge(Shape{1, 1, 9, 9});
  CHECK_THROWS_AS(conv2d(tape, x, huge, 1, 0), ShapeError);
}

TEST_CASE("conv2d forward and gradients match the loop-nest oracle") {
  Rng rng(7);
  for (const auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 0}}) {
    Tensor x = random_tensor({1, 2, 5, 5}, rng);
    Tensor k = random_tensor({3, 2, 3, 3}, rng);
    Tape tape;
    Tensor out = conv2d(tape, x, k, stride, pad);

    Tensor expected;
    conv_oracle(x, k, stride, pad, expected);
    REQUIRE(out.shape() == expected.shape());
    CHECK(max_abs_diff(out.values(), expected.values()) < 1e-10);

    Tensor upstream = random_tensor(out.shape(), rng);
    Tensor l = sum_all(tape, mul(tape, out, upstream));
    tape.backward(l);
    Tensor gx, gk;
    conv_grad_oracle(x, k, upstream, stride, pad, gx, gk);
    CHECK(max_abs_diff(x.grad(), gx.values()) < 1e-10);
    CHECK(max_abs_diff(k.grad(), gk.values()) < 1e-10);
  }
}

TEST_CASE("stop_gradient is the identity forward and zero backward") {
  Tensor x(Shape{2}, {1.5, -2.0});
  Tensor y = stop_gradient(x);
  CHECK(y.values() == x.values());

  {
    Tape tape;
    Tensor l = sum_all(tape, stop_gradient(x));
    tape.backward(l);
    CHECK_FALSE(x.has_grad());  // contribution is exactly zero
  }
  {
    Tape tape;
    Tensor l = sum_all(tape, add(tape, x, stop_gradient(x)));
    tape.backward(l);
    CHECK(x.grad() == std::vector<double>{1, 1});
  }
}

TEST_CASE("stop_gradient branch equals a constant-tensor branch") {
  Rng rng(3);
  Tensor x = random_tensor({4}, rng);
  Tensor c = x.detached();
  auto with_stop = [&](Tape& t) {
    return sum_all(t, mul(t, square(t, x), stop_gradient(square(t, x))));
  };
  auto with_const = [&](Tape& t) {
    Tape scratch;
    Tensor frozen = square(scratch, c).detached();
    return sum_all(t, mul(t, square(t, x), frozen));
  };
  const auto g1 = tape_grad(with_stop, x);
  const auto g2 = tape_grad(with_const, x);
  CHECK(g1 == g2);  // bitwise
}

TEST_CASE("relu, reduce_mean, square basics") {
  Tape tape;
  Tensor x(Shape{3}, {-1, 0, 2});
  CHECK(relu(tape, x).values() == std::vector<double>{0, 0, 2});

  Tensor m(Shape{1, 2}, {1, 3});
  CHECK(reduce_mean(tape, m, {0, 1}, false).item() == 2.0);
  CHECK_THROWS_AS(reduce_mean(tape, m, {2}, false), ShapeError);

  Tensor s(Shape{1}, {3.0});
  Tape t2;
  Tensor l = sum_all(t2, square(t2, s));
  t2.backward(l);
  CHECK(s.grad()[0] == 6.0);
}

TEST_CASE("relu subgradient at zero is zero") {
  Tensor x(Shape{1}, {0.0});
  auto loss = [&](Tape& t) { return sum_all(t, relu(t, x)); };
  CHECK(tape_grad(loss, x)[0] == 0.0);
}

TEST_CASE("backward scales and accumulates") {
  Tensor x(Shape{2}, {1, 2});
  {
    Tape tape;
    Tensor l = sum_all(tape, mul(tape, x, Tensor::scalar(2.0)));
    tape.backward(l);
    CHECK(x.grad() == std::vector<double>{2, 2});
  }
  {
    Tensor y(Shape{2}, {1, 2});
    Tape tape;
    Tensor l = sum_all(tape, add(tape, y, y));  // diamond
    tape.backward(l);
    CHECK(y.grad() == std::vector<double>{2, 2});
  }
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape;
  Tensor x(Shape{2}, {1, 2});
  Tensor y = add(tape, x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("splitting a use into k identical uses keeps the gradient") {
  Rng rng(5);
  Tensor x = random_tensor({6}, rng);
  auto once = [&](Tape& t) { return sum_all(t, mul(t, x, Tensor::scalar(3.0))); };
  auto split = [&](Tape& t) {
    Tensor s = add(t, add(t, x, x), x);
    return sum_all(t, s);
  };
  CHECK(tape_grad(once, x) == tape_grad(split, x));
}

TEST_CASE("finite differences agree with the tape on random composites") {
  Rng rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({4, 4}, rng, -0.8, 0.8);
    Tensor b = random_tensor({4}, rng, -0.5, 0.5);
    auto loss = [&](Tape& t) {
      Tensor h = relu(t, add(t, matmul(t, x, w), b));
      Tensor m = reduce_mean(t, square(t, h), {0}, true);
      return sum_all(t, sqrt(t, add(t, m, Tensor::scalar(0.1))));
    };
    for (Tensor p : {x, w, b}) {
      CHECK(max_rel_err(tape_grad(loss, p), finite_diff(loss, p)) < 1e-4);
    }
  }
}

TEST_CASE("forward ops keep finite inputs finite") {
  Rng rng(123);
  Tape tape;
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  Tensor k = random_tensor({3, 3, 3, 3}, rng);
  Tensor out = relu(tape, conv2d(tape, x, k, 1, 1));
  CHECK(out.all_finite());
  Tensor m = reduce_mean(tape, out, {0, 2, 3}, true);
  CHECK(div(tape, sub(tape, out, m), Tensor::scalar(2.0)).all_finite());
}

TEST_CASE("reshape reroutes gradients") {
  Tensor g(Shape{4}, {1, 2, 3, 4});
  auto loss = [&](Tape& t) {
    Tensor r = reshape(t, g, {2, 2});
    return sum_all(t, square(t, r));
  };
  CHECK(tape_grad(loss, g) == std::vector<double>{2, 4, 6, 8});
}
