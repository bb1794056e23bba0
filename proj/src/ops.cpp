// SPDX-License-Identifier: Apache-2.0
#include "noiselab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace noiselab {
namespace {

std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
  std::vector<std::int64_t> st(shape.size(), 1);
  for (int d = static_cast<int>(shape.size()) - 2; d >= 0; --d) {
    st[d] = st[d + 1] * shape[d + 1];
  }
  return st;
}

// Strides of `operand` aligned right against `out`; 0 where the operand dim
// is broadcast.
std::vector<std::int64_t> aligned_strides(const Shape& operand, const Shape& out) {
  auto own = contiguous_strides(operand);
  std::vector<std::int64_t> st(out.size(), 0);
  const int off = static_cast<int>(out.size()) - static_cast<int>(operand.size());
  for (size_t d = 0; d < operand.size(); ++d) {
    if (operand[d] != 1) st[static_cast<size_t>(off) + d] = own[d];
  }
  return st;
}

// Visits every output element with the matching operand offsets.
template <class F>
void bcast_walk(const Shape& out, const std::vector<std::int64_t>& sa,
                const std::vector<std::int64_t>& sb, F&& f) {
  const int r = static_cast<int>(out.size());
  const std::int64_t n = shape_numel(out);
  std::vector<int> idx(out.size(), 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      idx[d] = 0;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
    }
  }
}

enum class BinOp { add, sub, mul, div };

Tensor binary_op(Tape& tape, const Tensor& a, const Tensor& b, BinOp op) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor out(out_shape);
  auto& ov = out.mutable_values();
  const auto& av = a.values();
  const auto& bv = b.values();

  const bool same = a.shape() == b.shape();
  if (same) {
    const std::int64_t n = out.size();
    switch (op) {
      case BinOp::add: for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i]; break;
      case BinOp::sub: for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i]; break;
      case BinOp::mul: for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i]; break;
      case BinOp::div: for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] / bv[i]; break;
    }
  } else {
    const auto sa = aligned_strides(a.shape(), out_shape);
    const auto sb = aligned_strides(b.shape(), out_shape);
    switch (op) {
      case BinOp::add:
        bcast_walk(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
          ov[i] = av[oa] + bv[ob];
        });
        break;
      case BinOp::sub:
        bcast_walk(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
          ov[i] = av[oa] - bv[ob];
        });
        break;
      case BinOp::mul:
        bcast_walk(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
          ov[i] = av[oa] * bv[ob];
        });
        break;
      case BinOp::div:
        bcast_walk(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
          ov[i] = av[oa] / bv[ob];
        });
        break;
    }
  }

  Tensor a_cap = a, b_cap = b, out_cap = out;
  int id = tape.record([a_cap, b_cap, out_cap, op]() mutable {
    if (!out_cap.has_grad()) return;
    const auto& g = out_cap.grad();
    const auto& av = a_cap.values();
    const auto& bv = b_cap.values();
    auto& ga = a_cap.ensure_grad();
    auto& gb = b_cap.ensure_grad();
    if (a_cap.shape() == b_cap.shape()) {
      const std::int64_t n = out_cap.size();
      switch (op) {
        case BinOp::add:
          for (std::int64_t i = 0; i < n; ++i) { ga[i] += g[i]; gb[i] += g[i]; }
          break;
        case BinOp::sub:
          for (std::int64_t i = 0; i < n; ++i) { ga[i] += g[i]; gb[i] -= g[i]; }
          break;
        case BinOp::mul:
          for (std::int64_t i = 0; i < n; ++i) { ga[i] += g[i] * bv[i]; gb[i] += g[i] * av[i]; }
          break;
        case BinOp::div:
          for (std::int64_t i = 0; i < n; ++i) {
            ga[i] += g[i] / bv[i];
            gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
          }
          break;
      }
      return;
    }
    const auto& out_shape = out_cap.shape();
    const auto sa = aligned_strides(a_cap.shape(), out_shape);
    const auto sb = aligned_strides(b_cap.shape(), out_shape);
    switch (op) {
      case BinOp::add:
        bcast_walk(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
          ga[oa] += g[i];
          gb[ob] += g[i];
        });
        break;
      case BinOp::sub:
        bcast_walk(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
          ga[oa] += g[i];
          gb[ob] -= g[i];
        });
        break;
      case BinOp::mul:
        bcast_walk(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
          ga[oa] += g[i] * bv[ob];
          gb[ob] += g[i] * av[oa];
        });
        break;
      case BinOp::div:
        bcast_walk(out_shape, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
          ga[oa] += g[i] / bv[ob];
          gb[ob] -= g[i] * av[oa] / (bv[ob] * bv[ob]);
        });
        break;
    }
  });
  out.set_node_id(id);
  return out;
}

void check_axes(const Shape& shape, const std::vector<int>& axes) {
  std::vector<bool> seen(shape.size(), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= static_cast<int>(shape.size())) {
      throw ShapeError("axis " + std::to_string(ax) + " out of range for shape " + shape_str(shape));
    }
    if (seen[static_cast<size_t>(ax)]) throw ShapeError("duplicate reduction axis " + std::to_string(ax));
    seen[static_cast<size_t>(ax)] = true;
  }
}

Tensor reduce_impl(Tape& tape, const Tensor& x, const std::vector<int>& axes, bool keepdims,
                   bool mean) {
  check_axes(x.shape(), axes);
  const Shape& in_shape = x.shape();
  std::vector<bool> reduced(in_shape.size(), false);
  for (int ax : axes) reduced[static_cast<size_t>(ax)] = true;

  Shape kept_shape = in_shape;  // reduced dims collapse to 1
  std::int64_t count = 1;
  for (size_t d = 0; d < in_shape.size(); ++d) {
    if (reduced[d]) {
      count *= in_shape[d];
      kept_shape[d] = 1;
    }
  }
  Shape out_shape;
  if (keepdims) {
    out_shape = kept_shape;
  } else {
    for (size_t d = 0; d < in_shape.size(); ++d) {
      if (!reduced[d]) out_shape.push_back(in_shape[d]);
    }
  }

  // Output offsets: contiguous strides of the kept shape, zeroed on reduced dims.
  auto ost = contiguous_strides(kept_shape);
  for (size_t d = 0; d < in_shape.size(); ++d) {
    if (reduced[d]) ost[d] = 0;
  }
  const auto ist = contiguous_strides(in_shape);

  Tensor out(out_shape);
  auto& ov = out.mutable_values();
  const auto& xv = x.values();
  bcast_walk(in_shape, ist, ost, [&](std::int64_t, std::int64_t ix, std::int64_t ox) {
    ov[ox] += xv[ix];
  });
  if (mean) {
    for (auto& v : ov) v /= static_cast<double>(count);
  }

  Tensor x_cap = x, out_cap = out;
  int id = tape.record([x_cap, out_cap, in_shape, ist, ost, count, mean]() mutable {
    if (!out_cap.has_grad()) return;
    const auto& g = out_cap.grad();
    auto& gx = x_cap.ensure_grad();
    const double scale = mean ? 1.0 / static_cast<double>(count) : 1.0;
    bcast_walk(in_shape, ist, ost, [&](std::int64_t, std::int64_t ix, std::int64_t ox) {
      gx[ix] += g[ox] * scale;
    });
  });
  out.set_node_id(id);
  return out;
}

// Gathers kernel-window patches of one sample into col [c_in*kh*kw, oh*ow].
void im2col(const double* x, int c_in, int h, int w, int kh, int kw, int stride, int pad, int oh,
            int ow, double* col) {
  const int span = oh * ow;
  for (int ci = 0; ci < c_in; ++ci) {
    const double* xc = x + static_cast<std::int64_t>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        double* row = col + (static_cast<std::int64_t>(ci) * kh * kw + ky * kw + kx) * span;
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy * stride - pad + ky;
          if (y < 0 || y >= h) {
            std::fill(row + oy * ow, row + (oy + 1) * ow, 0.0);
            continue;
          }
          for (int ox = 0; ox < ow; ++ox) {
            const int xcoord = ox * stride - pad + kx;
            row[oy * ow + ox] = (xcoord >= 0 && xcoord < w) ? xc[y * w + xcoord] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int c_in, int h, int w, int kh, int kw, int stride, int pad,
                int oh, int ow, double* gx) {
  const int span = oh * ow;
  for (int ci = 0; ci < c_in; ++ci) {
    double* gc = gx + static_cast<std::int64_t>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const double* row = col + (static_cast<std::int64_t>(ci) * kh * kw + ky * kw + kx) * span;
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy * stride - pad + ky;
          if (y < 0 || y >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int xcoord = ox * stride - pad + kx;
            if (xcoord >= 0 && xcoord < w) gc[y * w + xcoord] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (int d = static_cast<int>(out.size()) - 1; d >= 0; --d) {
    const int da_idx = d - (static_cast<int>(out.size()) - static_cast<int>(a.size()));
    const int db_idx = d - (static_cast<int>(out.size()) - static_cast<int>(b.size()));
    const int da = da_idx >= 0 ? a[static_cast<size_t>(da_idx)] : 1;
    const int db = db_idx >= 0 ? b[static_cast<size_t>(db_idx)] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    }
    out[static_cast<size_t>(d)] = std::max(da, db);
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, BinOp::add); }
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, BinOp::sub); }
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, BinOp::mul); }
Tensor div(Tape& tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, BinOp::div); }

Tensor matmul(Tape& tape, const Tensor& x, const Tensor& w) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
    throw ShapeError("matmul expects [m,k]x[k,n], got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  const int m = x.dim(0), k = x.dim(1), n = w.dim(1);
  Tensor out(Shape{m, n});
  auto& ov = out.mutable_values();
  const auto& xv = x.values();
  const auto& wv = w.values();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double xi = xv[static_cast<size_t>(i) * k + p];
      if (xi == 0.0) continue;
      const double* wrow = wv.data() + static_cast<std::int64_t>(p) * n;
      double* orow = ov.data() + static_cast<std::int64_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += xi * wrow[j];
    }
  }

  Tensor x_cap = x, w_cap = w, out_cap = out;
  int id = tape.record([x_cap, w_cap, out_cap, m, k, n]() mutable {
    if (!out_cap.has_grad()) return;
    const auto& g = out_cap.grad();
    const auto& xv = x_cap.values();
    const auto& wv = w_cap.values();
    auto& gx = x_cap.ensure_grad();
    auto& gw = w_cap.ensure_grad();
    for (int i = 0; i < m; ++i) {
      const double* grow = g.data() + static_cast<std::int64_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        const double* wrow = wv.data() + static_cast<std::int64_t>(p) * n;
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += grow[j] * wrow[j];
        gx[static_cast<size_t>(i) * k + p] += acc;
        const double xi = xv[static_cast<size_t>(i) * k + p];
        double* gwrow = gw.data() + static_cast<std::int64_t>(p) * n;
        for (int j = 0; j < n; ++j) gwrow[j] += xi * grow[j];
      }
    }
  });
  out.set_node_id(id);
  return out;
}

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& k, int stride, int pad) {
  if (stride <= 0) throw ConfigError("conv2d stride must be positive, got " + std::to_string(stride));
  if (pad < 0) throw ConfigError("conv2d pad must be non-negative, got " + std::to_string(pad));
  if (x.rank() != 4 || k.rank() != 4) {
    throw ShapeError("conv2d expects 4-d input and kernel, got " + shape_str(x.shape()) + " and " +
                     shape_str(k.shape()));
  }
  const int b = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int c_out = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  if (k.dim(1) != c_in) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(k.shape()));
  }
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw ShapeError("conv2d kernel exceeds padded input extent");
  }
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;

  const int rows = c_in * kh * kw;
  const int span = oh * ow;
  Tensor out(Shape{b, c_out, oh, ow});
  auto& ov = out.mutable_values();
  const auto& xv = x.values();
  const auto& kv = k.values();
  std::vector<double> col(static_cast<size_t>(rows) * span);
  for (int s = 0; s < b; ++s) {
    im2col(xv.data() + static_cast<std::int64_t>(s) * c_in * h * w, c_in, h, w, kh, kw, stride, pad,
           oh, ow, col.data());
    double* osamp = ov.data() + static_cast<std::int64_t>(s) * c_out * span;
    for (int co = 0; co < c_out; ++co) {
      const double* krow = kv.data() + static_cast<std::int64_t>(co) * rows;
      double* orow = osamp + static_cast<std::int64_t>(co) * span;
      for (int r = 0; r < rows; ++r) {
        const double kval = krow[r];
        if (kval == 0.0) continue;
        const double* crow = col.data() + static_cast<std::int64_t>(r) * span;
        for (int l = 0; l < span; ++l) orow[l] += kval * crow[l];
      }
    }
  }

  Tensor x_cap = x, k_cap = k, out_cap = out;
  int id = tape.record([x_cap, k_cap, out_cap, stride, pad]() mutable {
    if (!out_cap.has_grad()) return;
    const int b = x_cap.dim(0), c_in = x_cap.dim(1), h = x_cap.dim(2), w = x_cap.dim(3);
    const int c_out = k_cap.dim(0), kh = k_cap.dim(2), kw = k_cap.dim(3);
    const int oh = out_cap.dim(2), ow = out_cap.dim(3);
    const int rows = c_in * kh * kw;
    const int span = oh * ow;
    const auto& g = out_cap.grad();
    const auto& xv = x_cap.values();
    const auto& kv = k_cap.values();
    auto& gx = x_cap.ensure_grad();
    auto& gk = k_cap.ensure_grad();
    std::vector<double> col(static_cast<size_t>(rows) * span);
    std::vector<double> gcol(static_cast<size_t>(rows) * span);
    for (int s = 0; s < b; ++s) {
      im2col(xv.data() + static_cast<std::int64_t>(s) * c_in * h * w, c_in, h, w, kh, kw, stride,
             pad, oh, ow, col.data());
      const double* gsamp = g.data() + static_cast<std::int64_t>(s) * c_out * span;
      // dK += g . col^T
      for (int co = 0; co < c_out; ++co) {
        const double* grow = gsamp + static_cast<std::int64_t>(co) * span;
        double* gkrow = gk.data() + static_cast<std::int64_t>(co) * rows;
        for (int r = 0; r < rows; ++r) {
          const double* crow = col.data() + static_cast<std::int64_t>(r) * span;
          double acc = 0.0;
          for (int l = 0; l < span; ++l) acc += grow[l] * crow[l];
          gkrow[r] += acc;
        }
      }
      // dcol = K^T . g, then scatter back into dx
      std::fill(gcol.begin(), gcol.end(), 0.0);
      for (int co = 0; co < c_out; ++co) {
        const double* krow = kv.data() + static_cast<std::int64_t>(co) * rows;
        const double* grow = gsamp + static_cast<std::int64_t>(co) * span;
        for (int r = 0; r < rows; ++r) {
          const double kval = krow[r];
          if (kval == 0.0) continue;
          double* gcrow = gcol.data() + static_cast<std::int64_t>(r) * span;
          for (int l = 0; l < span; ++l) gcrow[l] += kval * grow[l];
        }
      }
      col2im_add(gcol.data(), c_in, h, w, kh, kw, stride, pad, oh, ow,
                 gx.data() + static_cast<std::int64_t>(s) * c_in * h * w);
    }
  });
  out.set_node_id(id);
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  auto& ov = out.mutable_values();
  const auto& xv = x.values();
  for (std::int64_t i = 0; i < x.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Tensor x_cap = x, out_cap = out;
  int id = tape.record([x_cap, out_cap]() mutable {
    if (!out_cap.has_grad()) return;
    const auto& g = out_cap.grad();
    const auto& xv = x_cap.values();
    auto& gx = x_cap.ensure_grad();
    for (size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];  // subgradient at 0 is 0
    }
  });
  out.set_node_id(id);
  return out;
}

Tensor square(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  auto& ov = out.mutable_values();
  const auto& xv = x.values();
  for (std::int64_t i = 0; i < x.size(); ++i) ov[i] = xv[i] * xv[i];
  Tensor x_cap = x, out_cap = out;
  int id = tape.record([x_cap, out_cap]() mutable {
    if (!out_cap.has_grad()) return;
    const auto& g = out_cap.grad();
    const auto& xv = x_cap.values();
    auto& gx = x_cap.ensure_grad();
    for (size_t i = 0; i < xv.size(); ++i) gx[i] += 2.0 * xv[i] * g[i];
  });
  out.set_node_id(id);
  return out;
}

Tensor sqrt(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  auto& ov = out.mutable_values();
  const auto& xv = x.values();
  for (std::int64_t i = 0; i < x.size(); ++i) {
    if (xv[i] < 0.0) throw NumericError("sqrt of negative value " + std::to_string(xv[i]));
    ov[i] = std::sqrt(xv[i]);
  }
  Tensor x_cap = x, out_cap = out;
  int id = tape.record([x_cap, out_cap]() mutable {
    if (!out_cap.has_grad()) return;
    const auto& g = out_cap.grad();
    const auto& ov = out_cap.values();
    auto& gx = x_cap.ensure_grad();
    for (size_t i = 0; i < ov.size(); ++i) gx[i] += 0.5 / ov[i] * g[i];
  });
  out.set_node_id(id);
  return out;
}

Tensor reduce_mean(Tape& tape, const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_impl(tape, x, axes, keepdims, true);
}

Tensor reduce_sum(Tape& tape, const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_impl(tape, x, axes, keepdims, false);
}

Tensor sum_all(Tape& tape, const Tensor& x) {
  std::vector<int> axes(x.shape().size());
  for (size_t d = 0; d < axes.size(); ++d) axes[d] = static_cast<int>(d);
  return reduce_sum(tape, x, axes, false);
}

Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(new_shape));
  }
  Tensor out(std::move(new_shape), x.values());
  Tensor x_cap = x, out_cap = out;
  int id = tape.record([x_cap, out_cap]() mutable {
    if (!out_cap.has_grad()) return;
    const auto& g = out_cap.grad();
    auto& gx = x_cap.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  out.set_node_id(id);
  return out;
}

Tensor stop_gradient(const Tensor& x) { return x.detached(); }

}  // namespace noiselab
