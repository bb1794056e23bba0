// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "noiselab/tape.hpp"
#include "noiselab/tensor.hpp"

namespace noiselab {

// Elementwise arithmetic with numpy-style broadcasting (shapes right-aligned,
// dims must match or be 1). Broadcast gradients sum-reduce back onto the
// smaller operand.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor div(Tape& tape, const Tensor& a, const Tensor& b);

/// z[m,j] = sum_i x[m,i] * w[i,j]
Tensor matmul(Tape& tape, const Tensor& x, const Tensor& w);

/// Cross-correlation of x [b,c_in,h,w] with kernels k [c_out,c_in,kh,kw].
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& k, int stride, int pad);

Tensor relu(Tape& tape, const Tensor& x);
Tensor square(Tape& tape, const Tensor& x);
Tensor sqrt(Tape& tape, const Tensor& x);

Tensor reduce_mean(Tape& tape, const Tensor& x, const std::vector<int>& axes, bool keepdims);
Tensor reduce_sum(Tape& tape, const Tensor& x, const std::vector<int>& axes, bool keepdims);
/// Sum of all entries as a rank-0 tensor.
Tensor sum_all(Tape& tape, const Tensor& x);

Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape);

/// Identity forward; contributes exactly zero gradient to x.
Tensor stop_gradient(const Tensor& x);

/// Broadcast result shape of two operand shapes (throws ShapeError if
/// incompatible). Exposed for shape checks in layer code.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace noiselab
