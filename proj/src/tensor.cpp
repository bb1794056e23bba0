// SPDX-License-Identifier: Apache-2.0
#include "noiselab/tensor.hpp"

#include <cmath>
#include <sstream>

namespace noiselab {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : p_(std::make_shared<Payload>()) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + shape_str(shape));
  }
  p_->shape = std::move(shape);
  p_->values.assign(static_cast<size_t>(shape_numel(p_->shape)), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : p_(std::make_shared<Payload>()) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  p_->shape = std::move(shape);
  p_->values = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item() requires a one-element tensor, shape is " + shape_str(shape()));
  }
  return p_->values[0];
}

const std::vector<double>& Tensor::grad() const {
  if (p_->grad.empty()) {
    static const std::vector<double> kEmpty;
    return kEmpty;
  }
  return p_->grad;
}

std::vector<double>& Tensor::ensure_grad() {
  if (p_->grad.empty()) p_->grad.assign(p_->values.size(), 0.0);
  return p_->grad;
}

Tensor Tensor::detached() const {
  Tensor t(p_->shape, p_->values);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : p_->values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace noiselab
