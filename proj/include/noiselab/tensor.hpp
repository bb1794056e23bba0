// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace noiselab {

// Error taxonomy. The CLI maps these onto exit codes, everything else just
// lets them propagate.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense n-dimensional array of doubles with an optional gradient buffer.
///
/// A Tensor is a cheap handle onto a shared payload; copies alias the same
/// storage. Image tensors use [batch, channels, height, width] layout,
/// vector batches use [batch, features]. Rank-0 tensors hold one scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }

  bool defined() const { return p_ != nullptr; }
  const Shape& shape() const { return p_->shape; }
  int rank() const { return static_cast<int>(p_->shape.size()); }
  int dim(int axis) const { return p_->shape[static_cast<size_t>(axis)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(p_->values.size()); }

  const std::vector<double>& values() const { return p_->values; }
  std::vector<double>& mutable_values() { return p_->values; }

  /// Scalar payload of a one-element tensor.
  double item() const;

  bool has_grad() const { return !p_->grad.empty(); }
  const std::vector<double>& grad() const;
  /// Gradient buffer, zero-initialized on first use.
  std::vector<double>& ensure_grad();
  void zero_grad() { p_->grad.clear(); }

  int node_id() const { return p_->node_id; }
  void set_node_id(int id) { p_->node_id = id; }

  /// A new tensor with identical values and no tape history.
  Tensor detached() const;

  bool same_payload(const Tensor& other) const { return p_ == other.p_; }

  bool all_finite() const;

 private:
  struct Payload {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until backward touches this tensor
    int node_id = -1;          // -1: leaf (not produced by a recorded op)
  };
  std::shared_ptr<Payload> p_;
};

}  // namespace noiselab
