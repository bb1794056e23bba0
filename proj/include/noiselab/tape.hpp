// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "noiselab/tensor.hpp"

namespace noiselab {

/// Define-by-run tape. Ops append a backward closure as they execute, so
/// record order is a topological order by construction. A fresh tape is
/// built for every forward pass.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  int record(BackwardFn fn) {
    nodes_.push_back(std::move(fn));
    return static_cast<int>(nodes_.size()) - 1;
  }

  /// Reverse sweep from a scalar loss. Visits each node exactly once, in
  /// reverse record order; gradients of multiply-used tensors accumulate.
  void backward(Tensor loss) {
    if (loss.size() != 1) {
      throw ContractError("backward requires a scalar loss, shape is " + shape_str(loss.shape()));
    }
    loss.ensure_grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<BackwardFn> nodes_;
};

}  // namespace noiselab
