#pragma once

#include <string>
#include <vector>

#include "dodnet/tensor.hpp"

namespace dodnet {

/// Velocity buffers for classical (heavy-ball) momentum, one per parameter in
/// registration order.
struct OptimizerState {
  double momentum = 0.99;
  double learning_rate = 0.0;
  std::vector<std::vector<float>> velocity;
};

/// v <- momentum * v + g;  p <- p - lr * v
class SgdMomentum {
 public:
  SgdMomentum(std::vector<TensorF> params, double momentum);

  /// Applies one update from the gradients currently stored on the
  /// parameters. Parameters without a gradient are treated as g = 0.
  void step(double lr);
  void zero_grad();

  const OptimizerState& state() const { return state_; }
  OptimizerState& state() { return state_; }
  /// Replaces the velocity buffers; shapes must match the parameters.
  void load_state(OptimizerState state);

 private:
  std::vector<TensorF> params_;
  OptimizerState state_;
};

/// Free-function form of one momentum update over aligned buffers.
void sgd_momentum_step(std::span<float> param, std::span<const float> grad,
                       std::span<float> velocity, double momentum, double lr);

}  // namespace dodnet
