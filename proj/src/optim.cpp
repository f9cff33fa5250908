#include "dodnet/optim.hpp"

namespace dodnet {

void sgd_momentum_step(std::span<float> param, std::span<const float> grad,
                       std::span<float> velocity, double momentum, double lr) {
  if (param.size() != velocity.size() || (!grad.empty() && grad.size() != param.size())) {
    throw ShapeError("sgd_momentum_step: buffer sizes disagree");
  }
  const auto m = static_cast<float>(momentum);
  const auto rate = static_cast<float>(lr);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad.empty() ? 0.0f : grad[i];
    velocity[i] = m * velocity[i] + g;
    param[i] -= rate * velocity[i];
  }
}

SgdMomentum::SgdMomentum(std::vector<TensorF> params, double momentum)
    : params_(std::move(params)) {
  state_.momentum = momentum;
  state_.velocity.reserve(params_.size());
  for (const auto& p : params_) state_.velocity.emplace_back(static_cast<std::size_t>(p.size()), 0.0f);
}

void SgdMomentum::step(double lr) {
  if (lr < 0.0) throw std::invalid_argument("SgdMomentum::step: negative learning rate");
  state_.learning_rate = lr;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    sgd_momentum_step(params_[i].data(), params_[i].grad(), state_.velocity[i], state_.momentum, lr);
  }
}

void SgdMomentum::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void SgdMomentum::load_state(OptimizerState state) {
  if (state.velocity.size() != params_.size()) {
    throw ShapeError("optimizer state has " + std::to_string(state.velocity.size()) +
                     " buffers for " + std::to_string(params_.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (static_cast<std::int64_t>(state.velocity[i].size()) != params_[i].size()) {
      throw ShapeError("optimizer velocity " + std::to_string(i) + " has wrong length");
    }
  }
  state_ = std::move(state);
}

}  // namespace dodnet
