#pragma once

#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dodnet/ops.hpp"
#include "dodnet/tensor.hpp"

namespace testing {

using dodnet::Shape;
using dodnet::TensorD;
using dodnet::TensorF;

template <typename T>
dodnet::Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  dodnet::Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

/// ||a - b|| / max(||a||, ||b||)
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
  return std::sqrt(diff) / denom;
}

/// Compares tape gradients of sum(f(inputs) * probe) against central
/// differences for every input element. Returns the worst relative error
/// across inputs.
inline double gradcheck(const std::function<TensorD(const std::vector<TensorD>&)>& f,
                        std::vector<TensorD> inputs, std::mt19937_64& rng, double h = 1e-6) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.clear_grad();
  }
  TensorD probe;
  {
    const TensorD y = f(inputs);
    probe = random_tensor<double>(y.shape(), rng, 0.5, 1.5);
  }
  auto objective = [&](const std::vector<TensorD>& xs) {
    const TensorD y = f(xs);
    double s = 0.0;
    for (std::int64_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
    return s;
  };
  {
    dodnet::Tape<double> tape;
    dodnet::TapeScope<double> scope(tape);
    const TensorD y = f(inputs);
    const TensorD loss = dodnet::sum(dodnet::mul(y, probe));
    tape.backward(loss);
  }
  double worst = 0.0;
  for (auto& in : inputs) {
    std::vector<double> analytic(static_cast<std::size_t>(in.size()), 0.0);
    if (in.has_grad()) {
      for (std::int64_t i = 0; i < in.size(); ++i) analytic[static_cast<std::size_t>(i)] = in.grad()[static_cast<std::size_t>(i)];
    }
    std::vector<double> numeric(analytic.size());
    for (std::int64_t i = 0; i < in.size(); ++i) {
      const double orig = in[i];
      in[i] = orig + h;
      const double up = objective(inputs);
      in[i] = orig - h;
      const double down = objective(inputs);
      in[i] = orig;
      numeric[static_cast<std::size_t>(i)] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

inline constexpr int kGradTrials = 20;
inline constexpr double kGradTol = 1e-4;

}  // namespace testing
