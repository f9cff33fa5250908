#include "dodnet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "dodnet/ops.hpp"

namespace dodnet {

void TaskDescriptor::validate() const {
  if (!has_organ && !has_tumor) {
    throw std::invalid_argument("task '" + name + "' (id " + std::to_string(id) +
                                ") annotates neither organ nor tumor");
  }
  if (id < 1) throw std::invalid_argument("task id must be >= 1");
}

void LabelVolume::validate() const {
  if (static_cast<std::int64_t>(values.size()) != voxels()) {
    throw ShapeError("label volume length does not match its shape");
  }
  for (auto v : values) {
    if (v > kTumor) throw std::invalid_argument("label value " + std::to_string(v) + " outside {0,1,2}");
  }
}

std::vector<std::uint8_t> organ_target(const LabelVolume& labels) {
  std::vector<std::uint8_t> t(labels.values.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = labels.values[i] >= kOrgan ? 1 : 0;
  return t;
}

std::vector<std::uint8_t> tumor_target(const LabelVolume& labels) {
  std::vector<std::uint8_t> t(labels.values.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = labels.values[i] == kTumor ? 1 : 0;
  return t;
}

template <typename T>
Tensor<T> dice_bce_loss(const Tensor<T>& probs, std::span<const std::uint8_t> targets, double eps) {
  const auto n = static_cast<std::size_t>(probs.size());
  if (n != targets.size()) {
    throw ShapeError("dice_bce_loss: " + std::to_string(n) + " predictions vs " +
                     std::to_string(targets.size()) + " targets");
  }
  if (n == 0) throw ShapeError("dice_bce_loss: empty input");
  const double lo = kProbClamp, hi = 1.0 - kProbClamp;
  std::vector<double> p(n);
  double inter = 0.0, psum = 0.0, ysum = 0.0, bce = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::clamp(static_cast<double>(probs[static_cast<std::int64_t>(i)]), lo, hi);
    const double y = targets[i] ? 1.0 : 0.0;
    inter += p[i] * y;
    psum += p[i];
    ysum += y;
    bce -= y * std::log(p[i]) + (1.0 - y) * std::log(1.0 - p[i]);
  }
  const double denom = psum + ysum + eps;
  const double loss = 1.0 - 2.0 * inter / denom + bce / static_cast<double>(n);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss));

  if (detail::should_record<T>({&probs})) {
    out.set_requires_grad(true);
    auto ps = probs.storage();
    std::vector<std::uint8_t> y(targets.begin(), targets.end());
    active_tape<T>()->record("dice_bce_loss", out, [ps, y = std::move(y), p = std::move(p), inter,
                                                    denom, lo, hi](const std::vector<T>& gy) {
      T* dp = detail::grad_target(ps);
      if (!dp) return;
      const double nv = static_cast<double>(p.size());
      const double g = gy[0];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double raw = ps->data[i];
        if (raw < lo || raw > hi) continue;
        const double yi = y[i] ? 1.0 : 0.0;
        const double d_dice = -2.0 * (yi * denom - inter) / (denom * denom);
        const double d_bce = (-yi / p[i] + (1.0 - yi) / (1.0 - p[i])) / nv;
        dp[i] += static_cast<T>(g * (d_dice + d_bce));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> dice_bce_loss_with_logits(const Tensor<T>& logits, std::span<const std::uint8_t> targets,
                                    double eps) {
  const auto n = static_cast<std::size_t>(logits.size());
  if (n != targets.size()) {
    throw ShapeError("dice_bce_loss_with_logits: " + std::to_string(n) + " predictions vs " +
                     std::to_string(targets.size()) + " targets");
  }
  if (n == 0) throw ShapeError("dice_bce_loss_with_logits: empty input");
  const double lo = kProbClamp, hi = 1.0 - kProbClamp;
  std::vector<double> s(n);
  double inter = 0.0, psum = 0.0, ysum = 0.0, bce = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits[static_cast<std::int64_t>(i)];
    s[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    const double p = std::clamp(s[i], lo, hi);
    const double y = targets[i] ? 1.0 : 0.0;
    inter += p * y;
    psum += p;
    ysum += y;
    bce -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  const double denom = psum + ysum + eps;
  const double loss = 1.0 - 2.0 * inter / denom + bce / static_cast<double>(n);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss));

  if (detail::should_record<T>({&logits})) {
    out.set_requires_grad(true);
    auto zs = logits.storage();
    std::vector<std::uint8_t> y(targets.begin(), targets.end());
    active_tape<T>()->record("dice_bce_loss_with_logits", out,
                             [zs, y = std::move(y), s = std::move(s), inter, denom](const std::vector<T>& gy) {
      T* dz = detail::grad_target(zs);
      if (!dz) return;
      const double nv = static_cast<double>(s.size());
      const double g = gy[0];
      for (std::size_t i = 0; i < s.size(); ++i) {
        const double yi = y[i] ? 1.0 : 0.0;
        const double d_dice = -2.0 * (yi * denom - inter) / (denom * denom) * s[i] * (1.0 - s[i]);
        const double d_bce = (s[i] - yi) / nv;
        dz[i] += static_cast<T>(g * (d_dice + d_bce));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> masked_task_loss(const Tensor<T>& logits, std::span<const LabelVolume> labels,
                           const TaskDescriptor& task) {
  task.validate();
  if (logits.rank() != 5 || logits.dim(1) != 2) {
    throw ShapeError("masked_task_loss: logits must be [N,2,D,H,W], got " + to_string(logits.shape()));
  }
  const std::int64_t n = logits.dim(0);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw ShapeError("masked_task_loss: " + std::to_string(labels.size()) + " label volumes for batch of " +
                     std::to_string(n));
  }
  const std::int64_t vox = logits.dim(2) * logits.dim(3) * logits.dim(4);
  std::vector<Tensor<T>> per_sample;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& lab = labels[static_cast<std::size_t>(i)];
    if (lab.voxels() != vox || lab.shape[0] != logits.dim(2) || lab.shape[1] != logits.dim(3) ||
        lab.shape[2] != logits.dim(4)) {
      throw ShapeError("masked_task_loss: label volume shape does not match logits " +
                       to_string(logits.shape()));
    }
    Tensor<T> sample = narrow(logits, 0, i, 1);
    std::vector<Tensor<T>> channel_losses;
    if (task.has_organ) {
      const auto target = organ_target(lab);
      channel_losses.push_back(dice_bce_loss_with_logits(narrow(sample, 1, 0, 1), target));
    }
    if (task.has_tumor) {
      const auto target = tumor_target(lab);
      channel_losses.push_back(dice_bce_loss_with_logits(narrow(sample, 1, 1, 1), target));
    }
    Tensor<T> total = channel_losses.front();
    for (std::size_t c = 1; c < channel_losses.size(); ++c) total = add(total, channel_losses[c]);
    per_sample.push_back(scale(total, static_cast<T>(1.0 / static_cast<double>(channel_losses.size()))));
  }
  Tensor<T> total = per_sample.front();
  for (std::size_t i = 1; i < per_sample.size(); ++i) total = add(total, per_sample[i]);
  return scale(total, static_cast<T>(1.0 / static_cast<double>(n)));
}

double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) {
    throw ShapeError("dice_score: mask sizes differ (" + std::to_string(pred.size()) + " vs " +
                     std::to_string(truth.size()) + ")");
  }
  std::int64_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    a += p;
    b += t;
    both += p && t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::vector<std::array<std::int64_t, 3>> boundary_voxels(std::span<const std::uint8_t> mask,
                                                         const std::array<std::int64_t, 3>& shape) {
  const auto [d, h, w] = shape;
  if (static_cast<std::int64_t>(mask.size()) != d * h * w) {
    throw ShapeError("boundary_voxels: mask length does not match shape");
  }
  auto at = [&](std::int64_t z, std::int64_t y, std::int64_t x) -> bool {
    if (z < 0 || y < 0 || x < 0 || z >= d || y >= h || x >= w) return false;
    return mask[static_cast<std::size_t>((z * h + y) * w + x)] != 0;
  };
  std::vector<std::array<std::int64_t, 3>> out;
  for (std::int64_t z = 0; z < d; ++z) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        if (!at(z, y, x)) continue;
        if (!at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) || !at(z, y + 1, x) ||
            !at(z, y, x - 1) || !at(z, y, x + 1)) {
          out.push_back({z, y, x});
        }
      }
    }
  }
  return out;
}

std::optional<double> hausdorff(std::span<const std::uint8_t> pred,
                                std::span<const std::uint8_t> truth,
                                const std::array<std::int64_t, 3>& shape,
                                const std::array<double, 3>& spacing) {
  if (pred.size() != truth.size()) throw ShapeError("hausdorff: mask sizes differ");
  const auto a = boundary_voxels(pred, shape);
  const auto b = boundary_voxels(truth, shape);
  if (a.empty() || b.empty()) return std::nullopt;
  auto directed = [&](const auto& from, const auto& to) {
    double worst = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        double d2 = 0.0;
        for (int k = 0; k < 3; ++k) {
          const double dk = static_cast<double>(p[static_cast<std::size_t>(k)] - q[static_cast<std::size_t>(k)]) *
                            spacing[static_cast<std::size_t>(k)];
          d2 += dk * dk;
        }
        best = std::min(best, d2);
        if (best == 0.0) break;
      }
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::sqrt(std::max(directed(a, b), directed(b, a)));
}

template Tensor<float> dice_bce_loss(const Tensor<float>&, std::span<const std::uint8_t>, double);
template Tensor<double> dice_bce_loss(const Tensor<double>&, std::span<const std::uint8_t>, double);
template Tensor<float> dice_bce_loss_with_logits(const Tensor<float>&, std::span<const std::uint8_t>,
                                                 double);
template Tensor<double> dice_bce_loss_with_logits(const Tensor<double>&, std::span<const std::uint8_t>,
                                                  double);
template Tensor<float> masked_task_loss(const Tensor<float>&, std::span<const LabelVolume>,
                                        const TaskDescriptor&);
template Tensor<double> masked_task_loss(const Tensor<double>&, std::span<const LabelVolume>,
                                         const TaskDescriptor&);

}  // namespace dodnet
