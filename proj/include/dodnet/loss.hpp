#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dodnet/tensor.hpp"

namespace dodnet {

/// Which structures a partially labeled task annotates.
struct TaskDescriptor {
  int id = 1;  // 1-based
  std::string name;
  bool has_organ = true;
  bool has_tumor = true;

  void validate() const;
};

enum Label : std::uint8_t { kBackground = 0, kOrgan = 1, kTumor = 2 };

/// Voxel labels over {0, 1, 2} in D,H,W order.
struct LabelVolume {
  std::array<std::int64_t, 3> shape{0, 0, 0};
  std::vector<std::uint8_t> values;

  std::int64_t voxels() const { return shape[0] * shape[1] * shape[2]; }
  void validate() const;
};

/// Organ target includes tumor voxels (label >= 1); tumor target is label == 2.
std::vector<std::uint8_t> organ_target(const LabelVolume& labels);
std::vector<std::uint8_t> tumor_target(const LabelVolume& labels);

inline constexpr double kDiceEps = 1e-5;
inline constexpr double kProbClamp = 1e-7;

/// Dice + binary cross-entropy on probabilities:
///   1 - 2*sum(p*y) / (sum(p + y) + eps)  +  mean(-[y log p + (1-y) log(1-p)])
/// p is clamped to [1e-7, 1 - 1e-7]; the gradient is zero where clamping bites.
template <typename T>
Tensor<T> dice_bce_loss(const Tensor<T>& probs, std::span<const std::uint8_t> targets,
                        double eps = kDiceEps);

/// Same value as dice_bce_loss(sigmoid(logits), targets). The gradient is
/// taken with respect to the logits in double precision; the cross-entropy
/// part is (sigmoid(z) - y) / V, which stays informative when a float sigmoid
/// would have saturated.
template <typename T>
Tensor<T> dice_bce_loss_with_logits(const Tensor<T>& logits, std::span<const std::uint8_t> targets,
                                    double eps = kDiceEps);

/// Channel-masked objective for one task. logits [N, 2, D, H, W], one label
/// volume per sample. Each available channel contributes
/// dice_bce_loss(sigmoid(logit), target); channel losses are averaged, then
/// averaged over the batch. Unavailable channels are never read.
template <typename T>
Tensor<T> masked_task_loss(const Tensor<T>& logits, std::span<const LabelVolume> labels,
                           const TaskDescriptor& task);

/// 2|a & b| / (|a| + |b|); 1 when both are empty.
double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

/// Symmetric Hausdorff distance between the boundary voxel sets of two masks
/// (foreground voxels with a 6-neighbour outside the foreground), in the
/// units of `spacing` (D, H, W order). nullopt if either mask is empty.
std::optional<double> hausdorff(std::span<const std::uint8_t> pred,
                                std::span<const std::uint8_t> truth,
                                const std::array<std::int64_t, 3>& shape,
                                const std::array<double, 3>& spacing);

/// Boundary voxel coordinates of a mask.
std::vector<std::array<std::int64_t, 3>> boundary_voxels(std::span<const std::uint8_t> mask,
                                                         const std::array<std::int64_t, 3>& shape);

}  // namespace dodnet
