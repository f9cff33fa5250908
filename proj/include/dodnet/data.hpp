#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dodnet/loss.hpp"

namespace dodnet {

using Extent3 = std::array<std::int64_t, 3>;

/// Scalar grid in D,H,W order with voxel spacing in mm.
struct Volume {
  Extent3 shape{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<float> values;
  std::optional<LabelVolume> labels;

  std::int64_t voxels() const { return shape[0] * shape[1] * shape[2]; }
  void validate() const;
};

enum class Split { train, test };

struct LabeledSample {
  Volume image;  // labels live in `labels`, not image.labels
  LabelVolume labels;
  TaskDescriptor task;
  Split split = Split::train;
};

/// Geometry recipe for one synthetic task. Positions and radii are fractions
/// of the grid extents so one recipe works at any resolution.
struct TaskRecipe {
  std::string name;
  bool has_organ = true;
  bool has_tumor = true;
  std::array<double, 3> center_lo{0.5, 0.5, 0.5};
  std::array<double, 3> center_hi{0.5, 0.5, 0.5};
  std::array<double, 3> radii_lo{0.2, 0.2, 0.2};
  std::array<double, 3> radii_hi{0.2, 0.2, 0.2};
  int tumor_count_min = 1;
  int tumor_count_max = 2;
  double tumor_radius_lo = 2.0;  // voxels per 16 voxels of the smallest extent
  double tumor_radius_hi = 2.5;
  double organ_intensity = 0.4;
  double tumor_offset = -0.3;  // relative to the organ
};

struct PhantomSpec {
  std::vector<TaskRecipe> recipes;  // recipe k renders task id k + 1
  double noise_sigma = 0.05;
  /// Also render the other recipes' structures, unlabeled, so that a region
  /// that is foreground for one task is background for another.
  bool render_other_tasks = true;
  /// Label the other recipes' structures as well, giving fully annotated
  /// volumes. Needs render_other_tasks.
  bool label_other_tasks = false;
  std::uint64_t master_seed = 0;

  /// Up to 8 tasks, task k placed in octant k with its own elongation axis.
  static PhantomSpec standard(int num_tasks, std::uint64_t master_seed = 0);
  TaskDescriptor task(int id) const;
};

/// Deterministic in (spec, task, sample_seed). Background 0, organ
/// ellipsoid +organ_intensity, tumour blobs inside the organ at
/// organ_intensity + tumor_offset, then Gaussian noise. Unannotated
/// structures are rendered but labeled 0; tasks without tumors get none.
LabeledSample generate_phantom(const PhantomSpec& spec, const TaskDescriptor& task,
                               std::uint64_t sample_seed, const Extent3& shape);

/// Disjoint train/test sample seeds per task, derived from the master seed.
std::uint64_t sample_seed(const PhantomSpec& spec, int task_id, Split split, int index);

/// Builds `train_per_task` + `test_per_task` phantoms for every recipe.
std::vector<LabeledSample> generate_dataset(const PhantomSpec& spec, int train_per_task,
                                            int test_per_task, const Extent3& shape);

/// Clip to [lo, hi] then map linearly onto [-1, 1].
Volume normalize_hu(Volume v, double lo = -325.0, double hi = 325.0);

struct Patch {
  Extent3 offset{0, 0, 0};
  Volume image;
  LabelVolume labels;
};

/// With probability 0.5 the patch is centred on a uniformly chosen
/// foreground voxel, otherwise its origin is uniform over valid positions.
/// Centres near the border are shifted so the patch stays in bounds.
Patch sample_patch(const LabeledSample& sample, const Extent3& patch, std::mt19937_64& rng);

/// Writes <base>.hdr, <base>.img and, with labels, <base>.lbl.
void write_volume(const std::filesystem::path& base, const Volume& volume);
Volume read_volume(const std::filesystem::path& base);

/// A directory of volumes plus manifest.csv describing task and split.
void write_dataset(const std::filesystem::path& dir, const std::vector<LabeledSample>& samples);
std::vector<LabeledSample> read_dataset(const std::filesystem::path& dir);

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dodnet
