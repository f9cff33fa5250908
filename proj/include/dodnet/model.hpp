#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dodnet/ops.hpp"
#include "dodnet/tensor.hpp"

namespace dodnet {

enum class Architecture { dodnet, multi_head, cond_input };

std::string to_string(Architecture arch);
Architecture parse_architecture(std::string_view name);

/// Architecture hyperparameters. Defaults reproduce the full-size network:
/// 32 base filters doubled over four stride-2 downsamplings, an 8-channel
/// pre-segmentation map and a 3-layer, 8-wide dynamic head.
struct ModelConfig {
  int base_channels = 32;
  int num_downsamples = 4;
  int pre_seg_channels = 8;
  int head_depth = 3;
  int head_width = 8;
  int num_tasks = 7;
  int gn_groups = 8;
  int input_channels = 1;
  // Controller conditioning inputs; disabling one feeds zeros in its place.
  bool condition_on_image = true;
  bool condition_on_task = true;

  static ModelConfig paper(int num_tasks = 7);
  /// Laptop-scale preset: 8 base filters, 2 downsamplings.
  static ModelConfig desk(int num_tasks = 2);

  void validate() const;
  int channels_at(int level) const { return base_channels << level; }
  int bottleneck_channels() const { return channels_at(num_downsamples); }
  int required_divisor() const { return 1 << num_downsamples; }
  /// Group count used for a layer with `channels` channels.
  int groups_for(int channels) const;

  bool operator==(const ModelConfig&) const = default;
};

/// One-hot task encoding of length m.
struct TaskCode {
  std::vector<float> values;
};

/// `task_index` is 1-based.
TaskCode encode_task(int task_index, int num_tasks);

/// Scalars the controller must emit: C*W + W, then (W*W + W) per middle
/// layer, then 2W + 2.
std::int64_t head_param_count(const ModelConfig& config);

/// Slice lengths in flattening order [w1, b1, w2, b2, ...].
std::vector<std::int64_t> head_slice_lengths(const ModelConfig& config);

/// Per-sample dynamic head kernels. Layer l has weight [N, out, in] and
/// bias [N, out]; weights are out-channel major.
struct DynamicKernels {
  struct Layer {
    TensorF weight;
    TensorF bias;
  };
  std::vector<Layer> layers;
};

/// Slices a flat kernel batch [N, K] (or [K] for one sample).
DynamicKernels split_kernels(const TensorF& omega, const ModelConfig& config);
/// Inverse of split_kernels; returns [N, K].
TensorF flatten_kernels(const DynamicKernels& kernels);

/// Stack of per-sample 1x1x1 convolutions, ReLU between layers and none
/// after the last. Returns 2-channel logits.
TensorF dynamic_head(const TensorF& features, const DynamicKernels& kernels);

/// Encoder activations: level l has base*2^l channels at 1/2^l resolution.
/// The last level is the bottleneck F.
struct FeaturePyramid {
  std::vector<TensorF> levels;
  const TensorF& bottleneck() const { return levels.back(); }
};

/// Named parameters in registration order. Registration order is the
/// checkpoint order and the optimizer order.
class ParameterSet {
 public:
  TensorF& add(std::string name, TensorF tensor);
  const std::vector<std::pair<std::string, TensorF>>& entries() const { return entries_; }
  std::vector<TensorF> tensors() const;
  const TensorF* find(std::string_view name) const;
  std::int64_t scalar_count() const;
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<std::pair<std::string, TensorF>> entries_;
};

using Rng = std::mt19937_64;

namespace layers {

struct Conv {
  TensorF weight;
  TensorF bias;
  Conv3dOptions options;
  bool standardize = true;
  TensorF operator()(const TensorF& x) const;
};

/// Fan-in scaled Gaussian weights (std = sqrt(2 / fan_in)), zero bias.
Conv make_conv(ParameterSet& params, const std::string& name, int in_channels, int out_channels,
               int kernel, int stride, bool standardize, Rng& rng);

struct GroupNorm {
  TensorF gamma;
  TensorF beta;
  int groups = 1;
  TensorF operator()(const TensorF& x) const;
};

GroupNorm make_group_norm(ParameterSet& params, const std::string& name, int channels, int groups);

/// relu(gn(conv)) twice plus a skip path; the skip is a 1x1x1 projection
/// followed by group norm when channels or resolution change.
struct ResidualBlock {
  Conv conv1;
  GroupNorm norm1;
  Conv conv2;
  GroupNorm norm2;
  std::optional<Conv> projection;
  std::optional<GroupNorm> projection_norm;
  TensorF operator()(const TensorF& x) const;
};

ResidualBlock make_residual_block(ParameterSet& params, const std::string& name, int in_channels,
                                  int out_channels, int stride, const ModelConfig& config, Rng& rng);

class Encoder {
 public:
  Encoder() = default;
  Encoder(ParameterSet& params, const std::string& prefix, const ModelConfig& config,
          int in_channels, Rng& rng);
  FeaturePyramid operator()(const TensorF& x) const;

 private:
  ModelConfig config_;
  int in_channels_ = 1;
  Conv stem_;
  GroupNorm stem_norm_;
  std::vector<ResidualBlock> levels_;
};

/// Upsample -> 1x1x1 projection to the skip width -> sum with the skip ->
/// residual block, repeated num_downsamples times, then GN, ReLU and a 1x1x1
/// output convolution. `width_divisor` narrows every refinement block
/// (2 for the multi-head baseline).
class Decoder {
 public:
  Decoder() = default;
  Decoder(ParameterSet& params, const std::string& prefix, const ModelConfig& config,
          int width_divisor, int out_channels, bool standardize_output, Rng& rng);
  TensorF operator()(const FeaturePyramid& pyramid) const;

 private:
  struct Stage {
    Conv up;
    GroupNorm up_norm;
    ResidualBlock refine;
  };
  ModelConfig config_;
  std::vector<Stage> stages_;
  GroupNorm out_norm_;
  Conv out_;
};

}  // namespace layers

/// Common surface of the three architectures.
class SegmentationNetwork {
 public:
  virtual ~SegmentationNetwork() = default;

  virtual Architecture architecture() const = 0;
  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// x: [N, input_channels, D, H, W]; `tasks` holds one 1-based task index
  /// per sample. Returns logits [N, 2, D, H, W] (organ, tumor).
  virtual TensorF forward(const TensorF& x, std::span<const int> tasks) const = 0;

  /// Logits for every task on a single input [1, ...], sharing whatever
  /// computation the architecture allows.
  virtual std::vector<TensorF> forward_all_tasks(const TensorF& x) const = 0;

 protected:
  explicit SegmentationNetwork(ModelConfig config) : config_(std::move(config)) {}
  void check_input(const TensorF& x, std::span<const int> tasks, int expected_channels) const;

  ModelConfig config_;
  ParameterSet params_;
};

class DoDNet : public SegmentationNetwork {
 public:
  DoDNet(const ModelConfig& config, std::uint64_t seed);

  Architecture architecture() const override { return Architecture::dodnet; }
  FeaturePyramid encode(const TensorF& x) const;
  /// Task-agnostic pre-segmentation map M [N, C, D, H, W].
  TensorF decode(const FeaturePyramid& pyramid) const;
  /// Flat kernels [N, K] from GAP(F) || one-hot(task).
  TensorF controller(const TensorF& bottleneck, std::span<const int> tasks) const;
  TensorF forward(const TensorF& x, std::span<const int> tasks) const override;
  std::vector<TensorF> forward_all_tasks(const TensorF& x) const override;

  /// Re-draws the controller parameters in place.
  void reinitialize_controller(std::uint64_t seed);

 private:
  layers::Encoder encoder_;
  layers::Decoder decoder_;
  TensorF controller_weight_;  // [K, bottleneck + m, 1, 1, 1]
  TensorF controller_bias_;    // [K]
};

/// Shared encoder with one narrowed decoder per task, each ending in a fixed
/// 2-channel output layer.
class MultiHeadNet : public SegmentationNetwork {
 public:
  MultiHeadNet(const ModelConfig& config, std::uint64_t seed);
  Architecture architecture() const override { return Architecture::multi_head; }
  TensorF forward(const TensorF& x, std::span<const int> tasks) const override;
  std::vector<TensorF> forward_all_tasks(const TensorF& x) const override;

 private:
  layers::Encoder encoder_;
  std::vector<layers::Decoder> decoders_;
};

/// Single fixed network whose input carries the one-hot task as m extra
/// constant channels.
class CondInputNet : public SegmentationNetwork {
 public:
  CondInputNet(const ModelConfig& config, std::uint64_t seed);
  Architecture architecture() const override { return Architecture::cond_input; }
  TensorF forward(const TensorF& x, std::span<const int> tasks) const override;
  std::vector<TensorF> forward_all_tasks(const TensorF& x) const override;

  /// Appends the broadcast one-hot maps to the image channels.
  TensorF augment_input(const TensorF& x, std::span<const int> tasks) const;

 private:
  layers::Encoder encoder_;
  layers::Decoder decoder_;
  std::vector<layers::Conv> head_;
};

std::unique_ptr<DoDNet> build_dodnet(const ModelConfig& config, std::uint64_t seed);
std::unique_ptr<MultiHeadNet> build_multi_head(const ModelConfig& config, std::uint64_t seed);
std::unique_ptr<CondInputNet> build_cond_input(const ModelConfig& config, std::uint64_t seed);
std::unique_ptr<SegmentationNetwork> build_network(Architecture arch, const ModelConfig& config,
                                                   std::uint64_t seed);

}  // namespace dodnet
