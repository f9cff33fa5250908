#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dodnet/data.hpp"
#include "dodnet/model.hpp"

namespace dodnet {

/// Multiply-accumulates plus separate bias additions.
struct FlopCount {
  std::int64_t macs = 0;
  std::int64_t bias_adds = 0;

  FlopCount& operator+=(const FlopCount& o) {
    macs += o.macs;
    bias_adds += o.bias_adds;
    return *this;
  }
  FlopCount operator*(std::int64_t k) const { return {macs * k, bias_adds * k}; }
  bool operator==(const FlopCount&) const = default;
};

/// Convolution cost only; normalization, activations and resampling are not
/// counted.
struct FlopBreakdown {
  FlopCount encoder;
  FlopCount decoder;
  FlopCount controller;
  FlopCount head;

  FlopCount backbone() const;
  FlopCount total() const;
  /// (controller + head) MACs over encoder + decoder MACs.
  double head_ratio() const;
};

/// Segmenting one input [1, input_channels, shape] for all m tasks:
/// dodnet runs the backbone once and m controller/head passes, multi_head
/// one encoder and m decoders, cond_input m complete passes.
FlopBreakdown count_flops(const ModelConfig& config, const Extent3& shape, Architecture arch, int m);

/// Dynamic (or fixed) head cost per voxel for one task.
FlopCount head_flops_per_voxel(const ModelConfig& config);

/// Trainable scalars of the network build_network(arch, config) creates,
/// counted from the layer plan without building it.
std::int64_t count_params(const ModelConfig& config, Architecture arch);

struct BenchRow {
  Architecture architecture = Architecture::dodnet;
  int m = 1;
  std::int64_t params = 0;
  FlopBreakdown flops;
  double median_ms = 0.0;
  std::vector<double> samples_ms;
};

struct BenchReport {
  Extent3 shape{0, 0, 0};
  int repetitions = 0;
  int threads = 1;
  std::vector<BenchRow> rows;

  const BenchRow& row(Architecture arch, int m) const;
  std::string table() const;
  static std::string csv_header();
  std::string csv() const;
};

/// For every m: builds the three architectures with m tasks, runs one
/// warm-up and `repetitions` timed calls of forward_all_tasks on a random
/// input, and records the median.
BenchReport run_bench(const ModelConfig& config, std::span<const int> task_counts, const Extent3& shape,
                      int repetitions, std::uint64_t seed = 0);

double median(std::vector<double> values);

}  // namespace dodnet
