#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dodnet/data.hpp"
#include "dodnet/model.hpp"
#include "dodnet/optim.hpp"

namespace dodnet {

struct TrainConfig {
  double lr_init = 0.01;
  int max_epochs = 1000;  // K
  double momentum = 0.99;
  int batch_size = 2;
  Extent3 patch{16, 32, 32};
  std::uint64_t seed = 0;
  int steps_per_epoch = 1;
  int eval_every = 0;  // steps between validations; 0 only validates at the end
  bool deterministic = true;

  void validate() const;
  std::int64_t total_steps() const {
    return static_cast<std::int64_t>(max_epochs) * steps_per_epoch;
  }
};

/// lr_init * (1 - k/K)^0.9 for 0 <= k <= K.
double poly_lr(std::int64_t k, std::int64_t K, double lr_init);

/// All samples available for one task.
struct TaskDataset {
  TaskDescriptor task;
  std::vector<LabeledSample> samples;
};

/// Groups samples by task id, keeping only the given split.
std::vector<TaskDataset> group_by_task(std::span<const LabeledSample> samples, Split split);

struct BatchItem {
  Volume image;  // one channel, already normalized
  LabelVolume labels;
  TaskDescriptor task;
};

/// One task drawn uniformly, then batch_size samples of it drawn uniformly
/// and cropped with sample_patch.
std::vector<BatchItem> draw_batch(std::span<const TaskDataset> datasets, const TrainConfig& config,
                                  Rng& rng);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepOutcome {
  double loss = 0.0;
  TensorF logits;  // keeps its gradient after the step
};

/// Forward with each sample's own task, masked loss averaged over the batch,
/// backward, then one momentum update at learning rate `lr`.
StepOutcome train_step(SegmentationNetwork& model, SgdMomentum& optimizer,
                       std::span<const BatchItem> batch, double lr);

/// Stitched sigmoid probabilities [2, D, H, W]. Windows are tiled with a
/// stride of half the window per axis, the last one flush with the border,
/// and overlapping predictions are averaged.
TensorF sliding_window_predict(const SegmentationNetwork& model, const Volume& volume, int task_index,
                               const Extent3& window);

/// Window start positions along one axis.
std::vector<std::int64_t> window_starts(std::int64_t extent, std::int64_t window);

/// Probabilities > 0.5 as a mask, for channel 0 (organ) or 1 (tumor).
std::vector<std::uint8_t> binarize(const TensorF& probs, int channel);

struct StructureScore {
  int task = 0;
  std::string structure;  // "organ" or "tumor"
  double dice = 0.0;
  std::optional<double> hausdorff;  // mean over samples where both masks are non-empty
  int samples = 0;
};

struct EvalResult {
  std::vector<StructureScore> scores;
  double mean_dice() const;
  double min_dice() const;
};

/// Dice and Hausdorff per labeled structure, averaged over the samples of
/// each task.
EvalResult evaluate(const SegmentationNetwork& model, std::span<const TaskDataset> datasets,
                    const Extent3& window);

/// One metric-log line: step, lr, task, loss, then per-structure Dice when
/// the line is an evaluation point.
struct MetricRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  int task = 0;
  double loss = 0.0;
  std::vector<StructureScore> dice;
};

std::string format_metric(const MetricRecord& record);

struct TrainHooks {
  std::span<const TaskDataset> validation;
  std::optional<std::filesystem::path> checkpoint_dir;  // best.ckpt and last.ckpt
  std::ostream* log = nullptr;
  std::function<void(std::int64_t step, double loss)> on_step;
};

struct TrainResult {
  std::vector<double> losses;
  std::vector<MetricRecord> log;
  std::optional<EvalResult> best;
  std::int64_t best_step = -1;
  std::optional<EvalResult> last;
};

/// Runs K * steps_per_epoch steps with the poly schedule applied per epoch.
TrainResult train(SegmentationNetwork& model, SgdMomentum& optimizer,
                  std::span<const TaskDataset> datasets, const TrainConfig& config,
                  const TrainHooks& hooks = {});

/// Batch of one-channel volumes as [N, 1, D, H, W].
TensorF stack_images(std::span<const BatchItem> batch);

/// Thread count from DODNET_THREADS (default 1); applied to Eigen.
int configure_threads(bool deterministic);

}  // namespace dodnet
