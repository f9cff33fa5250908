#include "dodnet/train.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <ostream>
#include <sstream>

#include "dodnet/checkpoint.hpp"
#include "dodnet/loss.hpp"

namespace dodnet {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (!(lr_init > 0.0)) fail("lr_init must be > 0");
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (steps_per_epoch < 1) fail("steps_per_epoch must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) fail("momentum must be in [0, 1)");
  if (eval_every < 0) fail("eval_every must be >= 0");
  for (auto e : patch) {
    if (e < 1) fail("patch extents must be positive");
  }
}

double poly_lr(std::int64_t k, std::int64_t K, double lr_init) {
  if (K < 1) throw std::invalid_argument("poly_lr: K must be >= 1");
  if (k < 0 || k > K) {
    throw std::out_of_range("poly_lr: step " + std::to_string(k) + " outside [0, " + std::to_string(K) + "]");
  }
  return lr_init * std::pow(1.0 - static_cast<double>(k) / static_cast<double>(K), 0.9);
}

std::vector<TaskDataset> group_by_task(std::span<const LabeledSample> samples, Split split) {
  std::map<int, TaskDataset> by_id;
  for (const auto& s : samples) {
    if (s.split != split) continue;
    auto& ds = by_id[s.task.id];
    ds.task = s.task;
    ds.samples.push_back(s);
  }
  std::vector<TaskDataset> out;
  for (auto& [id, ds] : by_id) out.push_back(std::move(ds));
  return out;
}

std::vector<BatchItem> draw_batch(std::span<const TaskDataset> datasets, const TrainConfig& config,
                                  Rng& rng) {
  if (datasets.empty()) throw std::invalid_argument("draw_batch: no task datasets");
  std::uniform_int_distribution<std::size_t> pick_task(0, datasets.size() - 1);
  const TaskDataset& ds = datasets[pick_task(rng)];
  if (ds.samples.empty()) {
    throw std::invalid_argument("draw_batch: task " + std::to_string(ds.task.id) + " has no samples");
  }
  std::uniform_int_distribution<std::size_t> pick_sample(0, ds.samples.size() - 1);
  std::vector<BatchItem> batch;
  for (int b = 0; b < config.batch_size; ++b) {
    const LabeledSample& s = ds.samples[pick_sample(rng)];
    Patch p = sample_patch(s, config.patch, rng);
    batch.push_back(BatchItem{std::move(p.image), std::move(p.labels), ds.task});
  }
  return batch;
}

TensorF stack_images(std::span<const BatchItem> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const Extent3 shape = batch.front().image.shape;
  const std::int64_t vox = shape[0] * shape[1] * shape[2];
  TensorF x(Shape{static_cast<std::int64_t>(batch.size()), 1, shape[0], shape[1], shape[2]});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& img = batch[i].image;
    if (img.shape != shape || static_cast<std::int64_t>(img.values.size()) != vox) {
      throw ShapeError("batch items must share one patch shape");
    }
    std::copy(img.values.begin(), img.values.end(), x.data().begin() + static_cast<std::ptrdiff_t>(i) * vox);
  }
  return x;
}

StepOutcome train_step(SegmentationNetwork& model, SgdMomentum& optimizer,
                       std::span<const BatchItem> batch, double lr) {
  TensorF x = stack_images(batch);
  std::vector<int> tasks;
  for (const auto& item : batch) tasks.push_back(item.task.id);

  optimizer.zero_grad();
  StepOutcome out;
  Tape<float> tape;
  {
    TapeScope<float> scope(tape);
    out.logits = model.forward(x, tasks);
    std::vector<TensorF> losses;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      TensorF sample = narrow(out.logits, 0, static_cast<std::int64_t>(i), 1);
      losses.push_back(masked_task_loss(sample, std::span<const LabelVolume>(&batch[i].labels, 1), batch[i].task));
    }
    TensorF total = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    total = scale(total, 1.0f / static_cast<float>(losses.size()));
    out.loss = total.item();
    if (!std::isfinite(out.loss)) {
      tape.clear();
      throw TrainingDiverged("non-finite loss " + std::to_string(out.loss) + " on task " +
                             std::to_string(tasks.front()));
    }
    tape.backward(total);
  }
  optimizer.step(lr);
  return out;
}

std::vector<std::int64_t> window_starts(std::int64_t extent, std::int64_t window) {
  if (window < 1 || window > extent) {
    throw std::invalid_argument("window " + std::to_string(window) + " does not fit extent " +
                                std::to_string(extent));
  }
  const std::int64_t stride = std::max<std::int64_t>(1, window / 2);
  std::vector<std::int64_t> starts;
  for (std::int64_t s = 0;; s += stride) {
    if (s + window >= extent) {
      starts.push_back(extent - window);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

TensorF sliding_window_predict(const SegmentationNetwork& model, const Volume& volume, int task_index,
                               const Extent3& window) {
  const Extent3& shape = volume.shape;
  if (static_cast<std::int64_t>(volume.values.size()) != volume.voxels()) {
    throw ShapeError("sliding_window_predict: volume payload does not match its shape");
  }
  for (std::size_t a = 0; a < 3; ++a) {
    if (window[a] > shape[a] || window[a] < 1) {
      throw std::invalid_argument("sliding_window_predict: window " +
                                  to_string(Shape(window.begin(), window.end())) + " exceeds volume " +
                                  to_string(Shape(shape.begin(), shape.end())));
    }
  }
  const auto zs = window_starts(shape[0], window[0]);
  const auto ys = window_starts(shape[1], window[1]);
  const auto xs = window_starts(shape[2], window[2]);
  const std::int64_t vox = volume.voxels();
  std::vector<double> acc(static_cast<std::size_t>(2 * vox), 0.0);
  std::vector<int> count(static_cast<std::size_t>(vox), 0);
  const int task[] = {task_index};
  const std::int64_t wv = window[0] * window[1] * window[2];

  for (auto z0 : zs) {
    for (auto y0 : ys) {
      for (auto x0 : xs) {
        TensorF tile(Shape{1, 1, window[0], window[1], window[2]});
        auto* dst = tile.data().data();
        for (std::int64_t z = 0; z < window[0]; ++z) {
          for (std::int64_t y = 0; y < window[1]; ++y) {
            const auto src = ((z + z0) * shape[1] + (y + y0)) * shape[2] + x0;
            std::copy_n(volume.values.begin() + src, window[2], dst + (z * window[1] + y) * window[2]);
          }
        }
        const TensorF probs = sigmoid(model.forward(tile, task));
        for (std::int64_t c = 0; c < 2; ++c) {
          for (std::int64_t z = 0; z < window[0]; ++z) {
            for (std::int64_t y = 0; y < window[1]; ++y) {
              for (std::int64_t x = 0; x < window[2]; ++x) {
                const auto g = ((z + z0) * shape[1] + (y + y0)) * shape[2] + (x + x0);
                acc[static_cast<std::size_t>(c * vox + g)] +=
                    probs[c * wv + (z * window[1] + y) * window[2] + x];
                if (c == 0) ++count[static_cast<std::size_t>(g)];
              }
            }
          }
        }
      }
    }
  }
  TensorF out(Shape{2, shape[0], shape[1], shape[2]});
  for (std::int64_t c = 0; c < 2; ++c) {
    for (std::int64_t i = 0; i < vox; ++i) {
      out[c * vox + i] = static_cast<float>(acc[static_cast<std::size_t>(c * vox + i)] /
                                            count[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

std::vector<std::uint8_t> binarize(const TensorF& probs, int channel) {
  if (probs.rank() != 4 || probs.dim(0) != 2 || channel < 0 || channel > 1) {
    throw ShapeError("binarize: expected [2,D,H,W] probabilities, got " + to_string(probs.shape()));
  }
  const std::int64_t vox = probs.size() / 2;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(vox));
  for (std::int64_t i = 0; i < vox; ++i) mask[static_cast<std::size_t>(i)] = probs[channel * vox + i] > 0.5f;
  return mask;
}

double EvalResult::mean_dice() const {
  if (scores.empty()) return 0.0;
  double s = 0.0;
  for (const auto& sc : scores) s += sc.dice;
  return s / static_cast<double>(scores.size());
}

double EvalResult::min_dice() const {
  if (scores.empty()) return 0.0;
  double m = scores.front().dice;
  for (const auto& sc : scores) m = std::min(m, sc.dice);
  return m;
}

EvalResult evaluate(const SegmentationNetwork& model, std::span<const TaskDataset> datasets,
                    const Extent3& window) {
  EvalResult result;
  for (const auto& ds : datasets) {
    struct Acc {
      double dice = 0.0, hd = 0.0;
      int n = 0, hd_n = 0;
    };
    Acc organ, tumor;
    for (const auto& s : ds.samples) {
      const TensorF probs = sliding_window_predict(model, s.image, ds.task.id, window);
      auto score = [&](Acc& a, int channel, const std::vector<std::uint8_t>& truth) {
        const auto pred = binarize(probs, channel);
        a.dice += dice_score(pred, truth);
        ++a.n;
        if (auto h = hausdorff(pred, truth, s.image.shape, s.image.spacing)) {
          a.hd += *h;
          ++a.hd_n;
        }
      };
      if (ds.task.has_organ) score(organ, 0, organ_target(s.labels));
      if (ds.task.has_tumor) score(tumor, 1, tumor_target(s.labels));
    }
    auto emit = [&](const Acc& a, const char* name) {
      if (a.n == 0) return;
      StructureScore sc;
      sc.task = ds.task.id;
      sc.structure = name;
      sc.dice = a.dice / a.n;
      if (a.hd_n > 0) sc.hausdorff = a.hd / a.hd_n;
      sc.samples = a.n;
      result.scores.push_back(sc);
    };
    if (ds.task.has_organ) emit(organ, "organ");
    if (ds.task.has_tumor) emit(tumor, "tumor");
  }
  return result;
}

std::string format_metric(const MetricRecord& r) {
  char head[128];
  std::snprintf(head, sizeof head, "%lld,%.6g,%d,%.6f", static_cast<long long>(r.step), r.lr, r.task, r.loss);
  std::string line = head;
  line += ',';
  for (std::size_t i = 0; i < r.dice.size(); ++i) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%stask%d/%s=%.4f", i ? ";" : "", r.dice[i].task, r.dice[i].structure.c_str(),
                  r.dice[i].dice);
    line += buf;
  }
  return line;
}

int configure_threads(bool deterministic) {
  int n = 1;
  if (const char* env = std::getenv("DODNET_THREADS")) {
    n = std::max(1, std::atoi(env));
  }
  (void)deterministic;  // a fixed thread count keeps Eigen's GEMM partitioning fixed
  Eigen::setNbThreads(n);
  return n;
}

TrainResult train(SegmentationNetwork& model, SgdMomentum& optimizer,
                  std::span<const TaskDataset> datasets, const TrainConfig& config,
                  const TrainHooks& hooks) {
  config.validate();
  if (datasets.empty()) throw std::invalid_argument("train: no task datasets");
  for (const auto& ds : datasets) {
    if (ds.samples.empty()) {
      throw std::invalid_argument("train: task " + std::to_string(ds.task.id) + " has an empty dataset");
    }
  }
  configure_threads(config.deterministic);
  Rng rng(config.seed);
  TrainResult result;
  const std::int64_t total = config.total_steps();
  const bool validate = !hooks.validation.empty();
  double best_score = -1.0;
  std::int64_t last_eval_step = -1;

  if (hooks.log) *hooks.log << "step,lr,task,loss,dice\n";
  auto save = [&](const char* name, std::int64_t step) {
    if (!hooks.checkpoint_dir) return;
    std::filesystem::create_directories(*hooks.checkpoint_dir);
    save_checkpoint(*hooks.checkpoint_dir / name, make_checkpoint(model, &optimizer, step));
  };
  auto run_eval = [&](MetricRecord& rec, std::int64_t step) {
    EvalResult ev = evaluate(model, hooks.validation, config.patch);
    rec.dice = ev.scores;
    last_eval_step = step;
    result.last = ev;
    if (ev.mean_dice() > best_score) {
      best_score = ev.mean_dice();
      result.best = ev;
      result.best_step = step;
      save("best.ckpt", step);
    }
  };

  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = poly_lr(epoch, config.max_epochs, config.lr_init);
    for (int s = 0; s < config.steps_per_epoch; ++s, ++step) {
      const auto batch = draw_batch(datasets, config, rng);
      const StepOutcome out = train_step(model, optimizer, batch, lr);
      result.losses.push_back(out.loss);
      MetricRecord rec{step + 1, lr, batch.front().task.id, out.loss, {}};
      if (validate && config.eval_every > 0 && (step + 1) % config.eval_every == 0) run_eval(rec, step + 1);
      if (hooks.log) *hooks.log << format_metric(rec) << '\n';
      result.log.push_back(std::move(rec));
      if (hooks.on_step) hooks.on_step(step + 1, out.loss);
    }
  }
  if (validate && last_eval_step != total) {
    MetricRecord rec{total, poly_lr(config.max_epochs, config.max_epochs, config.lr_init), 0,
                     result.losses.back(), {}};
    run_eval(rec, total);
    if (hooks.log) *hooks.log << format_metric(rec) << '\n';
    result.log.push_back(std::move(rec));
  }
  if (!validate) save("best.ckpt", total);
  save("last.ckpt", total);
  return result;
}

}  // namespace dodnet
