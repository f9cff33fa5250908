#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "dodnet/checkpoint.hpp"
#include "dodnet/train.hpp"
#include "support.hpp"

using namespace dodnet;
using testing::random_tensor;

namespace {

ModelConfig tiny(int m) {
  ModelConfig c = ModelConfig::desk(m);
  c.base_channels = 4;
  return c;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dodnet_train_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::vector<TaskDataset> small_sets(int m, int per_task, Split split, std::uint64_t seed = 1) {
  const auto spec = PhantomSpec::standard(m, seed);
  const auto all = generate_dataset(spec, split == Split::train ? per_task : 0,
                                    split == Split::test ? per_task : 0, {8, 16, 16});
  return group_by_task(all, split);
}

std::vector<float> flat_params(const SegmentationNetwork& net) {
  std::vector<float> out;
  for (const auto& [n, t] : net.parameters().entries()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

}  // namespace

TEST_CASE("poly learning rate") {
  CHECK(poly_lr(0, 100, 0.01) == 0.01);
  CHECK(poly_lr(100, 100, 0.01) == 0.0);
  CHECK(std::abs(poly_lr(50, 100, 0.01) - 0.0053589) < 1e-6);
  double prev = 1.0;
  for (int k = 0; k <= 37; ++k) {
    const double v = poly_lr(k, 37, 0.01);
    CHECK(v <= prev);
    CHECK(std::abs(v - 0.01 * std::pow(1.0 - k / 37.0, 0.9)) <= 1e-12);
    prev = v;
  }
  CHECK_THROWS_AS(poly_lr(101, 100, 0.01), std::out_of_range);
  CHECK_THROWS_AS(poly_lr(-1, 100, 0.01), std::out_of_range);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.lr_init = 0.0;
  CHECK_THROWS(c.validate());
  c = {};
  c.max_epochs = 0;
  CHECK_THROWS(c.validate());
  c = {};
  c.batch_size = 0;
  CHECK_THROWS(c.validate());
  CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("duplicated batch gives the same loss as a batch of one") {
  auto sets = small_sets(2, 2, Split::train);
  TrainConfig cfg;
  cfg.patch = {8, 16, 16};
  cfg.batch_size = 1;
  Rng rng(3);
  auto batch = draw_batch(sets, cfg, rng);
  std::vector<BatchItem> twice{batch[0], batch[0]};
  auto a = build_dodnet(tiny(2), 4);
  auto b = build_dodnet(tiny(2), 4);
  SgdMomentum oa(a->parameters().tensors(), 0.99), ob(b->parameters().tensors(), 0.99);
  const double la = train_step(*a, oa, batch, 0.0).loss;
  const double lb = train_step(*b, ob, twice, 0.0).loss;
  CHECK(la == doctest::Approx(lb).epsilon(1e-6));
}

TEST_CASE("lr = 0 leaves parameters unchanged") {
  auto sets = small_sets(2, 2, Split::train);
  TrainConfig cfg;
  cfg.patch = {8, 16, 16};
  Rng rng(5);
  auto net = build_dodnet(tiny(2), 6);
  SgdMomentum opt(net->parameters().tensors(), 0.99);
  const auto before = flat_params(*net);
  const auto batch = draw_batch(sets, cfg, rng);
  train_step(*net, opt, batch, 0.0);
  CHECK(flat_params(*net) == before);
  train_step(*net, opt, batch, 1e-3);
  CHECK(flat_params(*net) != before);
}

TEST_CASE("unlabeled channel gradients vanish through a full step") {
  auto spec = PhantomSpec::standard(2, 2);
  spec.recipes[0].has_organ = false;  // tumour-only
  spec.recipes[1].has_tumor = false;  // organ-only
  const auto all = generate_dataset(spec, 2, 0, {8, 16, 16});
  auto sets = group_by_task(all, Split::train);
  auto net = build_dodnet(tiny(2), 8);
  SgdMomentum opt(net->parameters().tensors(), 0.99);
  for (const auto& ds : sets) {
    std::vector<BatchItem> batch;
    for (const auto& s : ds.samples) batch.push_back({s.image, s.labels, ds.task});
    const auto out = train_step(*net, opt, batch, 1e-3);
    const auto g = out.logits.grad();
    const std::int64_t vox = 8 * 16 * 16;
    const int dead = ds.task.has_organ ? 1 : 0;
    bool live_nonzero = false;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < vox; ++i) {
        CHECK(g[static_cast<std::size_t>((n * 2 + dead) * vox + i)] == 0.0f);
        live_nonzero = live_nonzero || g[static_cast<std::size_t>((n * 2 + (1 - dead)) * vox + i)] != 0.0f;
      }
    CHECK(live_nonzero);
  }
}

TEST_CASE("non-finite loss aborts the step") {
  auto sets = small_sets(1, 1, Split::train);
  TrainConfig cfg;
  cfg.patch = {8, 16, 16};
  cfg.batch_size = 1;
  Rng rng(1);
  auto net = build_dodnet(tiny(1), 2);
  for (const auto& [name, t] : net->parameters().entries()) {
    if (name == "controller.bias") {
      TensorF tt = t;
      tt[0] = std::numeric_limits<float>::quiet_NaN();
    }
  }
  SgdMomentum opt(net->parameters().tensors(), 0.99);
  CHECK_THROWS_AS(train_step(*net, opt, draw_batch(sets, cfg, rng), 1e-3), TrainingDiverged);
}

TEST_CASE("deterministic training repeats bitwise") {
  auto sets = small_sets(2, 3, Split::train);
  TrainConfig cfg;
  cfg.patch = {8, 16, 16};
  cfg.max_epochs = 10;
  cfg.steps_per_epoch = 1;
  cfg.lr_init = 0.002;
  cfg.seed = 17;
  auto run = [&] {
    auto net = build_dodnet(tiny(2), cfg.seed);
    SgdMomentum opt(net->parameters().tensors(), cfg.momentum);
    return train(*net, opt, sets, cfg).losses;
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == 10);
  CHECK(a == b);
}

TEST_CASE("training rejects empty datasets and logs one dice entry per structure") {
  auto net = build_dodnet(tiny(2), 1);
  SgdMomentum opt(net->parameters().tensors(), 0.99);
  TrainConfig cfg;
  cfg.patch = {8, 16, 16};
  CHECK_THROWS(train(*net, opt, std::vector<TaskDataset>{}, cfg));
  std::vector<TaskDataset> empty{TaskDataset{TaskDescriptor{1, "a", true, true}, {}}};
  CHECK_THROWS(train(*net, opt, empty, cfg));

  auto train_sets = small_sets(2, 2, Split::train);
  auto val = small_sets(2, 1, Split::test);
  cfg.max_epochs = 2;
  cfg.steps_per_epoch = 2;
  cfg.eval_every = 2;
  const auto dir = scratch("log");
  std::ostringstream log;
  TrainHooks hooks;
  hooks.validation = val;
  hooks.checkpoint_dir = dir;
  hooks.log = &log;
  const auto result = train(*net, opt, train_sets, cfg, hooks);
  int eval_points = 0;
  for (const auto& r : result.log) {
    if (r.dice.empty()) continue;
    ++eval_points;
    CHECK(r.dice.size() == 4);
  }
  CHECK(eval_points == 2);
  CHECK(std::filesystem::exists(dir / "best.ckpt"));
  CHECK(std::filesystem::exists(dir / "last.ckpt"));
  std::istringstream lines(log.str());
  std::string header;
  std::getline(lines, header);
  CHECK(header == "step,lr,task,loss,dice");
  std::string first;
  std::getline(lines, first);
  CHECK(first.rfind("1,0.01,", 0) == 0);
}

TEST_CASE("window start positions") {
  CHECK(window_starts(32, 32) == std::vector<std::int64_t>{0});
  CHECK(window_starts(32, 16) == std::vector<std::int64_t>{0, 8, 16});
  CHECK(window_starts(40, 16) == std::vector<std::int64_t>{0, 8, 16, 24});
  CHECK(window_starts(20, 16) == std::vector<std::int64_t>{0, 4});
  CHECK_THROWS(window_starts(8, 16));
}

TEST_CASE("sliding window with the full extent equals one forward pass") {
  std::mt19937_64 rng(3);
  auto net = build_dodnet(tiny(2), 3);
  Volume v;
  v.shape = {8, 16, 16};
  const auto x = random_tensor<float>(Shape{1, 1, 8, 16, 16}, rng);
  v.values.assign(x.data().begin(), x.data().end());
  const auto stitched = sliding_window_predict(*net, v, 2, v.shape);
  const int task[] = {2};
  const auto direct = sigmoid(net->forward(x, task));
  REQUIRE(stitched.size() == direct.size());
  for (std::int64_t i = 0; i < direct.size(); ++i) CHECK(stitched[i] == direct[i]);
  CHECK_THROWS(sliding_window_predict(*net, v, 1, {16, 16, 16}));
}

TEST_CASE("sliding window stitching matches an accumulate-and-divide oracle") {
  std::mt19937_64 rng(4);
  auto net = build_dodnet(tiny(2), 5);
  Volume v;
  v.shape = {12, 20, 16};
  const auto x = random_tensor<float>(Shape{1, 1, 12, 20, 16}, rng);
  v.values.assign(x.data().begin(), x.data().end());
  const Extent3 win{8, 8, 8};
  const auto got = sliding_window_predict(*net, v, 1, win);

  const std::int64_t vox = 12 * 20 * 16;
  std::vector<double> acc(2 * vox, 0.0), cnt(vox, 0.0);
  const std::vector<std::int64_t> zs{0, 4}, ys{0, 4, 8, 12}, xs{0, 4, 8};
  const int task[] = {1};
  for (auto z0 : zs)
    for (auto y0 : ys)
      for (auto x0 : xs) {
        TensorF tile(Shape{1, 1, 8, 8, 8});
        for (int z = 0; z < 8; ++z)
          for (int y = 0; y < 8; ++y)
            for (int xx = 0; xx < 8; ++xx) tile[(z * 8 + y) * 8 + xx] = x[((z0 + z) * 20 + (y0 + y)) * 16 + x0 + xx];
        const auto p = sigmoid(net->forward(tile, task));
        for (int c = 0; c < 2; ++c)
          for (int z = 0; z < 8; ++z)
            for (int y = 0; y < 8; ++y)
              for (int xx = 0; xx < 8; ++xx) {
                const auto g = ((z0 + z) * 20 + (y0 + y)) * 16 + x0 + xx;
                acc[static_cast<std::size_t>(c * vox + g)] += p[c * 512 + (z * 8 + y) * 8 + xx];
                if (c == 0) cnt[static_cast<std::size_t>(g)] += 1.0;
              }
      }
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t i = 0; i < vox; ++i) {
      const double want = acc[static_cast<std::size_t>(c * vox + i)] / cnt[static_cast<std::size_t>(i)];
      CHECK(std::abs(got[c * vox + i] - want) <= 1e-6);
    }
}

TEST_CASE("checkpoint round-trip") {
  const auto dir = scratch("ckpt");
  auto net = build_dodnet(tiny(2), 7);
  SgdMomentum opt(net->parameters().tensors(), 0.99);
  for (auto& v : opt.state().velocity) std::fill(v.begin(), v.end(), 0.25f);
  save_checkpoint(dir / "a.ckpt", make_checkpoint(*net, &opt, 42));
  const auto c = load_checkpoint(dir / "a.ckpt");
  CHECK(c.step == 42);
  CHECK(c.config == net->config());
  REQUIRE(c.optimizer.has_value());
  CHECK(c.optimizer->velocity == opt.state().velocity);
  auto other = build_dodnet(tiny(2), 99);
  SgdMomentum opt2(other->parameters().tensors(), 0.99);
  apply_checkpoint(c, *other, &opt2);
  CHECK(flat_params(*other) == flat_params(*net));
  CHECK(opt2.state().velocity == opt.state().velocity);

  // Without optimizer state the checkpoint still loads for inference.
  save_checkpoint(dir / "b.ckpt", make_checkpoint(*net, nullptr, 1));
  const auto restored = restore_network(load_checkpoint(dir / "b.ckpt"));
  CHECK(flat_params(*restored) == flat_params(*net));
  CHECK(restored->architecture() == Architecture::dodnet);
}

TEST_CASE("checkpoint validation names the offending block") {
  const auto dir = scratch("ckpt_bad");
  auto net = build_dodnet(tiny(2), 7);
  save_checkpoint(dir / "a.ckpt", make_checkpoint(*net, nullptr, 0));
  const auto c = load_checkpoint(dir / "a.ckpt");
  ModelConfig wider = tiny(2);
  wider.base_channels = 8;
  auto other = build_dodnet(wider, 1);
  try {
    apply_checkpoint(c, *other);
    FAIL("expected a shape mismatch");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("encoder.stem.weight") != std::string::npos);
  }
  // Truncation and bad version.
  const auto size = std::filesystem::file_size(dir / "a.ckpt");
  std::filesystem::copy_file(dir / "a.ckpt", dir / "t.ckpt");
  std::filesystem::resize_file(dir / "t.ckpt", size - 10);
  CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), CheckpointError);
  {
    std::fstream f(dir / "a.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const std::uint32_t v = 9;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt"), CheckpointError);
}

TEST_CASE("transfer initialization copies the backbone and redraws the controller") {
  auto pre = build_dodnet(tiny(2), 7);
  const auto ckpt = make_checkpoint(*pre, nullptr, 0);
  auto same = transfer_init(ckpt, tiny(2), 123);
  for (const auto& [name, t] : same->parameters().entries()) {
    const auto* src = ckpt.find(name);
    REQUIRE(src != nullptr);
    const bool equal = std::equal(t.data().begin(), t.data().end(), src->data().begin());
    if (name.rfind("controller.weight", 0) == 0) {
      CHECK_FALSE(equal);
    } else if (name != "controller.bias") {
      CHECK(equal);
    }
    CHECK(t.requires_grad());
  }
  auto wider_m = transfer_init(ckpt, tiny(5), 1);
  CHECK(wider_m->parameters().find("controller.weight")->dim(1) == 16 + 5);
  ModelConfig mismatch = tiny(2);
  mismatch.base_channels = 8;
  CHECK_THROWS_AS(transfer_init(ckpt, mismatch, 1), CheckpointError);
}

TEST_CASE("evaluation scores every labelled structure") {
  auto net = build_dodnet(tiny(2), 1);
  auto sets = small_sets(2, 1, Split::test);
  sets[1].task.has_tumor = false;
  const auto r = evaluate(*net, sets, {8, 16, 16});
  CHECK(r.scores.size() == 3);
  for (const auto& s : r.scores) {
    CHECK(s.dice >= 0.0);
    CHECK(s.dice <= 1.0);
  }
}
