#include <doctest.h>

#include <cmath>
#include <random>

#include "dodnet/model.hpp"
#include "support.hpp"

using namespace dodnet;
using testing::random_tensor;

namespace {

ModelConfig tiny(int m) {
  ModelConfig c = ModelConfig::desk(m);
  c.base_channels = 4;
  return c;
}

bool any_nonzero(std::span<const float> g) {
  for (float v : g) {
    if (v != 0.0f) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("head parameter count") {
  ModelConfig c;
  CHECK(head_param_count(c) == 162);
  c.head_depth = 2;
  CHECK(head_param_count(c) == 90);
  c.head_depth = 3;
  c.head_width = 16;
  CHECK(head_param_count(c) == 450);
  c.head_width = 4;
  CHECK(head_param_count(c) == 66);
  CHECK(head_slice_lengths(c) == std::vector<std::int64_t>{32, 4, 16, 4, 8, 2});
  c.head_width = 8;
  CHECK(head_slice_lengths(c) == std::vector<std::int64_t>{64, 8, 64, 8, 16, 2});
}

TEST_CASE("task encoding is one-hot") {
  const auto t = encode_task(3, 7);
  CHECK(t.values == std::vector<float>{0, 0, 1, 0, 0, 0, 0});
  CHECK(encode_task(1, 1).values == std::vector<float>{1});
  for (int m = 1; m <= 8; ++m)
    for (int i = 1; i <= m; ++i) {
      float s = 0;
      for (float v : encode_task(i, m).values) s += v;
      CHECK(s == 1.0f);
    }
  CHECK_THROWS_AS(encode_task(0, 3), std::out_of_range);
  CHECK_THROWS_AS(encode_task(4, 3), std::out_of_range);
}

TEST_CASE("split_kernels and flatten_kernels are inverse") {
  std::mt19937_64 rng(1);
  ModelConfig c;
  const auto omega = random_tensor<float>(Shape{3, 162}, rng);
  const auto k = split_kernels(omega, c);
  REQUIRE(k.layers.size() == 3);
  CHECK(k.layers[0].weight.shape() == Shape{3, 8, 8});
  CHECK(k.layers[2].weight.shape() == Shape{3, 2, 8});
  CHECK(k.layers[2].bias.shape() == Shape{3, 2});
  // ω1 bias starts right after the 64 weights of sample 0.
  CHECK(k.layers[0].bias[0] == omega[64]);
  const auto back = flatten_kernels(k);
  REQUIRE(back.shape() == omega.shape());
  for (std::int64_t i = 0; i < omega.size(); ++i) CHECK(back[i] == omega[i]);
  CHECK_THROWS_AS(split_kernels(TensorF(Shape{1, 161}), c), ShapeError);
}

TEST_CASE("dynamic head hand-evaluated examples") {
  ModelConfig c;
  c.pre_seg_channels = 1;
  c.head_width = 1;
  // w1=1 b1=0 | w2=1 b2=-1 | w3=(1,-1) b3=(0,0)
  TensorF omega(Shape{1, 8}, std::vector<float>{1, 0, 1, -1, 1, -1, 0, 0});
  TensorF m(Shape{1, 1, 2, 2, 2}, 2.0f);
  const auto p = dynamic_head(m, split_kernels(omega, c));
  REQUIRE(p.shape() == Shape{1, 2, 2, 2, 2});
  for (int i = 0; i < 8; ++i) {
    CHECK(p[i] == 1.0f);
    CHECK(p[8 + i] == -1.0f);
  }
  // Zero last layer gives zero logits.
  ModelConfig d;
  std::mt19937_64 rng(2);
  auto w = random_tensor<float>(Shape{1, 162}, rng);
  for (int i = 162 - 18; i < 162; ++i) w[i] = 0.0f;
  const auto z = dynamic_head(random_tensor<float>(Shape{1, 8, 2, 2, 2}, rng), split_kernels(w, d));
  for (std::int64_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0f);
  CHECK_THROWS_AS(dynamic_head(TensorF(Shape{1, 4, 2, 2, 2}), split_kernels(w, d)), ShapeError);
}

TEST_CASE("encoder and decoder shape schedule") {
  std::mt19937_64 rng(3);
  ModelConfig c = ModelConfig::desk(2);
  c.base_channels = 4;
  DoDNet net(c, 5);
  const auto x = random_tensor<float>(Shape{1, 1, 16, 32, 32}, rng);
  const auto pyr = net.encode(x);
  REQUIRE(pyr.levels.size() == 3);
  CHECK(pyr.levels[0].shape() == Shape{1, 4, 16, 32, 32});
  CHECK(pyr.levels[1].shape() == Shape{1, 8, 8, 16, 16});
  CHECK(pyr.bottleneck().shape() == Shape{1, 16, 4, 8, 8});
  CHECK(net.decode(pyr).shape() == Shape{1, 8, 16, 32, 32});
  const int task[] = {2};
  CHECK(net.forward(x, task).shape() == Shape{1, 2, 16, 32, 32});
  CHECK_THROWS_AS(net.encode(TensorF(Shape{1, 1, 6, 8, 8})), ShapeError);

  ModelConfig p = ModelConfig::paper(7);
  std::vector<int> channels;
  for (int l = 0; l <= p.num_downsamples; ++l) channels.push_back(p.channels_at(l));
  CHECK(channels == std::vector<int>{32, 64, 128, 256, 512});
}

TEST_CASE("controller dimensions at the full-size config") {
  ModelConfig p = ModelConfig::paper(7);
  p.base_channels = 32;
  // Building the full network is cheap enough (parameters only).
  DoDNet net(p, 1);
  const auto* w = net.parameters().find("controller.weight");
  REQUIRE(w != nullptr);
  CHECK(w->shape() == Shape{162, 519, 1, 1, 1});
  CHECK(net.parameters().find("controller.bias")->shape() == Shape{162});
}

TEST_CASE("controller with zero weights returns its bias") {
  ModelConfig c = tiny(3);
  DoDNet net(c, 7);
  auto& params = net.parameters();
  for (const auto& [name, t] : params.entries()) {
    TensorF tt = t;
    if (name == "controller.weight") std::fill(tt.data().begin(), tt.data().end(), 0.0f);
    if (name == "controller.bias")
      for (std::int64_t i = 0; i < tt.size(); ++i) tt[i] = static_cast<float>(i) * 0.01f;
  }
  std::mt19937_64 rng(4);
  const int tasks[] = {1, 3};
  const auto omega = net.controller(random_tensor<float>(Shape{2, 16, 1, 2, 2}, rng), tasks);
  REQUIRE(omega.shape() == Shape{2, 162});
  for (std::int64_t i = 0; i < 162; ++i) {
    CHECK(omega[i] == static_cast<float>(i) * 0.01f);
    CHECK(omega[162 + i] == static_cast<float>(i) * 0.01f);
  }
}

TEST_CASE("pre-segmentation map is task-agnostic and kernels are task-specific") {
  std::mt19937_64 rng(5);
  ModelConfig c = tiny(4);
  DoDNet net(c, 9);
  const auto x = random_tensor<float>(Shape{1, 1, 8, 8, 8}, rng);
  const auto pyr = net.encode(x);
  const auto m0 = net.decode(pyr);
  std::vector<TensorF> omegas;
  for (int t = 1; t <= 4; ++t) {
    const auto m = net.decode(net.encode(x));
    CHECK(std::equal(m.data().begin(), m.data().end(), m0.data().begin()));
    const int task[] = {t};
    omegas.push_back(net.controller(pyr.bottleneck(), task));
  }
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b) {
      double diff = 0.0;
      for (std::int64_t i = 0; i < omegas[0].size(); ++i)
        diff = std::max(diff, std::abs(double(omegas[a][i]) - double(omegas[b][i])));
      CHECK(diff > 1e-9);
    }
  // Per-sample kernels in one batch.
  const auto xb = concat(std::vector<TensorF>{x, x}, 0);
  const int tasks[] = {1, 2};
  const auto p = net.forward(xb, tasks);
  const std::int64_t half = p.size() / 2;
  bool differs = false;
  for (std::int64_t i = 0; i < half; ++i) differs = differs || p[i] != p[half + i];
  CHECK(differs);
}

TEST_CASE("gradients reach encoder, decoder and controller") {
  std::mt19937_64 rng(6);
  ModelConfig c = tiny(2);
  DoDNet net(c, 10);
  const auto x = random_tensor<float>(Shape{2, 1, 8, 8, 8}, rng);
  const int tasks[] = {1, 2};
  Tape<float> tape;
  {
    TapeScope<float> scope(tape);
    const auto p = net.forward(x, tasks);
    tape.backward(sum(mul(p, random_tensor<float>(p.shape(), rng))));
  }
  bool enc = false, dec = false, ctl = false;
  for (const auto& [name, t] : net.parameters().entries()) {
    const bool nz = t.has_grad() && any_nonzero(t.grad());
    if (name.rfind("encoder.", 0) == 0) enc = enc || nz;
    if (name.rfind("decoder.", 0) == 0) dec = dec || nz;
    if (name.rfind("controller.", 0) == 0) ctl = ctl || nz;
  }
  CHECK(enc);
  CHECK(dec);
  CHECK(ctl);
}

TEST_CASE("multi-head baseline routes each task to its own decoder") {
  std::mt19937_64 rng(7);
  ModelConfig c = tiny(2);
  MultiHeadNet mh(c, 11);
  DoDNet dn(c, 11);
  const auto x = random_tensor<float>(Shape{1, 1, 8, 8, 8}, rng);
  const int task[] = {2};
  Tape<float> tape;
  {
    TapeScope<float> scope(tape);
    const auto p = mh.forward(x, task);
    CHECK(p.shape() == Shape{1, 2, 8, 8, 8});
    tape.backward(sum(p));
  }
  for (const auto& [name, t] : mh.parameters().entries()) {
    if (name.rfind("decoder1.", 0) == 0) CHECK_FALSE((t.has_grad() && any_nonzero(t.grad())));
  }
  bool d2 = false;
  for (const auto& [name, t] : mh.parameters().entries()) {
    if (name.rfind("decoder2.", 0) == 0) d2 = d2 || (t.has_grad() && any_nonzero(t.grad()));
  }
  CHECK(d2);
  // Decoder widths are halved relative to the shared decoder.
  CHECK(mh.parameters().find("decoder1.stage0.refine.conv2.weight")->dim(0) ==
        dn.parameters().find("decoder.stage0.refine.conv2.weight")->dim(0) / 2);
}

TEST_CASE("cond-input baseline broadcasts the task code as input channels") {
  std::mt19937_64 rng(8);
  ModelConfig c = tiny(7);
  CondInputNet net(c, 12);
  CHECK(net.parameters().find("encoder.stem.weight")->dim(1) == 8);
  const auto x = random_tensor<float>(Shape{1, 1, 4, 4, 4}, rng);
  const int task[] = {3};
  const auto aug = net.augment_input(x, task);
  REQUIRE(aug.shape() == Shape{1, 8, 4, 4, 4});
  for (int k = 0; k < 7; ++k)
    for (int i = 0; i < 64; ++i) CHECK(aug[(1 + k) * 64 + i] == (k == 2 ? 1.0f : 0.0f));
  CHECK(net.forward(x, task).shape() == Shape{1, 2, 4, 4, 4});
}

TEST_CASE("single-task degenerate config") {
  std::mt19937_64 rng(9);
  DoDNet net(tiny(1), 13);
  const int task[] = {1};
  CHECK(net.forward(random_tensor<float>(Shape{1, 1, 4, 4, 4}, rng), task).shape() == Shape{1, 2, 4, 4, 4});
  const int bad[] = {2};
  CHECK_THROWS_AS(net.forward(TensorF(Shape{1, 1, 4, 4, 4}), bad), std::out_of_range);
}

TEST_CASE("group count adapts to thin layers") {
  ModelConfig c;
  c.gn_groups = 8;
  CHECK(c.groups_for(32) == 8);
  CHECK(c.groups_for(4) == 4);
  CHECK(c.groups_for(6) == 6);
  CHECK(c.groups_for(12) == 6);
  CHECK(c.groups_for(1) == 1);
}

TEST_CASE("parameter names are unique and ordered") {
  ParameterSet ps;
  ps.add("a", TensorF(Shape{2}));
  CHECK_THROWS_AS(ps.add("a", TensorF(Shape{2})), std::logic_error);
  CHECK(ps.find("a")->requires_grad());
  CHECK(ps.scalar_count() == 2);
}
