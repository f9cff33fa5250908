#include "dodnet/model.hpp"

#include <cmath>
#include <stdexcept>

namespace dodnet {

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::dodnet:
      return "dodnet";
    case Architecture::multi_head:
      return "multi_head";
    case Architecture::cond_input:
      return "cond_input";
  }
  return "unknown";
}

Architecture parse_architecture(std::string_view name) {
  if (name == "dodnet") return Architecture::dodnet;
  if (name == "multi_head" || name == "multi-head") return Architecture::multi_head;
  if (name == "cond_input" || name == "cond-input") return Architecture::cond_input;
  throw std::invalid_argument("unknown architecture '" + std::string(name) + "'");
}

ModelConfig ModelConfig::paper(int num_tasks) {
  ModelConfig c;
  c.num_tasks = num_tasks;
  return c;
}

ModelConfig ModelConfig::desk(int num_tasks) {
  ModelConfig c;
  c.base_channels = 8;
  c.num_downsamples = 2;
  c.num_tasks = num_tasks;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
  if (base_channels < 1) fail("base_channels must be >= 1");
  if (num_downsamples < 0 || num_downsamples > 8) fail("num_downsamples must be in [0, 8]");
  if (pre_seg_channels < 1) fail("pre_seg_channels must be >= 1");
  if (head_depth < 1) fail("head_depth must be >= 1");
  if (head_width < 1) fail("head_width must be >= 1");
  if (num_tasks < 1) fail("num_tasks must be >= 1");
  if (gn_groups < 1) fail("gn_groups must be >= 1");
  if (input_channels < 1) fail("input_channels must be >= 1");
}

int ModelConfig::groups_for(int channels) const {
  int g = std::min(gn_groups, channels);
  while (g > 1 && channels % g != 0) --g;
  return std::max(g, 1);
}

TaskCode encode_task(int task_index, int num_tasks) {
  if (num_tasks < 1 || task_index < 1 || task_index > num_tasks) {
    throw std::out_of_range("task index " + std::to_string(task_index) + " outside [1, " +
                            std::to_string(num_tasks) + "]");
  }
  TaskCode code;
  code.values.assign(static_cast<std::size_t>(num_tasks), 0.0f);
  code.values[static_cast<std::size_t>(task_index - 1)] = 1.0f;
  return code;
}

std::vector<std::int64_t> head_slice_lengths(const ModelConfig& config) {
  const std::int64_t c = config.pre_seg_channels;
  const std::int64_t w = config.head_width;
  std::vector<std::int64_t> lengths;
  std::int64_t in = c;
  for (int l = 0; l < config.head_depth; ++l) {
    const std::int64_t out = (l + 1 == config.head_depth) ? 2 : w;
    lengths.push_back(out * in);
    lengths.push_back(out);
    in = out;
  }
  return lengths;
}

std::int64_t head_param_count(const ModelConfig& config) {
  std::int64_t total = 0;
  for (auto n : head_slice_lengths(config)) total += n;
  return total;
}

DynamicKernels split_kernels(const TensorF& omega, const ModelConfig& config) {
  const std::int64_t k = head_param_count(config);
  TensorF flat = omega;
  if (omega.rank() == 1) flat = reshape(omega, Shape{1, omega.dim(0)});
  if (flat.rank() != 2 || flat.dim(1) != k) {
    throw ShapeError("split_kernels: expected " + std::to_string(k) + " scalars per sample, got " +
                     to_string(omega.shape()));
  }
  const std::int64_t n = flat.dim(0);
  DynamicKernels kernels;
  std::int64_t offset = 0;
  std::int64_t in = config.pre_seg_channels;
  for (int l = 0; l < config.head_depth; ++l) {
    const std::int64_t out = (l + 1 == config.head_depth) ? 2 : config.head_width;
    DynamicKernels::Layer layer;
    layer.weight = reshape(narrow(flat, 1, offset, out * in), Shape{n, out, in});
    offset += out * in;
    layer.bias = narrow(flat, 1, offset, out);
    offset += out;
    kernels.layers.push_back(std::move(layer));
    in = out;
  }
  return kernels;
}

TensorF flatten_kernels(const DynamicKernels& kernels) {
  if (kernels.layers.empty()) throw ShapeError("flatten_kernels: no layers");
  const std::int64_t n = kernels.layers.front().weight.dim(0);
  std::vector<TensorF> parts;
  for (const auto& layer : kernels.layers) {
    parts.push_back(reshape(layer.weight, Shape{n, layer.weight.dim(1) * layer.weight.dim(2)}));
    parts.push_back(layer.bias);
  }
  return concat(parts, 1);
}

TensorF dynamic_head(const TensorF& features, const DynamicKernels& kernels) {
  if (kernels.layers.empty()) throw ShapeError("dynamic_head: no layers");
  if (features.rank() != 5 || features.dim(1) != kernels.layers.front().weight.dim(2)) {
    throw ShapeError("dynamic_head: feature map " + to_string(features.shape()) +
                     " does not match first kernel " +
                     to_string(kernels.layers.front().weight.shape()));
  }
  TensorF h = features;
  for (std::size_t l = 0; l < kernels.layers.size(); ++l) {
    h = pointwise_conv_per_sample(h, kernels.layers[l].weight, kernels.layers[l].bias);
    if (l + 1 < kernels.layers.size()) h = relu(h);
  }
  return h;
}

// ---------------------------------------------------------------------------

TensorF& ParameterSet::add(std::string name, TensorF tensor) {
  for (const auto& [existing, t] : entries_) {
    if (existing == name) throw std::logic_error("duplicate parameter name " + name);
  }
  tensor.set_requires_grad(true);
  entries_.emplace_back(std::move(name), std::move(tensor));
  return entries_.back().second;
}

std::vector<TensorF> ParameterSet::tensors() const {
  std::vector<TensorF> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

const TensorF* ParameterSet::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return &e.second;
  }
  return nullptr;
}

std::int64_t ParameterSet::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

// ---------------------------------------------------------------------------

namespace layers {

namespace {

TensorF gaussian(Shape shape, double stddev, Rng& rng) {
  TensorF t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<float>(dist(rng));
  return t;
}

}  // namespace

TensorF Conv::operator()(const TensorF& x) const {
  if (standardize) return conv3d(x, weight_standardize(weight), bias, options);
  return conv3d(x, weight, bias, options);
}

Conv make_conv(ParameterSet& params, const std::string& name, int in_channels, int out_channels,
               int kernel, int stride, bool standardize, Rng& rng) {
  Conv c;
  const double fan_in = static_cast<double>(in_channels) * kernel * kernel * kernel;
  c.weight = params.add(name + ".weight",
                        gaussian(Shape{out_channels, in_channels, kernel, kernel, kernel},
                                 std::sqrt(2.0 / fan_in), rng));
  c.bias = params.add(name + ".bias", TensorF(Shape{out_channels}));
  c.options.stride = {stride, stride, stride};
  const int pad = kernel / 2;
  c.options.padding = {pad, pad, pad};
  c.standardize = standardize;
  return c;
}

TensorF GroupNorm::operator()(const TensorF& x) const { return group_norm(x, groups, gamma, beta); }

GroupNorm make_group_norm(ParameterSet& params, const std::string& name, int channels, int groups) {
  GroupNorm g;
  g.gamma = params.add(name + ".gamma", TensorF(Shape{channels}, 1.0f));
  g.beta = params.add(name + ".beta", TensorF(Shape{channels}));
  g.groups = groups;
  return g;
}

TensorF ResidualBlock::operator()(const TensorF& x) const {
  TensorF h = relu(norm1(conv1(x)));
  h = relu(norm2(conv2(h)));
  TensorF skip = projection ? (*projection_norm)((*projection)(x)) : x;
  return add(h, skip);
}

ResidualBlock make_residual_block(ParameterSet& params, const std::string& name, int in_channels,
                                  int out_channels, int stride, const ModelConfig& config, Rng& rng) {
  ResidualBlock b;
  b.conv1 = make_conv(params, name + ".conv1", in_channels, out_channels, 3, stride, true, rng);
  b.norm1 = make_group_norm(params, name + ".norm1", out_channels, config.groups_for(out_channels));
  b.conv2 = make_conv(params, name + ".conv2", out_channels, out_channels, 3, 1, true, rng);
  b.norm2 = make_group_norm(params, name + ".norm2", out_channels, config.groups_for(out_channels));
  if (in_channels != out_channels || stride != 1) {
    b.projection = make_conv(params, name + ".proj", in_channels, out_channels, 1, stride, true, rng);
    b.projection_norm =
        make_group_norm(params, name + ".proj_norm", out_channels, config.groups_for(out_channels));
  }
  return b;
}

Encoder::Encoder(ParameterSet& params, const std::string& prefix, const ModelConfig& config,
                 int in_channels, Rng& rng)
    : config_(config), in_channels_(in_channels) {
  const int c0 = config.channels_at(0);
  stem_ = make_conv(params, prefix + ".stem", in_channels, c0, 3, 1, true, rng);
  stem_norm_ = make_group_norm(params, prefix + ".stem_norm", c0, config.groups_for(c0));
  for (int l = 0; l <= config.num_downsamples; ++l) {
    const int in = l == 0 ? c0 : config.channels_at(l - 1);
    levels_.push_back(make_residual_block(params, prefix + ".level" + std::to_string(l), in,
                                          config.channels_at(l), l == 0 ? 1 : 2, config, rng));
  }
}

FeaturePyramid Encoder::operator()(const TensorF& x) const {
  if (x.rank() != 5 || x.dim(1) != in_channels_) {
    throw ShapeError("encode: expected input [N," + std::to_string(in_channels_) +
                     ",D,H,W], got " + to_string(x.shape()));
  }
  const int div = config_.required_divisor();
  for (std::size_t a = 2; a < 5; ++a) {
    if (x.dim(a) % div != 0 || x.dim(a) == 0) {
      throw ShapeError("encode: spatial extents " + to_string(x.shape()) +
                       " must each be a positive multiple of " + std::to_string(div) + " (2^" +
                       std::to_string(config_.num_downsamples) + ")");
    }
  }
  FeaturePyramid pyramid;
  TensorF h = relu(stem_norm_(stem_(x)));
  for (const auto& block : levels_) {
    h = block(h);
    pyramid.levels.push_back(h);
  }
  return pyramid;
}

Decoder::Decoder(ParameterSet& params, const std::string& prefix, const ModelConfig& config,
                 int width_divisor, int out_channels, bool standardize_output, Rng& rng)
    : config_(config) {
  int in = config.bottleneck_channels();
  for (int l = config.num_downsamples - 1; l >= 0; --l) {
    const int skip = config.channels_at(l);
    const int width = std::max(1, skip / width_divisor);
    const std::string name = prefix + ".stage" + std::to_string(l);
    Stage s;
    s.up = make_conv(params, name + ".up", in, skip, 1, 1, true, rng);
    s.up_norm = make_group_norm(params, name + ".up_norm", skip, config.groups_for(skip));
    s.refine = make_residual_block(params, name + ".refine", skip, width, 1, config, rng);
    stages_.push_back(std::move(s));
    in = width;
  }
  out_norm_ = make_group_norm(params, prefix + ".out_norm", in, config.groups_for(in));
  out_ = make_conv(params, prefix + ".out", in, out_channels, 1, 1, standardize_output, rng);
}

TensorF Decoder::operator()(const FeaturePyramid& pyramid) const {
  const auto expected = static_cast<std::size_t>(config_.num_downsamples + 1);
  if (pyramid.levels.size() != expected) {
    throw ShapeError("decode: pyramid has " + std::to_string(pyramid.levels.size()) +
                     " levels, config expects " + std::to_string(expected));
  }
  for (std::size_t l = 0; l < expected; ++l) {
    if (pyramid.levels[l].dim(1) != config_.channels_at(static_cast<int>(l))) {
      throw ShapeError("decode: level " + std::to_string(l) + " has shape " +
                       to_string(pyramid.levels[l].shape()) + ", config expects " +
                       std::to_string(config_.channels_at(static_cast<int>(l))) + " channels");
    }
  }
  TensorF h = pyramid.bottleneck();
  std::size_t level = expected - 1;
  for (const auto& s : stages_) {
    --level;
    TensorF up = s.up_norm(s.up(upsample_trilinear2x(h)));
    h = s.refine(add(up, pyramid.levels[level]));
  }
  return out_(relu(out_norm_(h)));
}

}  // namespace layers

// ---------------------------------------------------------------------------

void SegmentationNetwork::check_input(const TensorF& x, std::span<const int> tasks,
                                      int expected_channels) const {
  if (!x.defined() || x.rank() != 5 || x.dim(1) != expected_channels) {
    throw ShapeError("forward: expected input [N," + std::to_string(expected_channels) +
                     ",D,H,W], got " + (x.defined() ? to_string(x.shape()) : std::string("?")));
  }
  if (static_cast<std::int64_t>(tasks.size()) != x.dim(0)) {
    throw std::invalid_argument("forward: " + std::to_string(tasks.size()) +
                                " task indices for batch of " + std::to_string(x.dim(0)));
  }
  for (int t : tasks) {
    if (t < 1 || t > config_.num_tasks) {
      throw std::out_of_range("forward: task index " + std::to_string(t) + " outside [1, " +
                              std::to_string(config_.num_tasks) + "]");
    }
  }
}

namespace {

std::vector<int> all_tasks(int m) {
  std::vector<int> t(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) t[static_cast<std::size_t>(i)] = i + 1;
  return t;
}

TensorF sample_of(const TensorF& batch, std::int64_t n) { return narrow(batch, 0, n, 1); }

}  // namespace

DoDNet::DoDNet(const ModelConfig& config, std::uint64_t seed) : SegmentationNetwork(config) {
  config_.validate();
  Rng rng(seed);
  encoder_ = layers::Encoder(params_, "encoder", config_, config_.input_channels, rng);
  decoder_ = layers::Decoder(params_, "decoder", config_, 1, config_.pre_seg_channels, true, rng);
  const int in = config_.bottleneck_channels() + config_.num_tasks;
  const std::int64_t k = head_param_count(config_);
  controller_weight_ = params_.add("controller.weight", TensorF(Shape{k, in, 1, 1, 1}));
  controller_bias_ = params_.add("controller.bias", TensorF(Shape{k}));
  reinitialize_controller(seed ^ 0x9e3779b97f4a7c15ULL);
}

void DoDNet::reinitialize_controller(std::uint64_t seed) {
  Rng rng(seed);
  const double fan_in = static_cast<double>(controller_weight_.dim(1));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : controller_weight_.data()) v = static_cast<float>(dist(rng));
  for (auto& v : controller_bias_.data()) v = 0.0f;
}

FeaturePyramid DoDNet::encode(const TensorF& x) const { return encoder_(x); }

TensorF DoDNet::decode(const FeaturePyramid& pyramid) const { return decoder_(pyramid); }

TensorF DoDNet::controller(const TensorF& bottleneck, std::span<const int> tasks) const {
  const std::int64_t n = bottleneck.dim(0);
  if (bottleneck.rank() != 5 || bottleneck.dim(1) != config_.bottleneck_channels()) {
    throw ShapeError("controller: bottleneck " + to_string(bottleneck.shape()) + " but controller expects " +
                     std::to_string(config_.bottleneck_channels()) + " channels");
  }
  if (static_cast<std::int64_t>(tasks.size()) != n) {
    throw std::invalid_argument("controller: one task index per sample required");
  }
  TensorF pooled = config_.condition_on_image ? global_avg_pool(bottleneck)
                                              : TensorF(Shape{n, bottleneck.dim(1)});
  TensorF codes(Shape{n, config_.num_tasks});
  if (config_.condition_on_task) {
    for (std::int64_t i = 0; i < n; ++i) {
      const auto code = encode_task(tasks[static_cast<std::size_t>(i)], config_.num_tasks);
      std::copy(code.values.begin(), code.values.end(), codes.data().begin() + i * config_.num_tasks);
    }
  }
  TensorF joined = concat(std::vector<TensorF>{pooled, codes}, 1);
  TensorF as_volume = reshape(joined, Shape{n, joined.dim(1), 1, 1, 1});
  TensorF omega = conv3d(as_volume, controller_weight_, controller_bias_);
  return reshape(omega, Shape{n, controller_weight_.dim(0)});
}

TensorF DoDNet::forward(const TensorF& x, std::span<const int> tasks) const {
  check_input(x, tasks, config_.input_channels);
  FeaturePyramid pyramid = encode(x);
  TensorF features = decode(pyramid);
  return dynamic_head(features, split_kernels(controller(pyramid.bottleneck(), tasks), config_));
}

std::vector<TensorF> DoDNet::forward_all_tasks(const TensorF& x) const {
  const std::vector<int> one{1};
  check_input(x, one, config_.input_channels);
  FeaturePyramid pyramid = encode(x);
  TensorF features = decode(pyramid);
  std::vector<TensorF> out;
  for (int t : all_tasks(config_.num_tasks)) {
    const int task[] = {t};
    out.push_back(dynamic_head(features, split_kernels(controller(pyramid.bottleneck(), task), config_)));
  }
  return out;
}

MultiHeadNet::MultiHeadNet(const ModelConfig& config, std::uint64_t seed) : SegmentationNetwork(config) {
  config_.validate();
  Rng rng(seed);
  encoder_ = layers::Encoder(params_, "encoder", config_, config_.input_channels, rng);
  for (int t = 1; t <= config_.num_tasks; ++t) {
    decoders_.emplace_back(params_, "decoder" + std::to_string(t), config_, 2, 2, false, rng);
  }
}

TensorF MultiHeadNet::forward(const TensorF& x, std::span<const int> tasks) const {
  check_input(x, tasks, config_.input_channels);
  FeaturePyramid pyramid = encoder_(x);
  const std::int64_t n = x.dim(0);
  if (n == 1) return decoders_[static_cast<std::size_t>(tasks[0] - 1)](pyramid);
  std::vector<TensorF> outputs;
  for (std::int64_t i = 0; i < n; ++i) {
    FeaturePyramid one;
    for (const auto& level : pyramid.levels) one.levels.push_back(sample_of(level, i));
    outputs.push_back(decoders_[static_cast<std::size_t>(tasks[static_cast<std::size_t>(i)] - 1)](one));
  }
  return concat(outputs, 0);
}

std::vector<TensorF> MultiHeadNet::forward_all_tasks(const TensorF& x) const {
  const std::vector<int> one{1};
  check_input(x, one, config_.input_channels);
  FeaturePyramid pyramid = encoder_(x);
  std::vector<TensorF> out;
  for (const auto& decoder : decoders_) out.push_back(decoder(pyramid));
  return out;
}

CondInputNet::CondInputNet(const ModelConfig& config, std::uint64_t seed) : SegmentationNetwork(config) {
  config_.validate();
  Rng rng(seed);
  encoder_ = layers::Encoder(params_, "encoder", config_, config_.input_channels + config_.num_tasks, rng);
  decoder_ = layers::Decoder(params_, "decoder", config_, 1, config_.pre_seg_channels, true, rng);
  int in = config_.pre_seg_channels;
  for (int l = 0; l < config_.head_depth; ++l) {
    const int out = (l + 1 == config_.head_depth) ? 2 : config_.head_width;
    head_.push_back(layers::make_conv(params_, "head.layer" + std::to_string(l), in, out, 1, 1, false, rng));
    in = out;
  }
}

TensorF CondInputNet::augment_input(const TensorF& x, std::span<const int> tasks) const {
  const std::int64_t n = x.dim(0);
  const std::int64_t vox = x.dim(2) * x.dim(3) * x.dim(4);
  const int m = config_.num_tasks;
  TensorF maps(Shape{n, m, x.dim(2), x.dim(3), x.dim(4)});
  for (std::int64_t i = 0; i < n; ++i) {
    const auto code = encode_task(tasks[static_cast<std::size_t>(i)], m);
    for (int k = 0; k < m; ++k) {
      float* dst = maps.data().data() + (i * m + k) * vox;
      std::fill(dst, dst + vox, code.values[static_cast<std::size_t>(k)]);
    }
  }
  return concat(std::vector<TensorF>{x, maps}, 1);
}

TensorF CondInputNet::forward(const TensorF& x, std::span<const int> tasks) const {
  check_input(x, tasks, config_.input_channels);
  TensorF h = decoder_(encoder_(augment_input(x, tasks)));
  for (std::size_t l = 0; l < head_.size(); ++l) {
    h = head_[l](h);
    if (l + 1 < head_.size()) h = relu(h);
  }
  return h;
}

std::vector<TensorF> CondInputNet::forward_all_tasks(const TensorF& x) const {
  std::vector<TensorF> out;
  for (int t : all_tasks(config_.num_tasks)) {
    const int task[] = {t};
    out.push_back(forward(x, task));
  }
  return out;
}

std::unique_ptr<DoDNet> build_dodnet(const ModelConfig& config, std::uint64_t seed) {
  return std::make_unique<DoDNet>(config, seed);
}

std::unique_ptr<MultiHeadNet> build_multi_head(const ModelConfig& config, std::uint64_t seed) {
  return std::make_unique<MultiHeadNet>(config, seed);
}

std::unique_ptr<CondInputNet> build_cond_input(const ModelConfig& config, std::uint64_t seed) {
  return std::make_unique<CondInputNet>(config, seed);
}

std::unique_ptr<SegmentationNetwork> build_network(Architecture arch, const ModelConfig& config,
                                                   std::uint64_t seed) {
  switch (arch) {
    case Architecture::dodnet:
      return build_dodnet(config, seed);
    case Architecture::multi_head:
      return build_multi_head(config, seed);
    case Architecture::cond_input:
      return build_cond_input(config, seed);
  }
  throw std::invalid_argument("unknown architecture");
}

}  // namespace dodnet
