#include "dodnet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace dodnet {

const TensorF* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : parameters) {
    if (n == name) return &t;
  }
  return nullptr;
}

Checkpoint make_checkpoint(const SegmentationNetwork& model, const SgdMomentum* optimizer,
                           std::int64_t step) {
  Checkpoint c;
  c.architecture = model.architecture();
  c.config = model.config();
  c.step = step;
  for (const auto& [name, t] : model.parameters().entries()) c.parameters.emplace_back(name, t.detach());
  if (optimizer) c.optimizer = optimizer->state();
  return c;
}

namespace {

constexpr char kMagic[4] = {'D', 'O', 'D', 'N'};
const std::string kVelocityPrefix = "opt.velocity.";

std::string config_text(const Checkpoint& c) {
  std::ostringstream os;
  os.precision(17);
  const auto& m = c.config;
  os << "architecture=" << to_string(c.architecture) << '\n'
     << "base_channels=" << m.base_channels << '\n'
     << "num_downsamples=" << m.num_downsamples << '\n'
     << "pre_seg_channels=" << m.pre_seg_channels << '\n'
     << "head_depth=" << m.head_depth << '\n'
     << "head_width=" << m.head_width << '\n'
     << "num_tasks=" << m.num_tasks << '\n'
     << "gn_groups=" << m.gn_groups << '\n'
     << "input_channels=" << m.input_channels << '\n'
     << "condition_on_image=" << (m.condition_on_image ? 1 : 0) << '\n'
     << "condition_on_task=" << (m.condition_on_task ? 1 : 0) << '\n'
     << "step=" << c.step << '\n'
     << "has_optimizer=" << (c.optimizer ? 1 : 0) << '\n';
  if (c.optimizer) {
    os << "momentum=" << c.optimizer->momentum << '\n' << "learning_rate=" << c.optimizer->learning_rate << '\n';
  }
  return os.str();
}

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void string(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void record(const std::string& name, const Shape& shape, std::span<const float> values) {
    string(name);
    u32(static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) u64(static_cast<std::uint64_t>(e));
    bytes(values.data(), values.size() * sizeof(float));
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::vector<char> buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}
  void bytes(void* p, std::size_t n, const std::string& what) {
    if (n > buf_.size() - pos_) {
      throw CheckpointError(path_ + ": truncated while reading " + what);
    }
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32(const std::string& what) {
    std::uint32_t v;
    bytes(&v, 4, what);
    return v;
  }
  std::uint64_t u64(const std::string& what) {
    std::uint64_t v;
    bytes(&v, 8, what);
    return v;
  }
  std::string string(const std::string& what) {
    const auto n = u32(what + " length");
    if (n > buf_.size() - pos_) throw CheckpointError(path_ + ": truncated while reading " + what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }
  const std::string& path() const { return path_; }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
  std::string path_;
};

std::map<std::string, std::string> parse_config(const std::string& text, const std::string& path) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError(path + ": malformed config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

template <typename Num>
Num config_value(const std::map<std::string, std::string>& kv, const std::string& key, const std::string& path) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError(path + ": config block lacks '" + key + "'");
  std::istringstream is(it->second);
  Num v{};
  is >> v;
  if (!is) throw CheckpointError(path + ": bad value for '" + key + "'");
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (c.optimizer && c.optimizer->velocity.size() != c.parameters.size()) {
    throw CheckpointError("optimizer state does not match the parameter list");
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    Writer w(out);
    w.bytes(kMagic, 4);
    w.u32(c.version);
    w.string(config_text(c));
    const std::size_t records = c.parameters.size() * (c.optimizer ? 2 : 1);
    w.u32(static_cast<std::uint32_t>(records));
    for (const auto& [name, t] : c.parameters) w.record(name, t.shape(), t.data());
    if (c.optimizer) {
      for (std::size_t i = 0; i < c.parameters.size(); ++i) {
        const auto& v = c.optimizer->velocity[i];
        w.record(kVelocityPrefix + c.parameters[i].first, c.parameters[i].second.shape(), v);
      }
    }
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(buf), path.string());

  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  Checkpoint c;
  c.version = r.u32("version");
  if (c.version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(c.version));
  }
  const auto kv = parse_config(r.string("config block"), path.string());
  const std::string& p = r.path();
  try {
    c.architecture = parse_architecture(kv.count("architecture") ? kv.at("architecture") : "");
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(p + ": " + e.what());
  }
  auto& m = c.config;
  m.base_channels = config_value<int>(kv, "base_channels", p);
  m.num_downsamples = config_value<int>(kv, "num_downsamples", p);
  m.pre_seg_channels = config_value<int>(kv, "pre_seg_channels", p);
  m.head_depth = config_value<int>(kv, "head_depth", p);
  m.head_width = config_value<int>(kv, "head_width", p);
  m.num_tasks = config_value<int>(kv, "num_tasks", p);
  m.gn_groups = config_value<int>(kv, "gn_groups", p);
  m.input_channels = config_value<int>(kv, "input_channels", p);
  m.condition_on_image = config_value<int>(kv, "condition_on_image", p) != 0;
  m.condition_on_task = config_value<int>(kv, "condition_on_task", p) != 0;
  c.step = config_value<std::int64_t>(kv, "step", p);
  const bool has_opt = config_value<int>(kv, "has_optimizer", p) != 0;
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(p + ": " + e.what());
  }

  std::map<std::string, std::vector<float>> velocity;
  const auto records = r.u32("record count");
  for (std::uint32_t i = 0; i < records; ++i) {
    const std::string name = r.string("name of record " + std::to_string(i));
    const auto rank = r.u32("rank of block " + name);
    if (rank > 8) throw CheckpointError(p + ": block " + name + " has implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(static_cast<std::int64_t>(r.u64("extents of block " + name)));
    }
    const auto n = numel(shape);
    if (n < 0 || n > (std::int64_t{1} << 34)) throw CheckpointError(p + ": block " + name + " has implausible size");
    std::vector<float> values(static_cast<std::size_t>(n));
    r.bytes(values.data(), values.size() * sizeof(float), "payload of block " + name);
    if (name.rfind(kVelocityPrefix, 0) == 0) {
      velocity[name.substr(kVelocityPrefix.size())] = std::move(values);
    } else {
      if (c.find(name)) throw CheckpointError(p + ": block " + name + " appears twice");
      c.parameters.emplace_back(name, TensorF(shape, std::move(values)));
    }
  }
  if (!r.done()) throw CheckpointError(p + ": trailing bytes after the last record");
  if (has_opt) {
    OptimizerState st;
    st.momentum = config_value<double>(kv, "momentum", p);
    st.learning_rate = config_value<double>(kv, "learning_rate", p);
    for (const auto& [name, t] : c.parameters) {
      auto it = velocity.find(name);
      if (it == velocity.end()) throw CheckpointError(p + ": optimizer state lacks block " + name);
      st.velocity.push_back(std::move(it->second));
    }
    c.optimizer = std::move(st);
  }
  return c;
}

void apply_checkpoint(const Checkpoint& checkpoint, SegmentationNetwork& model, SgdMomentum* optimizer) {
  auto& entries = model.parameters().entries();
  for (const auto& [name, t] : entries) {
    const TensorF* src = checkpoint.find(name);
    if (!src) throw CheckpointError("checkpoint lacks block " + name);
    if (src->shape() != t.shape()) {
      throw CheckpointError("shape mismatch in block " + name + ": checkpoint " + to_string(src->shape()) +
                            ", model " + to_string(t.shape()));
    }
  }
  for (const auto& [name, t] : checkpoint.parameters) {
    if (!model.parameters().find(name)) throw CheckpointError("checkpoint block " + name + " is not in the model");
  }
  for (const auto& [name, t] : entries) {
    TensorF dst = t;
    const auto src = checkpoint.find(name)->data();
    std::copy(src.begin(), src.end(), dst.data().begin());
  }
  if (optimizer && checkpoint.optimizer) {
    OptimizerState st = *checkpoint.optimizer;
    // Reorder into the model's registration order.
    std::vector<std::vector<float>> ordered;
    for (const auto& [name, t] : entries) {
      for (std::size_t i = 0; i < checkpoint.parameters.size(); ++i) {
        if (checkpoint.parameters[i].first == name) ordered.push_back(checkpoint.optimizer->velocity[i]);
      }
    }
    st.velocity = std::move(ordered);
    optimizer->load_state(std::move(st));
  }
}

std::unique_ptr<SegmentationNetwork> restore_network(const Checkpoint& checkpoint) {
  auto net = build_network(checkpoint.architecture, checkpoint.config, 0);
  apply_checkpoint(checkpoint, *net);
  return net;
}

std::unique_ptr<DoDNet> transfer_init(const Checkpoint& pretrained, const ModelConfig& downstream,
                                      std::uint64_t seed) {
  auto net = build_dodnet(downstream, seed);
  for (const auto& [name, t] : net->parameters().entries()) {
    if (name.rfind("encoder.", 0) != 0 && name.rfind("decoder.", 0) != 0) continue;
    const TensorF* src = pretrained.find(name);
    if (!src) throw CheckpointError("pretrained checkpoint lacks backbone block " + name);
    if (src->shape() != t.shape()) {
      throw CheckpointError("backbone shape mismatch in block " + name + ": pretrained " + to_string(src->shape()) +
                            ", downstream " + to_string(t.shape()));
    }
    TensorF dst = t;
    std::copy(src->data().begin(), src->data().end(), dst.data().begin());
  }
  return net;
}

}  // namespace dodnet
