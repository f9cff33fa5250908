#include "dodnet/bench.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <new>
#include <sstream>
#include <stdexcept>

namespace dodnet {

FlopCount FlopBreakdown::backbone() const {
  FlopCount f = encoder;
  f += decoder;
  return f;
}

FlopCount FlopBreakdown::total() const {
  FlopCount f = backbone();
  f += controller;
  f += head;
  return f;
}

double FlopBreakdown::head_ratio() const {
  const auto b = backbone().macs;
  if (b == 0) return 0.0;
  return static_cast<double>(controller.macs + head.macs) / static_cast<double>(b);
}

namespace {

// Mirrors the layer plan in model.cpp. Every convolution carries a bias.
struct Plan {
  const ModelConfig& cfg;
  std::int64_t voxels;  // full-resolution voxel count

  std::int64_t vox_at(int level) const { return voxels >> (3 * level); }

  static FlopCount conv(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t out_vox) {
    return {out_vox * cout * cin * k * k * k, out_vox * cout};
  }
  static std::int64_t conv_params(std::int64_t cin, std::int64_t cout, std::int64_t k) {
    return cout * cin * k * k * k + cout;
  }

  FlopCount block(std::int64_t cin, std::int64_t cout, std::int64_t out_vox, bool strided, std::int64_t& params) const {
    FlopCount f = conv(cin, cout, 3, out_vox);
    f += conv(cout, cout, 3, out_vox);
    params += conv_params(cin, cout, 3) + conv_params(cout, cout, 3) + 4 * cout;
    if (cin != cout || strided) {
      f += conv(cin, cout, 1, out_vox);
      params += conv_params(cin, cout, 1) + 2 * cout;
    }
    return f;
  }

  FlopCount encoder(std::int64_t in_channels, std::int64_t& params) const {
    const std::int64_t c0 = cfg.channels_at(0);
    FlopCount f = conv(in_channels, c0, 3, vox_at(0));
    params += conv_params(in_channels, c0, 3) + 2 * c0;
    for (int l = 0; l <= cfg.num_downsamples; ++l) {
      const std::int64_t in = l == 0 ? c0 : cfg.channels_at(l - 1);
      f += block(in, cfg.channels_at(l), vox_at(l), l > 0, params);
    }
    return f;
  }

  FlopCount decoder(int divisor, std::int64_t out_channels, std::int64_t& params) const {
    FlopCount f;
    std::int64_t in = cfg.bottleneck_channels();
    for (int l = cfg.num_downsamples - 1; l >= 0; --l) {
      const std::int64_t skip = cfg.channels_at(l);
      const std::int64_t width = std::max<std::int64_t>(1, skip / divisor);
      f += conv(in, skip, 1, vox_at(l));
      params += conv_params(in, skip, 1) + 2 * skip;
      f += block(skip, width, vox_at(l), false, params);
      in = width;
    }
    params += 2 * in + conv_params(in, out_channels, 1);
    f += conv(in, out_channels, 1, vox_at(0));
    return f;
  }
};

}  // namespace

FlopCount head_flops_per_voxel(const ModelConfig& config) {
  FlopCount f;
  std::int64_t in = config.pre_seg_channels;
  for (int l = 0; l < config.head_depth; ++l) {
    const std::int64_t out = (l + 1 == config.head_depth) ? 2 : config.head_width;
    f += FlopCount{out * in, out};
    in = out;
  }
  return f;
}

FlopBreakdown count_flops(const ModelConfig& config_in, const Extent3& shape, Architecture arch, int m) {
  if (m < 1) throw std::invalid_argument("count_flops: m must be >= 1");
  ModelConfig config = config_in;
  config.num_tasks = m;
  config.validate();
  const std::int64_t div = config.required_divisor();
  for (auto e : shape) {
    if (e < 1 || e % div != 0) {
      throw std::invalid_argument("count_flops: extents must be positive multiples of " + std::to_string(div));
    }
  }
  const Plan plan{config, shape[0] * shape[1] * shape[2]};
  std::int64_t ignored = 0;
  FlopBreakdown f;
  const FlopCount head = head_flops_per_voxel(config) * plan.voxels;
  switch (arch) {
    case Architecture::dodnet: {
      f.encoder = plan.encoder(config.input_channels, ignored);
      f.decoder = plan.decoder(1, config.pre_seg_channels, ignored);
      const std::int64_t k = head_param_count(config);
      f.controller = FlopCount{k * (config.bottleneck_channels() + m), k} * m;
      f.head = head * m;
      break;
    }
    case Architecture::multi_head:
      f.encoder = plan.encoder(config.input_channels, ignored);
      f.decoder = plan.decoder(2, 2, ignored) * m;
      break;
    case Architecture::cond_input:
      f.encoder = plan.encoder(config.input_channels + m, ignored) * m;
      f.decoder = plan.decoder(1, config.pre_seg_channels, ignored) * m;
      f.head = head * m;
      break;
  }
  return f;
}

std::int64_t count_params(const ModelConfig& config, Architecture arch) {
  config.validate();
  const Plan plan{config, 0};
  const std::int64_t m = config.num_tasks;
  std::int64_t p = 0;
  switch (arch) {
    case Architecture::dodnet: {
      plan.encoder(config.input_channels, p);
      plan.decoder(1, config.pre_seg_channels, p);
      const std::int64_t k = head_param_count(config);
      p += k * (config.bottleneck_channels() + m) + k;
      break;
    }
    case Architecture::multi_head:
      plan.encoder(config.input_channels, p);
      for (std::int64_t t = 0; t < m; ++t) plan.decoder(2, 2, p);
      break;
    case Architecture::cond_input:
      plan.encoder(config.input_channels + m, p);
      plan.decoder(1, config.pre_seg_channels, p);
      p += head_param_count(config);
      break;
  }
  return p;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of no values");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

const BenchRow& BenchReport::row(Architecture arch, int m) const {
  for (const auto& r : rows) {
    if (r.architecture == arch && r.m == m) return r;
  }
  throw std::out_of_range("bench report has no row for " + to_string(arch) + " m=" + std::to_string(m));
}

std::string BenchReport::table() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "input %lldx%lldx%lld, %d repetitions, %d thread(s)\n",
                static_cast<long long>(shape[0]), static_cast<long long>(shape[1]),
                static_cast<long long>(shape[2]), repetitions, threads);
  os << line;
  std::snprintf(line, sizeof line, "%-11s %3s %12s %16s %12s %11s\n", "arch", "m", "params", "total MACs",
                "head/bb", "median ms");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-11s %3d %12lld %16lld %12.3e %11.2f\n", to_string(r.architecture).c_str(),
                  r.m, static_cast<long long>(r.params), static_cast<long long>(r.flops.total().macs),
                  r.flops.head_ratio(), r.median_ms);
    os << line;
  }
  return os.str();
}

std::string BenchReport::csv_header() {
  return "arch,m,params,encoder_macs,decoder_macs,controller_macs,head_macs,total_macs,bias_adds,head_ratio,"
         "median_ms,repetitions,threads";
}

std::string BenchReport::csv() const {
  std::ostringstream os;
  os << csv_header() << '\n';
  for (const auto& r : rows) {
    const auto t = r.flops.total();
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6e,%.4f", r.flops.head_ratio(), r.median_ms);
    os << to_string(r.architecture) << ',' << r.m << ',' << r.params << ',' << r.flops.encoder.macs << ','
       << r.flops.decoder.macs << ',' << r.flops.controller.macs << ',' << r.flops.head.macs << ',' << t.macs << ','
       << t.bias_adds << ',' << buf << ',' << repetitions << ',' << threads << '\n';
  }
  return os.str();
}

BenchReport run_bench(const ModelConfig& config, std::span<const int> task_counts, const Extent3& shape,
                      int repetitions, std::uint64_t seed) {
  if (repetitions < 1) throw std::invalid_argument("run_bench: repetitions must be >= 1");
  BenchReport report;
  report.shape = shape;
  report.repetitions = repetitions;
  report.threads = Eigen::nbThreads();

  Rng rng(seed);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  TensorF x(Shape{1, config.input_channels, shape[0], shape[1], shape[2]});
  for (auto& v : x.data()) v = noise(rng);

  for (int m : task_counts) {
    for (Architecture arch : {Architecture::dodnet, Architecture::multi_head, Architecture::cond_input}) {
      ModelConfig cfg = config;
      cfg.num_tasks = m;
      BenchRow row;
      row.architecture = arch;
      row.m = m;
      try {
        auto net = build_network(arch, cfg, seed);
        row.params = net->parameters().scalar_count();
        row.flops = count_flops(cfg, shape, arch, m);
        net->forward_all_tasks(x);
        for (int r = 0; r < repetitions; ++r) {
          const auto t0 = std::chrono::steady_clock::now();
          const auto out = net->forward_all_tasks(x);
          const auto t1 = std::chrono::steady_clock::now();
          row.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
      } catch (const std::bad_alloc&) {
        throw std::runtime_error("run_bench: out of memory while running " + to_string(arch) + " with m=" +
                                 std::to_string(m));
      }
      row.median_ms = median(row.samples_ms);
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

}  // namespace dodnet
