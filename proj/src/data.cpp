#include "dodnet/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace dodnet {

static_assert(std::endian::native == std::endian::little,
              "volume and checkpoint payloads are written as native little-endian");

void Volume::validate() const {
  if (static_cast<std::int64_t>(values.size()) != voxels()) {
    throw ShapeError("volume payload length " + std::to_string(values.size()) +
                     " does not match shape " + to_string(Shape(shape.begin(), shape.end())));
  }
  for (double s : spacing) {
    if (!(s > 0.0)) throw std::invalid_argument("volume spacing must be positive");
  }
  if (labels) {
    if (labels->shape != shape) throw ShapeError("label grid shape differs from image shape");
    labels->validate();
  }
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;
  bool contains(double z, double y, double x) const {
    const double a = (z - center[0]) / radii[0];
    const double b = (y - center[1]) / radii[1];
    const double c = (x - center[2]) / radii[2];
    return a * a + b * b + c * c <= 1.0;
  }
};

struct Structure {
  Ellipsoid organ;
  std::vector<Ellipsoid> tumors;
};

Structure draw_structure(const TaskRecipe& r, bool with_tumors, const Extent3& shape,
                         std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Structure s;
  for (std::size_t a = 0; a < 3; ++a) {
    const double ext = static_cast<double>(shape[a]);
    const double cf = r.center_lo[a] + (r.center_hi[a] - r.center_lo[a]) * unit(rng);
    const double rf = r.radii_lo[a] + (r.radii_hi[a] - r.radii_lo[a]) * unit(rng);
    s.organ.center[a] = cf * ext - 0.5;
    s.organ.radii[a] = rf * ext;
    if (s.organ.center[a] - s.organ.radii[a] < -0.5 ||
        s.organ.center[a] + s.organ.radii[a] > ext - 0.5) {
      throw std::invalid_argument("phantom recipe '" + r.name + "' places its organ outside a grid of " +
                                  to_string(Shape(shape.begin(), shape.end())));
    }
  }
  if (with_tumors) {
    std::uniform_int_distribution<int> count(r.tumor_count_min, r.tumor_count_max);
    const int n = count(rng);
    const double min_ext = static_cast<double>(std::min({shape[0], shape[1], shape[2]}));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int t = 0; t < n; ++t) {
      // Uniform direction, radius <= 0.35 of the organ's normalized radius.
      std::array<double, 3> dir{gauss(rng), gauss(rng), gauss(rng)};
      const double norm = std::max(1e-12, std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]));
      const double rho = 0.35 * std::cbrt(unit(rng));
      Ellipsoid blob;
      const double rad =
          (r.tumor_radius_lo + (r.tumor_radius_hi - r.tumor_radius_lo) * unit(rng)) * min_ext / 16.0;
      for (std::size_t a = 0; a < 3; ++a) {
        blob.center[a] = s.organ.center[a] + rho * dir[a] / norm * s.organ.radii[a];
        blob.radii[a] = rad;
      }
      s.tumors.push_back(blob);
    }
  }
  return s;
}

}  // namespace

PhantomSpec PhantomSpec::standard(int num_tasks, std::uint64_t master_seed) {
  if (num_tasks < 1 || num_tasks > 8) throw std::invalid_argument("standard phantom spec supports 1..8 tasks");
  static constexpr std::array<std::array<int, 3>, 8> kOctants{{
      {0, 0, 0}, {1, 1, 1}, {0, 0, 1}, {1, 1, 0}, {0, 1, 0}, {1, 0, 1}, {0, 1, 1}, {1, 0, 0}}};
  PhantomSpec spec;
  spec.master_seed = master_seed;
  for (int k = 0; k < num_tasks; ++k) {
    TaskRecipe r;
    r.name = "task" + std::to_string(k + 1);
    const auto& oct = kOctants[static_cast<std::size_t>(k)];
    for (std::size_t a = 0; a < 3; ++a) {
      const double c = oct[a] ? 0.75 : 0.25;
      r.center_lo[a] = c - 0.02;
      r.center_hi[a] = c + 0.02;
    }
    // Elongated along W for even tasks, along H for odd ones.
    std::array<double, 3> radius{0.19, 0.14, 0.14};
    radius[k % 2 == 0 ? 2 : 1] = 0.19;
    for (std::size_t a = 0; a < 3; ++a) {
      r.radii_lo[a] = radius[a] * 0.9;
      r.radii_hi[a] = radius[a] * 1.05;
    }
    spec.recipes.push_back(r);
  }
  return spec;
}

TaskDescriptor PhantomSpec::task(int id) const {
  if (id < 1 || id > static_cast<int>(recipes.size())) {
    throw std::out_of_range("phantom spec has no task " + std::to_string(id));
  }
  const auto& r = recipes[static_cast<std::size_t>(id - 1)];
  TaskDescriptor t{id, r.name, r.has_organ, r.has_tumor};
  t.validate();
  return t;
}

LabeledSample generate_phantom(const PhantomSpec& spec, const TaskDescriptor& task,
                               std::uint64_t sample_seed, const Extent3& shape) {
  task.validate();
  if (task.id < 1 || task.id > static_cast<int>(spec.recipes.size())) {
    throw std::out_of_range("phantom spec has no recipe for task " + std::to_string(task.id));
  }
  if (spec.label_other_tasks && !spec.render_other_tasks) {
    throw std::invalid_argument("label_other_tasks needs render_other_tasks");
  }
  for (auto e : shape) {
    if (e < 1) throw std::invalid_argument("phantom shape must be positive");
  }
  const std::int64_t d = shape[0], h = shape[1], w = shape[2];
  const std::uint64_t base = splitmix64(spec.master_seed ^ splitmix64(sample_seed));

  std::vector<Structure> structures;
  std::vector<bool> own;
  std::vector<std::size_t> recipe_of;
  for (std::size_t k = 0; k < spec.recipes.size(); ++k) {
    const bool is_task = static_cast<int>(k) + 1 == task.id;
    if (!is_task && !spec.render_other_tasks) continue;
    std::mt19937_64 rng(splitmix64(base + k));
    const bool tumors = is_task ? task.has_tumor : spec.recipes[k].has_tumor;
    structures.push_back(draw_structure(spec.recipes[k], tumors, shape, rng));
    own.push_back(is_task);
    recipe_of.push_back(k);
  }

  LabeledSample s;
  s.task = task;
  s.image.shape = shape;
  s.image.values.assign(static_cast<std::size_t>(d * h * w), 0.0f);
  s.labels.shape = shape;
  s.labels.values.assign(s.image.values.size(), kBackground);
  const auto& recipe = spec.recipes[static_cast<std::size_t>(task.id - 1)];

  for (std::int64_t z = 0; z < d; ++z) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const auto idx = static_cast<std::size_t>((z * h + y) * w + x);
        const double zf = static_cast<double>(z), yf = static_cast<double>(y), xf = static_cast<double>(x);
        for (std::size_t k = 0; k < structures.size(); ++k) {
          const auto& st = structures[k];
          if (!st.organ.contains(zf, yf, xf)) continue;
          const auto& r = recipe;  // intensities are shared across recipes of one spec
          bool in_tumor = false;
          for (const auto& t : st.tumors) in_tumor = in_tumor || t.contains(zf, yf, xf);
          s.image.values[idx] = static_cast<float>(r.organ_intensity + (in_tumor ? r.tumor_offset : 0.0));
          if (own[k]) {
            if (in_tumor && task.has_tumor) {
              s.labels.values[idx] = kTumor;
            } else if (task.has_organ) {
              s.labels.values[idx] = kOrgan;
            }
          } else if (spec.label_other_tasks) {
            const auto& other = spec.recipes[recipe_of[k]];
            if (in_tumor && other.has_tumor) {
              s.labels.values[idx] = kTumor;
            } else if (other.has_organ && s.labels.values[idx] != kTumor) {
              s.labels.values[idx] = kOrgan;
            }
          }
        }
      }
    }
  }
  if (spec.noise_sigma > 0.0) {
    std::mt19937_64 rng(splitmix64(base ^ 0x6e6f697365ULL));
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (auto& v : s.image.values) v = static_cast<float>(v + noise(rng));
  }
  return s;
}

std::uint64_t sample_seed(const PhantomSpec& spec, int task_id, Split split, int index) {
  const std::uint64_t range = split == Split::train ? 0 : (std::uint64_t{1} << 40);
  return splitmix64(spec.master_seed + (static_cast<std::uint64_t>(task_id) << 48) + range +
                    static_cast<std::uint64_t>(index));
}

std::vector<LabeledSample> generate_dataset(const PhantomSpec& spec, int train_per_task,
                                            int test_per_task, const Extent3& shape) {
  std::vector<LabeledSample> out;
  for (int id = 1; id <= static_cast<int>(spec.recipes.size()); ++id) {
    const TaskDescriptor task = spec.task(id);
    for (int i = 0; i < train_per_task; ++i) {
      out.push_back(generate_phantom(spec, task, sample_seed(spec, id, Split::train, i), shape));
      out.back().split = Split::train;
    }
    for (int i = 0; i < test_per_task; ++i) {
      out.push_back(generate_phantom(spec, task, sample_seed(spec, id, Split::test, i), shape));
      out.back().split = Split::test;
    }
  }
  return out;
}

Volume normalize_hu(Volume v, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("normalize_hu: lo must be < hi");
  for (auto& x : v.values) {
    const double c = std::clamp(static_cast<double>(x), lo, hi);
    x = static_cast<float>(2.0 * (c - lo) / (hi - lo) - 1.0);
  }
  return v;
}

Patch sample_patch(const LabeledSample& sample, const Extent3& patch, std::mt19937_64& rng) {
  const Extent3& shape = sample.image.shape;
  for (std::size_t a = 0; a < 3; ++a) {
    if (patch[a] < 1 || patch[a] > shape[a]) {
      throw std::invalid_argument("patch " + to_string(Shape(patch.begin(), patch.end())) +
                                  " does not fit volume " + to_string(Shape(shape.begin(), shape.end())));
    }
  }
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  Patch p;
  const bool biased = coin(rng) < 0.5;
  std::vector<std::int64_t> foreground;
  if (biased) {
    for (std::size_t i = 0; i < sample.labels.values.size(); ++i) {
      if (sample.labels.values[i] > 0) foreground.push_back(static_cast<std::int64_t>(i));
    }
  }
  if (!foreground.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, foreground.size() - 1);
    std::int64_t idx = foreground[pick(rng)];
    const Extent3 centre{idx / (shape[1] * shape[2]), (idx / shape[2]) % shape[1], idx % shape[2]};
    for (std::size_t a = 0; a < 3; ++a) {
      p.offset[a] = std::clamp<std::int64_t>(centre[a] - patch[a] / 2, 0, shape[a] - patch[a]);
    }
  } else {
    for (std::size_t a = 0; a < 3; ++a) {
      std::uniform_int_distribution<std::int64_t> pos(0, shape[a] - patch[a]);
      p.offset[a] = pos(rng);
    }
  }
  p.image.shape = patch;
  p.image.spacing = sample.image.spacing;
  p.image.values.resize(static_cast<std::size_t>(patch[0] * patch[1] * patch[2]));
  p.labels.shape = patch;
  p.labels.values.resize(p.image.values.size());
  std::size_t o = 0;
  for (std::int64_t z = 0; z < patch[0]; ++z) {
    for (std::int64_t y = 0; y < patch[1]; ++y) {
      const std::int64_t src = ((z + p.offset[0]) * shape[1] + (y + p.offset[1])) * shape[2] + p.offset[2];
      std::copy_n(sample.image.values.begin() + src, patch[2], p.image.values.begin() + static_cast<std::ptrdiff_t>(o));
      std::copy_n(sample.labels.values.begin() + src, patch[2], p.labels.values.begin() + static_cast<std::ptrdiff_t>(o));
      o += static_cast<std::size_t>(patch[2]);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// File I/O

namespace {

std::filesystem::path with_ext(const std::filesystem::path& base, const char* ext) {
  return std::filesystem::path(base.string() + ext);
}

std::map<std::string, std::string> parse_header(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open header " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

const std::string& require_key(const std::map<std::string, std::string>& kv, const std::string& key,
                               const std::filesystem::path& path) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError(path.string() + ": missing header key '" + key + "'");
  return it->second;
}

template <typename Num>
Num parse_number(const std::string& s, const std::filesystem::path& path) {
  std::istringstream is(s);
  Num v{};
  is >> v;
  if (!is || !is.eof()) throw FormatError(path.string() + ": malformed number '" + s + "'");
  return v;
}

template <typename Elem>
std::vector<Elem> read_payload(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError("cannot open payload " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != count * sizeof(Elem)) {
    throw FormatError(path.string() + ": payload length mismatch, expected " +
                      std::to_string(count * sizeof(Elem)) + " bytes, found " + std::to_string(bytes));
  }
  in.seekg(0);
  std::vector<Elem> out(count);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  return out;
}

template <typename Elem>
void write_payload(const std::filesystem::path& path, const std::vector<Elem>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(Elem)));
  if (!out) throw FormatError("write failed for " + path.string());
}

const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

}  // namespace

void write_volume(const std::filesystem::path& base, const Volume& volume) {
  volume.validate();
  {
    std::ofstream hdr(with_ext(base, ".hdr"), std::ios::trunc);
    if (!hdr) throw FormatError("cannot write " + with_ext(base, ".hdr").string());
    hdr.precision(17);
    hdr << "version=1\n";
    hdr << "shape=" << volume.shape[0] << ',' << volume.shape[1] << ',' << volume.shape[2] << '\n';
    hdr << "spacing=" << volume.spacing[0] << ',' << volume.spacing[1] << ',' << volume.spacing[2] << '\n';
    hdr << "dtype=f32le\n";
    hdr << "has_labels=" << (volume.labels ? 1 : 0) << '\n';
  }
  write_payload(with_ext(base, ".img"), volume.values);
  if (volume.labels) write_payload(with_ext(base, ".lbl"), volume.labels->values);
}

Volume read_volume(const std::filesystem::path& base) {
  const auto hdr_path = with_ext(base, ".hdr");
  const auto kv = parse_header(hdr_path);
  const auto& version = require_key(kv, "version", hdr_path);
  if (version != "1") throw FormatError(hdr_path.string() + ": unsupported version " + version);
  const auto dtype = require_key(kv, "dtype", hdr_path);
  if (dtype != "f32le") throw FormatError(hdr_path.string() + ": unsupported dtype " + dtype);
  Volume v;
  const auto dims = split_csv(require_key(kv, "shape", hdr_path));
  if (dims.size() != 3) throw FormatError(hdr_path.string() + ": shape must have 3 extents");
  for (std::size_t a = 0; a < 3; ++a) {
    v.shape[a] = parse_number<std::int64_t>(dims[a], hdr_path);
    if (v.shape[a] < 1) throw FormatError(hdr_path.string() + ": non-positive extent");
  }
  if (auto it = kv.find("spacing"); it != kv.end()) {
    const auto sp = split_csv(it->second);
    if (sp.size() != 3) throw FormatError(hdr_path.string() + ": spacing must have 3 components");
    for (std::size_t a = 0; a < 3; ++a) v.spacing[a] = parse_number<double>(sp[a], hdr_path);
  }
  const auto n = static_cast<std::size_t>(v.voxels());
  v.values = read_payload<float>(with_ext(base, ".img"), n);
  const auto has_labels = require_key(kv, "has_labels", hdr_path);
  if (has_labels == "1") {
    LabelVolume lab;
    lab.shape = v.shape;
    lab.values = read_payload<std::uint8_t>(with_ext(base, ".lbl"), n);
    v.labels = std::move(lab);
  } else if (has_labels != "0") {
    throw FormatError(hdr_path.string() + ": has_labels must be 0 or 1");
  }
  try {
    v.validate();
  } catch (const std::exception& e) {
    throw FormatError(hdr_path.string() + ": " + e.what());
  }
  return v;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<LabeledSample>& samples) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) throw FormatError("cannot write manifest in " + dir.string());
  manifest << "name,task_id,task_name,has_organ,has_tumor,split\n";
  std::map<int, int> counters;
  for (const auto& s : samples) {
    const int idx = counters[s.task.id]++;
    const std::string name = "task" + std::to_string(s.task.id) + "_" + std::to_string(idx);
    Volume v = s.image;
    v.labels = s.labels;
    write_volume(dir / name, v);
    manifest << name << ',' << s.task.id << ',' << s.task.name << ',' << (s.task.has_organ ? 1 : 0) << ','
             << (s.task.has_tumor ? 1 : 0) << ',' << split_name(s.split) << '\n';
  }
}

std::vector<LabeledSample> read_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.csv";
  std::ifstream in(path);
  if (!in) throw FormatError("no manifest.csv in " + dir.string());
  std::string line;
  std::getline(in, line);
  std::vector<LabeledSample> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 6) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    LabeledSample s;
    s.task.id = parse_number<int>(f[1], path);
    s.task.name = f[2];
    s.task.has_organ = f[3] == "1";
    s.task.has_tumor = f[4] == "1";
    s.task.validate();
    if (f[5] == "train") {
      s.split = Split::train;
    } else if (f[5] == "test") {
      s.split = Split::test;
    } else {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": unknown split " + f[5]);
    }
    Volume v = read_volume(dir / f[0]);
    if (!v.labels) throw FormatError(f[0] + ": dataset volume without labels");
    s.labels = std::move(*v.labels);
    v.labels.reset();
    s.image = std::move(v);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dodnet
