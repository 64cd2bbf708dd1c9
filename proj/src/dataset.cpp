#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>

#include "prinv/error.hpp"
#include "prinv/io.hpp"
#include "prinv/pipeline.hpp"

namespace prinv {

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train, val, test)");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

std::vector<PointCloud> Dataset::select(Split split) const {
  std::vector<PointCloud> out;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    if (splits[i] == split) out.push_back(clouds[i]);
  }
  return out;
}

std::size_t Dataset::count(Split split) const {
  return static_cast<std::size_t>(std::count(splits.begin(), splits.end(), split));
}

namespace {

// Splits one class's items: the first `test` shuffled slots go to test, the
// next `val` to val, the rest to train.
std::vector<Split> assign_splits(std::size_t n, double val_fraction, double test_fraction,
                                 Rng& rng) {
  if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1.0 + 1e-12) {
    throw ConfigError("split fractions must be >= 0 and sum below 1");
  }
  const auto test = static_cast<std::size_t>(std::llround(double(n) * test_fraction));
  const auto val = std::min(n - std::min(n, test),
                            static_cast<std::size_t>(std::llround(double(n) * val_fraction)));
  std::vector<Split> s(n, Split::kTrain);
  std::vector<std::size_t> slots(n);
  for (std::size_t i = 0; i < n; ++i) slots[i] = i;
  rng.shuffle(slots);
  for (std::size_t i = 0; i < std::min(n, test); ++i) s[slots[i]] = Split::kTest;
  for (std::size_t i = test; i < std::min(n, test + val); ++i) s[slots[i]] = Split::kVal;
  return s;
}

Vec3 unit_direction(Rng& rng) {
  while (true) {
    const Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    const double n = norm(d);
    if (n > 1e-9) return (1.0 / n) * d;
  }
}

double vary(Rng& rng) { return rng.uniform(0.9, 1.1); }

// Ellipsoid whose -x half is shorter than its +x half; parts split by x sign.
void sample_egg(PointCloud& c, std::size_t n, Rng& rng) {
  const double ap = 1.0 * vary(rng), an = 0.7 * vary(rng), b = 0.55 * vary(rng),
               h = 0.3 * vary(rng);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 d = unit_direction(rng);
    c.points.push_back({d[0] * (d[0] >= 0 ? ap : an), d[1] * b, d[2] * h});
    c.labels.push_back(d[0] >= 0 ? 0 : 1);
  }
}

// Box surface; faces normal to x, y, z are parts 2, 3, 4.
void sample_box(PointCloud& c, std::size_t n, Rng& rng) {
  const double hx = 1.0 * vary(rng), hy = 0.6 * vary(rng), hz = 0.3 * vary(rng);
  const double ax = hy * hz, ay = hx * hz, az = hx * hy;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform() * (ax + ay + az);
    const double s = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double p = rng.uniform(-1, 1), q = rng.uniform(-1, 1);
    if (u < ax) {
      c.points.push_back({s * hx, p * hy, q * hz});
      c.labels.push_back(2);
    } else if (u < ax + ay) {
      c.points.push_back({p * hx, s * hy, q * hz});
      c.labels.push_back(3);
    } else {
      c.points.push_back({p * hx, q * hy, s * hz});
      c.labels.push_back(4);
    }
  }
}

// Large lobe (5) and small lobe (6), both flattened ellipsoids, joined by a
// bar (7) along x.
void sample_dumbbell(PointCloud& c, std::size_t n, Rng& rng) {
  const double s = vary(rng);
  const Vec3 big_c{-0.6 * s, 0, 0}, small_c{0.65 * s, 0, 0};
  const Vec3 big_r{0.35 * vary(rng), 0.4 * vary(rng), 0.15 * vary(rng)};
  const Vec3 small_r{0.25 * vary(rng), 0.28 * vary(rng), 0.1 * vary(rng)};
  const double bar_r = 0.06, bar_lo = big_c[0] + big_r[0] * 0.8, bar_hi = small_c[0] - small_r[0] * 0.8;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    if (u < 0.75) {
      const bool big = u < 0.45;
      const Vec3& ctr = big ? big_c : small_c;
      const Vec3& r = big ? big_r : small_r;
      const Vec3 d = unit_direction(rng);
      c.points.push_back({ctr[0] + d[0] * r[0], ctr[1] + d[1] * r[1], ctr[2] + d[2] * r[2]});
      c.labels.push_back(big ? 5 : 6);
    } else {
      const double t = rng.uniform(0, 2 * std::numbers::pi);
      c.points.push_back({rng.uniform(bar_lo, bar_hi), bar_r * std::cos(t), bar_r * std::sin(t)});
      c.labels.push_back(7);
    }
  }
}

// Two rectangular plates meeting at a right angle: a long horizontal plate (8)
// and a shorter upright one (9).
void sample_bracket(PointCloud& c, std::size_t n, Rng& rng) {
  const double lx = 1.2 * vary(rng), ly = 0.5 * vary(rng), lz = 0.7 * vary(rng);
  const double a0 = lx * ly, a1 = ly * lz;
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.uniform() * (a0 + a1) < a0) {
      c.points.push_back({rng.uniform(0, lx), rng.uniform(0, ly), 0.0});
      c.labels.push_back(8);
    } else {
      c.points.push_back({0.0, rng.uniform(0, ly), rng.uniform(0, lz)});
      c.labels.push_back(9);
    }
  }
}

PointCloud synth_shape(std::size_t cls, const SynthOptions& options, Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    PointCloud c;
    c.label = static_cast<int>(cls);
    switch (cls) {
      case 0: sample_egg(c, options.points, rng); break;
      case 1: sample_box(c, options.points, rng); break;
      case 2: sample_dumbbell(c, options.points, rng); break;
      default: sample_bracket(c, options.points, rng); break;
    }
    for (auto& p : c.points) {
      for (auto& v : p) v += options.jitter * rng.normal();
    }
    c = center_and_scale(c);
    if (pca_normalize(c).relative_gap >= kSynthMinGap) return c;
  }
  throw Error("synth_dataset: could not draw a non-degenerate shape");
}

}  // namespace

Dataset synth_dataset(std::uint64_t seed, const SynthOptions& options) {
  if (options.n_per_class == 0) throw ConfigError("n_per_class must be >= 1");
  if (options.points < 3) throw ConfigError("synthetic clouds need at least 3 points");
  Dataset d;
  d.class_names = {"ellipsoid", "box", "dumbbell", "bracket"};
  d.num_parts = kSynthParts;
  const Rng root(seed);
  for (std::size_t cls = 0; cls < kSynthClasses; ++cls) {
    Rng shapes = root.split(2 * cls);
    Rng split_rng = root.split(2 * cls + 1);
    const auto splits =
        assign_splits(options.n_per_class, options.val_fraction, options.test_fraction, split_rng);
    for (std::size_t i = 0; i < options.n_per_class; ++i) {
      d.clouds.push_back(synth_shape(cls, options, shapes));
      d.splits.push_back(splits[i]);
      d.sources.push_back("synth/" + d.class_names[cls] + "/" + std::to_string(i));
    }
  }
  return d;
}

namespace {

bool is_cloud_file(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  return ext == ".xyz" || ext == ".off" || ext == ".XYZ" || ext == ".OFF";
}

// Resamples to exactly `points` points: a random subset without replacement,
// or every point plus random repeats when the file is smaller.
PointCloud resample(const PointCloud& c, std::size_t points, Rng& rng) {
  std::vector<std::size_t> idx(c.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (c.size() >= points) {
    rng.shuffle(idx);
    idx.resize(points);
    std::sort(idx.begin(), idx.end());
  } else {
    while (idx.size() < points) idx.push_back(static_cast<std::size_t>(rng.below(c.size())));
  }
  return subset(c, idx);
}

}  // namespace

Dataset load_directory_dataset(const std::filesystem::path& root, std::uint64_t seed,
                               const DirectoryOptions& options) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset root " + root.string() + " is not a directory");
  Dataset d;
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  std::map<std::string, int> class_index;
  for (const auto& dir : class_dirs) {
    class_index[dir.filename().string()] = static_cast<int>(d.class_names.size());
    d.class_names.push_back(dir.filename().string());
  }

  // (relative path, split or nullopt)
  std::vector<std::pair<std::string, std::optional<Split>>> files;
  fs::path manifest = options.manifest.empty() ? root / "split.txt" : fs::path(options.manifest);
  if (!options.manifest.empty() && manifest.is_relative() && !fs::exists(manifest)) {
    manifest = root / manifest;
  }
  const bool use_manifest = fs::exists(manifest);
  if (!options.manifest.empty() && !use_manifest) {
    throw IoError("split manifest " + options.manifest + " not found");
  }
  if (use_manifest) {
    std::ifstream in(manifest);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      std::istringstream ls(line);
      std::string split, rel;
      if (!(ls >> split)) continue;
      if (!(ls >> rel)) {
        throw IoError(manifest.string() + ":" + std::to_string(line_no) + ": expected '<split> <path>'");
      }
      files.emplace_back(rel, parse_split(split));
    }
  } else {
    for (const auto& dir : class_dirs) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && is_cloud_file(e.path())) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      for (const auto& p : found) files.emplace_back(fs::relative(p, root).generic_string(), std::nullopt);
    }
  }

  const Rng base(seed);
  std::map<int, std::vector<std::size_t>> unsplit;  // class -> dataset rows
  for (std::size_t f = 0; f < files.size(); ++f) {
    const auto& [rel, split] = files[f];
    const fs::path rel_path(rel);
    const std::string cls = rel_path.begin() != rel_path.end() ? rel_path.begin()->string() : "";
    auto it = class_index.find(cls);
    if (it == class_index.end() || std::distance(rel_path.begin(), rel_path.end()) < 2) {
      throw IoError("'" + rel + "' is not under a class directory of " + root.string());
    }
    Rng rng = base.split(f);
    PointCloud cloud = resample(load_cloud(root / rel_path, options.points, rng), options.points, rng);
    cloud.label = it->second;
    for (int l : cloud.labels) {
      if (l < 0) throw IoError(rel + ": negative part label");
      d.num_parts = std::max(d.num_parts, static_cast<std::size_t>(l) + 1);
    }
    if (!split) unsplit[cloud.label].push_back(d.clouds.size());
    d.clouds.push_back(std::move(cloud));
    d.splits.push_back(split.value_or(Split::kTrain));
    d.sources.push_back(rel);
  }
  for (auto& [cls, rows] : unsplit) {
    Rng rng = base.split(1000003 + static_cast<std::uint64_t>(cls));
    const auto s = assign_splits(rows.size(), options.val_fraction, options.test_fraction, rng);
    for (std::size_t i = 0; i < rows.size(); ++i) d.splits[rows[i]] = s[i];
  }
  if (d.clouds.empty()) throw IoError("no .xyz or .off files found under " + root.string());
  return d;
}

void write_split_manifest(std::ostream& out, const Dataset& dataset) {
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out << to_string(dataset.splits[i]) << ' ' << dataset.sources[i] << '\n';
  }
}

RotationMode parse_rotation_mode(std::string_view name) {
  if (name == "none" || name == "I") return RotationMode::kNone;
  if (name == "z") return RotationMode::kZ;
  if (name == "SO3" || name == "SO(3)" || name == "so3") return RotationMode::kSO3;
  throw ConfigError("unknown rotation mode '" + std::string(name) + "' (expected none, z, SO3)");
}

std::string to_string(RotationMode mode) {
  switch (mode) {
    case RotationMode::kNone: return "none";
    case RotationMode::kZ: return "z";
    case RotationMode::kSO3: return "SO3";
  }
  return "?";
}

AugmentMode parse_augment_mode(std::string_view text) {
  if (text == "none") return {RotationMode::kNone, RotationMode::kNone};
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) {
    throw ConfigError("augment mode '" + std::string(text) + "' should look like z/SO3");
  }
  return {parse_rotation_mode(text.substr(0, slash)), parse_rotation_mode(text.substr(slash + 1))};
}

std::string to_string(const AugmentMode& mode) {
  return to_string(mode.train) + "/" + to_string(mode.test);
}

Mat3 random_rotation(RotationMode mode, Rng& rng) {
  switch (mode) {
    case RotationMode::kNone: return Mat3::identity();
    case RotationMode::kZ: return rotation_about({0, 0, 1}, rng.uniform(0, 2 * std::numbers::pi));
    case RotationMode::kSO3: {
      double q[4], n = 0.0;
      do {
        n = 0.0;
        for (auto& v : q) {
          v = rng.normal();
          n += v * v;
        }
      } while (n < 1e-12);
      n = std::sqrt(n);
      return quaternion_to_matrix(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    }
  }
  return Mat3::identity();
}

PointCloud rotate_and_jitter(const PointCloud& cloud, RotationMode mode, double noise, Rng& rng) {
  PointCloud out = mode == RotationMode::kNone ? cloud : transform(cloud, random_rotation(mode, rng));
  if (noise > 0) {
    for (auto& p : out.points) {
      for (auto& v : p) v += noise * rng.normal();
    }
  }
  return out;
}

Dataset load_dataset(const DataConfig& config) {
  if (config.data == "synth") {
    SynthOptions o;
    o.n_per_class = config.n_per_class;
    o.points = config.points;
    o.val_fraction = config.val_fraction;
    o.test_fraction = config.test_fraction;
    return synth_dataset(config.data_seed, o);
  }
  DirectoryOptions o;
  o.points = config.points;
  o.manifest = config.manifest;
  o.val_fraction = config.val_fraction;
  o.test_fraction = config.test_fraction;
  return load_directory_dataset(config.data, config.data_seed, o);
}

}  // namespace prinv
