#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include "prinv/error.hpp"
#include "prinv/pipeline.hpp"

namespace prinv {

double ShapeResidual::max() const {
  double m = 0.0;
  for (const auto& [name, v] : residuals) m = std::max(m, v);
  return m;
}

bool InvarianceReport::passed() const {
  for (const auto& s : shapes) {
    if (!s.skipped && !(s.max() < tolerance)) return false;
  }
  return true;
}

double InvarianceReport::worst_of(const std::string& name) const {
  for (const auto& [n, v] : worst) {
    if (n == name) return v;
  }
  return 0.0;
}

namespace {

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = std::abs(double(a[i]) - double(b[i]));
    if (!(e <= d)) d = std::isnan(e) ? std::numeric_limits<double>::infinity() : e;
  }
  return d;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// Rows [shape * rows_per, (shape + 1) * rows_per) of a stacked tensor.
std::span<const float> shape_rows(const Tensor& t, std::size_t shape, std::size_t shapes) {
  const std::size_t per = t.numel() / shapes;
  return t.data().subspan(shape * per, per);
}

void raise(std::vector<std::pair<std::string, double>>& table, const std::string& name, double v) {
  for (auto& [n, x] : table) {
    if (n == name) {
      x = std::max(x, v);
      return;
    }
  }
  table.emplace_back(name, v);
}

}  // namespace

InvarianceReport verify_invariance(const Model& model, const std::vector<PointCloud>& clouds,
                                   const InvarianceOptions& options,
                                   const std::vector<std::string>& sources) {
  InvarianceReport report;
  report.tolerance = options.tolerance;
  const Rng base(options.seed);
  constexpr std::size_t kChunk = 8;
  NoGradScope untaped;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    ShapeResidual sr;
    sr.index = i;
    sr.source = i < sources.size() ? sources[i] : std::to_string(i);
    sr.relative_gap = pca_normalize(center_and_scale(clouds[i])).relative_gap;
    if (sr.relative_gap < options.degeneracy) {
      sr.skipped = true;
      ++report.skipped;
      report.shapes.push_back(std::move(sr));
      continue;
    }
    ++report.checked;

    ForwardOptions fo;
    fo.break_selector = options.break_selector;
    ForwardTrace ref;
    fo.trace = &ref;
    const Tensor ref_logits = model.forward({clouds[i]}, fo);

    Rng rng = base.split(i);
    std::vector<std::pair<std::string, double>> table{
        {"logits", 0.0}, {"geo_features", 0.0}, {"pose_space", 0.0}, {"selected_pose", 0.0}};
    for (std::size_t done = 0; done < options.rotations; done += kChunk) {
      const std::size_t count = std::min(kChunk, options.rotations - done);
      std::vector<PointCloud> batch;
      for (std::size_t r = 0; r < count; ++r) {
        batch.push_back(transform(clouds[i], random_rotation(RotationMode::kSO3, rng)));
      }
      ForwardTrace tr;
      fo.trace = &tr;
      const Tensor logits = model.forward(batch, fo);
      for (std::size_t r = 0; r < count; ++r) {
        raise(table, "logits", max_abs_diff(ref_logits.data(), shape_rows(logits, r, count)));
        const auto& g0 = ref.geometry[0];
        const auto& g1 = tr.geometry[r];
        for (std::size_t l = 0; l < g0.levels.size(); ++l) {
          raise(table, "geo_features", max_abs_diff(g0.levels[l].geo, g1.levels[l].geo));
        }
        for (std::size_t s = 0; s < ref.poses.size(); ++s) {
          const auto& p0 = ref.poses[s][0];
          const auto& p1 = tr.poses[s][r];
          if (!p0.space.poses.empty() || !p1.space.poses.empty()) {
            raise(table, "pose_space", pose_space_residual(p0.space, p1.space));
          }
          raise(table, "selected_pose", cloud_distance(p0.selected_points, p1.selected_points));
        }
        for (std::size_t b = 0; b < ref.blocks.size(); ++b) {
          raise(table, ref.blocks[b].name,
                max_abs_diff(ref.blocks[b].features.data(),
                             shape_rows(tr.blocks[b].features, r, count)));
        }
      }
    }
    sr.residuals = std::move(table);
    for (const auto& [name, v] : sr.residuals) raise(report.worst, name, v);
    report.shapes.push_back(std::move(sr));
  }
  return report;
}

void write_residual_csv(std::ostream& out, const InvarianceReport& report) {
  out << "shape,source,relative_gap,skipped,quantity,residual\n";
  char buf[64];
  for (const auto& s : report.shapes) {
    std::snprintf(buf, sizeof buf, "%.6g", s.relative_gap);
    if (s.skipped) {
      out << s.index << ',' << s.source << ',' << buf << ",1,,\n";
      continue;
    }
    for (const auto& [name, v] : s.residuals) {
      char r[64];
      std::snprintf(r, sizeof r, "%.6e", v);
      out << s.index << ',' << s.source << ',' << buf << ",0," << name << ',' << r << '\n';
    }
  }
}

void print_residual_table(std::ostream& out, const InvarianceReport& report) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-20s %14s %8s\n", "quantity", "max residual", "status");
  out << buf;
  for (const auto& [name, v] : report.worst) {
    std::snprintf(buf, sizeof buf, "%-20s %14.3e %8s\n", name.c_str(), v,
                  v < report.tolerance ? "ok" : "FAIL");
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "shapes checked %zu, skipped as degenerate %zu, tolerance %.1e: %s\n",
                report.checked, report.skipped, report.tolerance,
                report.passed() ? "PASS" : "FAIL");
  out << buf;
}

}  // namespace prinv
