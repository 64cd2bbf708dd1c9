#include "prinv/pose_space.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "prinv/error.hpp"

namespace prinv {

RotationGroup parse_rotation_group(std::string_view name) {
  if (name == "I_R" || name == "I" || name == "identity") return RotationGroup::kIdentity;
  if (name == "A4") return RotationGroup::kA4;
  if (name == "S4") return RotationGroup::kS4;
  if (name == "A5") return RotationGroup::kA5;
  throw ConfigError("unknown rotation group '" + std::string(name) + "' (expected I_R, A4, S4, A5)");
}

std::string to_string(RotationGroup group) {
  switch (group) {
    case RotationGroup::kIdentity: return "I_R";
    case RotationGroup::kA4: return "A4";
    case RotationGroup::kS4: return "S4";
    case RotationGroup::kA5: return "A5";
  }
  return "?";
}

std::size_t group_order(RotationGroup group) {
  switch (group) {
    case RotationGroup::kIdentity: return 1;
    case RotationGroup::kA4: return 12;
    case RotationGroup::kS4: return 24;
    case RotationGroup::kA5: return 60;
  }
  return 0;
}

std::size_t find_matrix(const std::vector<Mat3>& matrices, const Mat3& m, double tol) {
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    if (max_abs_diff(matrices[i], m) < tol) return i;
  }
  return matrices.size();
}

namespace {

std::vector<Mat3> generators(RotationGroup group) {
  const double pi = std::numbers::pi;
  const Mat3 half_turn_z = Mat3::diag(-1, -1, 1);
  const Mat3 three_fold = rotation_about({1, 1, 1}, 2 * pi / 3);
  switch (group) {
    case RotationGroup::kIdentity: return {};
    case RotationGroup::kA4: return {three_fold, half_turn_z};
    case RotationGroup::kS4: return {three_fold, rotation_about({0, 0, 1}, pi / 2)};
    case RotationGroup::kA5: {
      // Vertex axis (0, 1, phi) is five-fold; z passes through the midpoint of
      // the edge (0, +-1, phi) and is two-fold.
      const Vec3 vertex{0.0, 1.0, std::numbers::phi};
      return {rotation_about(vertex, 2 * pi / 5), half_turn_z};
    }
  }
  return {};
}

}  // namespace

RotationSet build_rotation_set(RotationGroup group) {
  constexpr double kTol = 1e-6;
  RotationSet set;
  set.group = group;
  set.matrices.push_back(Mat3::identity());
  const auto gens = generators(group);
  for (const auto& g : gens) {
    if (find_matrix(set.matrices, g, kTol) == set.matrices.size()) set.matrices.push_back(g);
  }
  const std::size_t cap = 4 * group_order(group) + 4;
  for (std::size_t frontier = 0; frontier < set.matrices.size(); ++frontier) {
    for (const auto& g : gens) {
      const Mat3 p = set.matrices[frontier] * g;
      if (find_matrix(set.matrices, p, kTol) == set.matrices.size()) set.matrices.push_back(p);
    }
    if (set.matrices.size() > cap) break;
  }
  if (set.matrices.size() != group_order(group)) {
    throw Error("rotation group " + to_string(group) + " closed at order " +
                std::to_string(set.matrices.size()) + ", expected " +
                std::to_string(group_order(group)));
  }
  return set;
}

std::vector<Mat3> sign_set() {
  std::vector<Mat3> out;
  for (int s = 0; s < 8; ++s) {
    out.push_back(Mat3::diag(s & 1 ? -1.0 : 1.0, s & 2 ? -1.0 : 1.0, s & 4 ? -1.0 : 1.0));
  }
  return out;
}

std::vector<Mat3> pose_transforms(const RotationSet& group) {
  std::vector<Mat3> out;
  for (const auto& gs : sign_set()) {
    for (const auto& gr : group.matrices) {
      const Mat3 p = gs * gr;
      if (find_matrix(out, p, 1e-5) == out.size()) out.push_back(p);
    }
  }
  return out;
}

PcaResult pca_normalize(const PointCloud& cloud, double degeneracy_tol) {
  const std::size_t n = cloud.size();
  if (n < 3) throw ParameterError("pca_normalize: need at least 3 points");
  const Vec3 c = centroid(cloud);
  Mat3 cov;
  for (const auto& p : cloud.points) {
    const Vec3 d = p - c;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) cov(i, j) += d[i] * d[j];
    }
  }
  for (auto& v : cov.m) v /= double(n);
  auto eig = symmetric_eigen(cov);
  for (int j = 0; j < 3; ++j) {
    int big = 0;
    for (int i = 1; i < 3; ++i) {
      if (std::abs(eig.vectors(i, j)) > std::abs(eig.vectors(big, j))) big = i;
    }
    if (eig.vectors(big, j) < 0) {
      for (int i = 0; i < 3; ++i) eig.vectors(i, j) = -eig.vectors(i, j);
    }
  }
  PcaResult out;
  out.basis = eig.vectors;
  out.eigenvalues = eig.values;
  const double l0 = eig.values[0];
  const double gap = std::min(eig.values[0] - eig.values[1], eig.values[1] - eig.values[2]);
  out.relative_gap = l0 > 0 ? gap / l0 : 0.0;
  out.degenerate = !(l0 > 0) || gap < degeneracy_tol * l0;
  out.normalized.label = cloud.label;
  out.normalized.labels = cloud.labels;
  out.normalized.points.reserve(n);
  for (const auto& p : cloud.points) out.normalized.points.push_back((p - c) * eig.vectors);
  return out;
}

double cloud_distance(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, distance2(a[i], b[i]));
  return std::sqrt(d);
}

namespace {

bool clouds_within(const std::vector<Vec3>& a, const std::vector<Vec3>& b, double tol) {
  const double t2 = tol * tol;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (distance2(a[i], b[i]) >= t2) return false;
  }
  return true;
}

// Orders clouds by their coordinates, treating differences below 1e-9 as equal.
bool content_less(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  constexpr double kTol = 1e-9;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double d = a[i][c] - b[i][c];
      if (d < -kTol) return true;
      if (d > kTol) return false;
    }
  }
  return false;
}

}  // namespace

PoseSpace expand_poses(const PointCloud& normalized, const std::vector<Mat3>& transforms,
                       double dedup_tol) {
  PoseSpace space;
  space.transform_count = transforms.size();
  for (const auto& t : transforms) {
    Pose pose;
    pose.transform = t;
    pose.points.reserve(normalized.size());
    for (const auto& p : normalized.points) pose.points.push_back(p * t);
    bool duplicate = false;
    for (const auto& existing : space.poses) {
      if (clouds_within(existing.points, pose.points, dedup_tol)) {
        duplicate = true;
        break;
      }
    }
    if (duplicate) {
      space.collapsed = true;
    } else {
      space.poses.push_back(std::move(pose));
    }
  }
  std::stable_sort(space.poses.begin(), space.poses.end(),
                   [](const Pose& a, const Pose& b) { return content_less(a.points, b.points); });
  return space;
}

PoseSpace sym_space(const PointCloud& normalized) { return expand_poses(normalized, sign_set()); }

PoseSpace rot_space(const PointCloud& normalized, const RotationSet& group) {
  return expand_poses(normalized, pose_transforms(group));
}

std::vector<PoseMatch> match_pose_spaces(const PoseSpace& a, const PoseSpace& b) {
  std::vector<PoseMatch> out;
  std::vector<bool> used(b.size(), false);
  for (std::size_t i = 0; i < a.size(); ++i) {
    PoseMatch m{i, b.size(), std::numeric_limits<double>::infinity()};
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (used[j]) continue;
      const double d = cloud_distance(a.poses[i].points, b.poses[j].points);
      if (d < m.residual) {
        m.residual = d;
        m.matched = j;
      }
    }
    if (m.matched < b.size()) used[m.matched] = true;
    out.push_back(m);
  }
  return out;
}

double pose_space_residual(const PoseSpace& a, const PoseSpace& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double r = 0.0;
  for (const auto& m : match_pose_spaces(a, b)) r = std::max(r, m.residual);
  return r;
}

}  // namespace prinv
