#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "prinv/geometry.hpp"
#include "prinv/linalg.hpp"

namespace prinv {

enum class RotationGroup { kIdentity, kA4, kS4, kA5 };

// Accepts "I_R" (or "I"), "A4", "S4", "A5".
RotationGroup parse_rotation_group(std::string_view name);
std::string to_string(RotationGroup group);
std::size_t group_order(RotationGroup group);

// Finite rotation group in a fixed orientation. A4 and S4 are the tetrahedral
// and octahedral groups aligned with the coordinate axes; A5 is the rotation
// group of the icosahedron with vertices at cyclic permutations of
// (0, +-1, +-phi).
struct RotationSet {
  RotationGroup group = RotationGroup::kIdentity;
  std::vector<Mat3> matrices;

  std::size_t size() const { return matrices.size(); }
};

// Closure of the group's generators with 1e-6 deduplication. Throws Error if
// the result does not have the expected order.
RotationSet build_rotation_set(RotationGroup group);

// Index of a matrix within 'tol' of m, or matrices.size().
std::size_t find_matrix(const std::vector<Mat3>& matrices, const Mat3& m, double tol);

// The eight diagonal sign matrices diag(+-1, +-1, +-1).
std::vector<Mat3> sign_set();

// Distinct products g_s * g_r over signs x group, deduplicated at 1e-5.
std::vector<Mat3> pose_transforms(const RotationSet& group);

struct PcaResult {
  PointCloud normalized;  // (P - centroid) * basis
  Mat3 basis;             // columns are unit eigenvectors, eigenvalues descending
  Vec3 eigenvalues;       // population covariance, descending
  // Smallest of (l0 - l1, l1 - l2) divided by l0.
  double relative_gap = 0.0;
  bool degenerate = false;
};

// Pose normalization by principal axes. Each eigenvector is signed so that its
// largest-magnitude component is positive. `degenerate` is set when an
// eigenvalue gap falls below degeneracy_tol * l0. Throws ParameterError for
// fewer than 3 points.
PcaResult pca_normalize(const PointCloud& cloud, double degeneracy_tol = 1e-6);

struct Pose {
  Mat3 transform;
  std::vector<Vec3> points;
};

struct PoseSpace {
  std::vector<Pose> poses;
  // Number of distinct transforms before cloud deduplication.
  std::size_t transform_count = 0;
  // True when some transforms produced coinciding clouds (a self-symmetric shape).
  bool collapsed = false;

  std::size_t size() const { return poses.size(); }
};

inline constexpr double kCloudDedupTol = 1e-6;

// Max point distance between index-aligned clouds of equal size.
double cloud_distance(const std::vector<Vec3>& a, const std::vector<Vec3>& b);

// Poses P * t for each transform, with coinciding clouds removed and the rest
// ordered by cloud content, so the list order is a function of the pose set.
PoseSpace expand_poses(const PointCloud& normalized, const std::vector<Mat3>& transforms,
                       double dedup_tol = kCloudDedupTol);

// Sign-ambiguity space: the eight variants P * g_s.
PoseSpace sym_space(const PointCloud& normalized);

// Signs x rotation group.
PoseSpace rot_space(const PointCloud& normalized, const RotationSet& group);

struct PoseMatch {
  std::size_t pose = 0;
  std::size_t matched = 0;
  double residual = 0.0;
};

// Greedy nearest matching of every pose in `a` to a distinct pose in `b`, in
// order of `a`. The residual is the cloud distance to the match; unmatched
// poses (|a| > |b|) get an infinite residual.
std::vector<PoseMatch> match_pose_spaces(const PoseSpace& a, const PoseSpace& b);

// Max residual of match_pose_spaces, infinite when the sizes differ.
double pose_space_residual(const PoseSpace& a, const PoseSpace& b);

}  // namespace prinv
