#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "prinv/linalg.hpp"

namespace prinv {

// N x 3 coordinates with optional per-point labels and a shape class.
// Coordinates are held in double so that discrete choices downstream (neighbor
// order, farthest-point picks, pose ranking) do not flip under rotation noise.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<int> labels;  // empty, or one per point
  int label = -1;           // shape class, -1 if unknown

  std::size_t size() const { return points.size(); }
};

Vec3 centroid(const PointCloud& cloud);

// Applies p -> p * m to every point; labels are carried over.
PointCloud transform(const PointCloud& cloud, const Mat3& m);

// Rows `indices` of the cloud, in that order.
PointCloud subset(const PointCloud& cloud, std::span<const std::size_t> indices);

// Subtracts the centroid and divides by the largest norm. A cloud whose
// points all coincide (max norm below 1e-12) is only translated.
PointCloud center_and_scale(const PointCloud& cloud);

// K nearest points of every point, row-major [N x k]. Row i starts with i
// itself, followed by the others ordered by (distance, index).
struct NeighborIndex {
  std::size_t k = 0;
  std::vector<std::size_t> indices;

  std::size_t rows() const { return k == 0 ? 0 : indices.size() / k; }
  std::span<const std::size_t> row(std::size_t i) const {
    return std::span<const std::size_t>(indices).subspan(i * k, k);
  }
};

// Exact brute-force kNN. Throws ParameterError when k > N or k == 0.
NeighborIndex knn(const PointCloud& cloud, std::size_t k);

// The first k columns of a wider neighbor table.
NeighborIndex neighbor_prefix(const NeighborIndex& wide, std::size_t k);

// Greedy farthest-point sampling from `seed_index`; each pick maximizes the
// distance to the chosen set, ties to the smaller index. Returns picks in
// selection order. Throws ParameterError unless 1 <= m <= N.
std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t m, std::size_t seed_index = 0);

inline constexpr std::size_t kGeoSamples = 8;
inline constexpr std::size_t kGeoQuad = 4;

struct GeoFeatureConfig {
  std::vector<std::size_t> scales{8, 16, 32};
  std::size_t samples_per_scale = kGeoSamples;
};

std::size_t geo_feature_width(const GeoFeatureConfig& config = {});

// Per-point rotation-invariant distance/angle descriptor, row-major
// [N x geo_feature_width]. Layout per point o with cloud centroid c:
//   |co|, then for each scale, for each of the sampled neighbors q:
//   |cq|, |oq|, cos(angle qco), cos(angle coq)
// Samples sit at positions floor(j * k / samples) of the distance-sorted
// neighborhood (position 0 is o). Neighborhoods larger than the cloud repeat
// the sorted list cyclically. A cosine with a vector shorter than 1e-12 is 0.
// `neighbors`, when given, must hold at least max(scales) columns.
std::vector<double> geo_features(const PointCloud& cloud, const GeoFeatureConfig& config = {},
                                 const NeighborIndex* neighbors = nullptr);

// Cosine of the angle between u and v, 0 if either is shorter than 1e-12.
double safe_cosine(const Vec3& u, const Vec3& v);

}  // namespace prinv
