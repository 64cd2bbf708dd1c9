#include "prinv/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <string>

#include "prinv/error.hpp"

namespace prinv {

Vec3 centroid(const PointCloud& cloud) {
  Vec3 c{0, 0, 0};
  if (cloud.points.empty()) return c;
  for (const auto& p : cloud.points) c = c + p;
  return (1.0 / double(cloud.size())) * c;
}

PointCloud transform(const PointCloud& cloud, const Mat3& m) {
  PointCloud out = cloud;
  for (auto& p : out.points) p = p * m;
  return out;
}

PointCloud subset(const PointCloud& cloud, std::span<const std::size_t> indices) {
  PointCloud out;
  out.label = cloud.label;
  out.points.reserve(indices.size());
  for (auto i : indices) out.points.push_back(cloud.points.at(i));
  if (!cloud.labels.empty()) {
    for (auto i : indices) out.labels.push_back(cloud.labels.at(i));
  }
  return out;
}

PointCloud center_and_scale(const PointCloud& cloud) {
  if (cloud.points.empty()) throw ParameterError("center_and_scale: empty cloud");
  PointCloud out = cloud;
  const Vec3 c = centroid(cloud);
  double max_norm = 0.0;
  for (auto& p : out.points) {
    p = p - c;
    max_norm = std::max(max_norm, norm(p));
  }
  if (max_norm < 1e-12) max_norm = 1.0;
  for (auto& p : out.points) p = (1.0 / max_norm) * p;
  return out;
}

NeighborIndex knn(const PointCloud& cloud, std::size_t k) {
  const std::size_t n = cloud.size();
  if (k == 0 || k > n) {
    throw ParameterError("knn: k=" + std::to_string(k) + " for a cloud of " + std::to_string(n) +
                         " points");
  }
  NeighborIndex out;
  out.k = k;
  out.indices.resize(n * k);
  std::vector<std::pair<double, std::size_t>> cand(n > 0 ? n - 1 : 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) cand[c++] = {distance2(cloud.points[i], cloud.points[j]), j};
    }
    // pair ordering is (distance, index), which is the tie rule.
    std::partial_sort(cand.begin(), cand.begin() + (k - 1), cand.end());
    out.indices[i * k] = i;
    for (std::size_t t = 0; t + 1 < k; ++t) out.indices[i * k + t + 1] = cand[t].second;
  }
  return out;
}

NeighborIndex neighbor_prefix(const NeighborIndex& wide, std::size_t k) {
  if (k > wide.k) {
    throw ParameterError("neighbor_prefix: k=" + std::to_string(k) + " exceeds table width " +
                         std::to_string(wide.k));
  }
  NeighborIndex out;
  out.k = k;
  const std::size_t n = wide.rows();
  out.indices.resize(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(&wide.indices[i * wide.k], k, &out.indices[i * k]);
  }
  return out;
}

std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t m, std::size_t seed_index) {
  const std::size_t n = cloud.size();
  if (m == 0 || m > n) {
    throw ParameterError("fps: m=" + std::to_string(m) + " for a cloud of " + std::to_string(n) +
                         " points");
  }
  if (seed_index >= n) throw ParameterError("fps: seed index out of range");
  std::vector<std::size_t> picked{seed_index};
  picked.reserve(m);
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(n, false);
  chosen[seed_index] = true;
  std::size_t last = seed_index;
  while (picked.size() < m) {
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (chosen[j]) continue;
      mind[j] = std::min(mind[j], distance2(cloud.points[j], cloud.points[last]));
      if (mind[j] > best_d) {
        best_d = mind[j];
        best = j;
      }
    }
    chosen[best] = true;
    picked.push_back(best);
    last = best;
  }
  return picked;
}

double safe_cosine(const Vec3& u, const Vec3& v) {
  const double nu = norm(u), nv = norm(v);
  if (nu < 1e-12 || nv < 1e-12) return 0.0;
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

std::size_t geo_feature_width(const GeoFeatureConfig& config) {
  return 1 + config.scales.size() * config.samples_per_scale * kGeoQuad;
}

std::vector<double> geo_features(const PointCloud& cloud, const GeoFeatureConfig& config,
                                 const NeighborIndex* neighbors) {
  const std::size_t n = cloud.size();
  if (n == 0) throw ParameterError("geo_features: empty cloud");
  if (config.scales.empty() || config.samples_per_scale == 0) {
    throw ParameterError("geo_features: need at least one scale and one sample");
  }
  const std::size_t max_scale = *std::max_element(config.scales.begin(), config.scales.end());
  const std::size_t table_k = std::min(max_scale, n);
  NeighborIndex owned;
  if (neighbors == nullptr || neighbors->k < table_k) {
    owned = knn(cloud, table_k);
    neighbors = &owned;
  }
  const std::size_t width = geo_feature_width(config);
  const std::size_t samples = config.samples_per_scale;
  std::vector<double> out(n * width);
  const Vec3 c = centroid(cloud);
  for (std::size_t o = 0; o < n; ++o) {
    const Vec3& po = cloud.points[o];
    const Vec3 co = po - c;
    const Vec3 oc = c - po;
    double* row = &out[o * width];
    row[0] = norm(co);
    std::size_t col = 1;
    const auto nbrs = neighbors->row(o);
    for (std::size_t k : config.scales) {
      for (std::size_t j = 0; j < samples; ++j) {
        const std::size_t pos = (j * k / samples) % table_k;
        const Vec3& pq = cloud.points[nbrs[pos]];
        const Vec3 cq = pq - c;
        const Vec3 oq = pq - po;
        row[col++] = norm(cq);
        row[col++] = norm(oq);
        row[col++] = safe_cosine(co, cq);
        row[col++] = safe_cosine(oc, oq);
      }
    }
  }
  return out;
}

}  // namespace prinv
