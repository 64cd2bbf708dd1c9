#pragma once

#include <cmath>

#include "prinv/geometry.hpp"
#include "prinv/linalg.hpp"
#include "prinv/rng.hpp"

namespace prinv::test {

// Uniform rotation from a normalized Gaussian quaternion.
inline Mat3 haar_rotation(Rng& rng) {
  double q[4];
  double n = 0.0;
  for (auto& v : q) {
    v = rng.normal();
    n += v * v;
  }
  n = std::sqrt(n);
  return quaternion_to_matrix(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
}

// Anisotropic Gaussian blob with well separated principal variances.
inline PointCloud blob(Rng& rng, std::size_t n, Vec3 sigma = {1.0, 0.6, 0.3}) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    c.points.push_back({sigma[0] * rng.normal(), sigma[1] * rng.normal(), sigma[2] * rng.normal()});
  }
  return c;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(double(a[i]) - b[i]));
  return a.size() == b.size() ? d : INFINITY;
}

}  // namespace prinv::test
