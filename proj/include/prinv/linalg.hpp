#pragma once

#include <array>
#include <cmath>

namespace prinv {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double distance(const Vec3& a, const Vec3& b) { return norm(a - b); }
inline double distance2(const Vec3& a, const Vec3& b) {
  const Vec3 d = a - b;
  return dot(d, d);
}
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

// Row-major 3x3 matrix. Points are row vectors, so a cloud transforms as P * M.
struct Mat3 {
  std::array<double, 9> m{};

  static Mat3 identity() { return diag(1.0, 1.0, 1.0); }
  static Mat3 diag(double x, double y, double z) {
    Mat3 r;
    r.m = {x, 0, 0, 0, y, 0, 0, 0, z};
    return r;
  }

  double& operator()(int r, int c) { return m[3 * r + c]; }
  double operator()(int r, int c) const { return m[3 * r + c]; }
};

inline Mat3 operator*(const Mat3& a, const Mat3& b) {
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      r(i, j) = s;
    }
  }
  return r;
}

// Row vector times matrix.
inline Vec3 operator*(const Vec3& v, const Mat3& a) {
  return {v[0] * a(0, 0) + v[1] * a(1, 0) + v[2] * a(2, 0),
          v[0] * a(0, 1) + v[1] * a(1, 1) + v[2] * a(2, 1),
          v[0] * a(0, 2) + v[1] * a(1, 2) + v[2] * a(2, 2)};
}

Mat3 transpose(const Mat3& a);
double determinant(const Mat3& a);
// max |a_ij - b_ij|
double max_abs_diff(const Mat3& a, const Mat3& b);
// Lexicographic order of row-major entries.
bool lex_less(const Mat3& a, const Mat3& b);

// Right-handed rotation by `angle` about unit `axis`, in the row-vector
// convention: p' = p * rotation_about(axis, angle).
Mat3 rotation_about(const Vec3& axis, double angle);

// Rotation matrix of a unit quaternion (w, x, y, z), row-vector convention.
Mat3 quaternion_to_matrix(double w, double x, double y, double z);

struct SymmetricEigen {
  Vec3 values;   // descending
  Mat3 vectors;  // column j is the unit eigenvector of values[j]
};

// Cyclic Jacobi eigen-decomposition of a symmetric matrix, double precision.
SymmetricEigen symmetric_eigen(const Mat3& a);

}  // namespace prinv
