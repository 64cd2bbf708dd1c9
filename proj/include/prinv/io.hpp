#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <istream>
#include <vector>

#include "prinv/geometry.hpp"
#include "prinv/rng.hpp"

namespace prinv {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::size_t, 3>> triangles;
};

// Whitespace-separated "x y z [label]" lines; '#' starts a comment. Either
// every point carries a label or none does.
PointCloud read_xyz(std::istream& in);
PointCloud read_xyz(const std::filesystem::path& path);

// OFF / COFF mesh. Polygons with more than three vertices are fanned.
TriangleMesh read_off(std::istream& in);
TriangleMesh read_off(const std::filesystem::path& path);

// Area-weighted uniform surface sampling.
PointCloud sample_surface(const TriangleMesh& mesh, std::size_t count, Rng& rng);

inline constexpr std::size_t kDefaultPointCount = 1024;

// Reads .xyz directly or samples .off meshes to `off_points` points.
PointCloud load_cloud(const std::filesystem::path& path, std::size_t off_points, Rng& rng);

void write_xyz(std::ostream& out, const PointCloud& cloud);

}  // namespace prinv
