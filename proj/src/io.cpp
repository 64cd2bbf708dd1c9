#include "prinv/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "prinv/error.hpp"

namespace prinv {

namespace {

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

// Next non-empty line with comments stripped; false at end of stream.
bool next_content_line(std::istream& in, std::string& line) {
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") != std::string::npos) return true;
  }
  return false;
}

}  // namespace

PointCloud read_xyz(std::istream& in) {
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  bool labelled = false;
  while (next_content_line(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p[0] >> p[1] >> p[2])) {
      throw IoError("xyz: malformed point on content line " + std::to_string(lineno));
    }
    double label;
    const bool has_label = static_cast<bool>(ls >> label);
    if (cloud.points.empty()) labelled = has_label;
    if (has_label != labelled) {
      throw IoError("xyz: inconsistent label column on content line " + std::to_string(lineno));
    }
    std::string rest;
    if (has_label && (label != std::floor(label) || ls >> rest)) {
      throw IoError("xyz: expected x y z [label] on content line " + std::to_string(lineno));
    }
    for (double v : p) {
      if (!std::isfinite(v)) throw IoError("xyz: non-finite coordinate on line " + std::to_string(lineno));
    }
    cloud.points.push_back(p);
    if (has_label) cloud.labels.push_back(static_cast<int>(label));
  }
  if (cloud.points.empty()) throw IoError("xyz: no points");
  return cloud;
}

PointCloud read_xyz(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_xyz(in);
}

TriangleMesh read_off(std::istream& in) {
  std::string line;
  if (!next_content_line(in, line)) throw IoError("off: empty file");
  std::istringstream header(line);
  std::string tag;
  header >> tag;
  if (tag.size() < 3 || tag.substr(tag.size() - 3) != "OFF") throw IoError("off: missing OFF header");
  std::size_t nv = 0, nf = 0, ne = 0;
  // Counts may follow the tag on the same line ("OFF 8 6 0").
  if (!(header >> nv >> nf)) {
    if (!next_content_line(in, line)) throw IoError("off: missing counts");
    std::istringstream counts(line);
    if (!(counts >> nv >> nf)) throw IoError("off: malformed counts");
    counts >> ne;
  }
  TriangleMesh mesh;
  mesh.vertices.reserve(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    if (!next_content_line(in, line)) throw IoError("off: truncated vertex list");
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p[0] >> p[1] >> p[2])) throw IoError("off: malformed vertex " + std::to_string(i));
    mesh.vertices.push_back(p);
  }
  for (std::size_t f = 0; f < nf; ++f) {
    if (!next_content_line(in, line)) throw IoError("off: truncated face list");
    std::istringstream ls(line);
    std::size_t count;
    if (!(ls >> count) || count < 3) throw IoError("off: malformed face " + std::to_string(f));
    std::vector<std::size_t> idx(count);
    for (auto& v : idx) {
      if (!(ls >> v) || v >= nv) throw IoError("off: bad vertex index in face " + std::to_string(f));
    }
    for (std::size_t t = 1; t + 1 < count; ++t) mesh.triangles.push_back({idx[0], idx[t], idx[t + 1]});
  }
  return mesh;
}

TriangleMesh read_off(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_off(in);
}

PointCloud sample_surface(const TriangleMesh& mesh, std::size_t count, Rng& rng) {
  std::vector<double> cumulative;
  cumulative.reserve(mesh.triangles.size());
  double total = 0.0;
  for (const auto& t : mesh.triangles) {
    const Vec3& a = mesh.vertices[t[0]];
    total += 0.5 * norm(cross(mesh.vertices[t[1]] - a, mesh.vertices[t[2]] - a));
    cumulative.push_back(total);
  }
  if (total <= 0.0) throw IoError("mesh has zero surface area");
  PointCloud cloud;
  cloud.points.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double r = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    const std::size_t tri = std::min<std::size_t>(it - cumulative.begin(), cumulative.size() - 1);
    const auto& t = mesh.triangles[tri];
    double u = rng.uniform(), v = rng.uniform();
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    const Vec3& a = mesh.vertices[t[0]];
    cloud.points.push_back(a + u * (mesh.vertices[t[1]] - a) + v * (mesh.vertices[t[2]] - a));
  }
  return cloud;
}

PointCloud load_cloud(const std::filesystem::path& path, std::size_t off_points, Rng& rng) {
  const auto ext = path.extension().string();
  if (ext == ".off" || ext == ".OFF") return sample_surface(read_off(path), off_points, rng);
  return read_xyz(path);
}

void write_xyz(std::ostream& out, const PointCloud& cloud) {
  out << std::setprecision(17);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    out << p[0] << ' ' << p[1] << ' ' << p[2];
    if (!cloud.labels.empty()) out << ' ' << cloud.labels[i];
    out << '\n';
  }
}

}  // namespace prinv
