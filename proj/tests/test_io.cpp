#include "doctest.h"
#include "support.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "prinv/checkpoint.hpp"
#include "prinv/config.hpp"
#include "prinv/error.hpp"
#include "prinv/io.hpp"
#include "prinv/optim.hpp"

using namespace prinv;

namespace {

void put_le(std::vector<std::uint8_t>& b, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) b.push_back(std::uint8_t(v >> (8 * i)));
}

void put_str(std::vector<std::uint8_t>& b, const std::string& s) { b.insert(b.end(), s.begin(), s.end()); }

void put_f32(std::vector<std::uint8_t>& b, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_le(b, u, 4);
}

// Assembled field by field from the documented layout.
std::vector<std::uint8_t> handmade_checkpoint() {
  std::vector<std::uint8_t> b;
  put_str(b, "PRINV1");
  const std::string cfg = "heads = 8\n";
  put_le(b, cfg.size(), 4);
  put_str(b, cfg);
  put_le(b, 2, 4);
  put_le(b, 1, 2);
  put_str(b, "w");
  put_le(b, 1, 1);
  put_le(b, 2, 1);
  put_le(b, 2, 8);
  put_le(b, 3, 8);
  put_le(b, 0, 8);
  put_le(b, 24, 8);
  put_le(b, 2, 2);
  put_str(b, "bb");
  put_le(b, 1, 1);
  put_le(b, 1, 1);
  put_le(b, 1, 8);
  put_le(b, 24, 8);
  put_le(b, 4, 8);
  for (float f : {1.f, -2.f, 3.5f, 0.f, 1e-7f, -0.25f}) put_f32(b, f);
  put_f32(b, 42.f);
  return b;
}

}  // namespace

TEST_CASE("xyz reader") {
  std::istringstream plain("# header\n0 0 0\n1 2 3   # trailing\n\n-1.5 2e-3 4\n");
  const PointCloud c = read_xyz(plain);
  REQUIRE(c.size() == 3);
  CHECK(c.labels.empty());
  CHECK(c.points[1] == Vec3{1, 2, 3});
  CHECK(c.points[2][1] == doctest::Approx(2e-3));

  std::istringstream labelled("0 0 0 2\n1 1 1 0\n");
  const PointCloud l = read_xyz(labelled);
  CHECK(l.labels == std::vector<int>{2, 0});

  std::istringstream mixed("0 0 0 2\n1 1 1\n");
  CHECK_THROWS_AS(read_xyz(mixed), IoError);
  std::istringstream junk("0 0 zero\n");
  CHECK_THROWS_AS(read_xyz(junk), IoError);
  std::istringstream extra("0 0 0 1 5\n");
  CHECK_THROWS_AS(read_xyz(extra), IoError);
  CHECK_THROWS_AS(read_xyz(std::filesystem::path("/nonexistent/cloud.xyz")), IoError);
}

TEST_CASE("xyz round trip keeps full precision") {
  Rng rng(1);
  PointCloud c = test::blob(rng, 20);
  c.labels.assign(20, 3);
  std::stringstream s;
  write_xyz(s, c);
  const PointCloud back = read_xyz(s);
  REQUIRE(back.size() == 20);
  for (std::size_t i = 0; i < 20; ++i) CHECK(back.points[i] == c.points[i]);
  CHECK(back.labels == c.labels);
}

TEST_CASE("off reader fans polygons") {
  std::istringstream in(
      "OFF\n# square and a triangle\n5 2 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n0 0 1\n4 0 1 2 3\n3 0 1 4\n");
  const TriangleMesh m = read_off(in);
  CHECK(m.vertices.size() == 5);
  REQUIRE(m.triangles.size() == 3);
  CHECK(m.triangles[0] == std::array<std::size_t, 3>{0, 1, 2});
  CHECK(m.triangles[1] == std::array<std::size_t, 3>{0, 2, 3});
  CHECK(m.triangles[2] == std::array<std::size_t, 3>{0, 1, 4});

  std::istringstream bad_index("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n");
  CHECK_THROWS_AS(read_off(bad_index), IoError);
  std::istringstream bad_header("PLY\n");
  CHECK_THROWS_AS(read_off(bad_header), IoError);
  std::istringstream short_file("OFF\n3 1 0\n0 0 0\n");
  CHECK_THROWS_AS(read_off(short_file), IoError);
}

TEST_CASE("surface sampling is uniform over area") {
  // A unit square at z = 0 and a 3 x 1 rectangle at z = 1: three quarters of
  // the samples belong on the larger face.
  TriangleMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {3, 0, 1}, {3, 1, 1}, {0, 1, 1}};
  m.triangles = {{0, 1, 2}, {0, 2, 3}, {4, 5, 6}, {4, 6, 7}};
  Rng rng(2);
  const std::size_t n = 40000;
  const PointCloud c = sample_surface(m, n, rng);
  REQUIRE(c.size() == n);
  std::size_t upper = 0, left_half = 0, lower_diag = 0;
  for (const auto& p : c.points) {
    const bool on_face = p[2] == 0.0 || p[2] == 1.0;
    CHECK(on_face);
    CHECK(p[1] >= 0.0);
    CHECK(p[1] <= 1.0);
    if (p[2] == 1.0) {
      ++upper;
      if (p[0] < 1.5) ++left_half;
    } else if (p[1] < p[0]) {
      ++lower_diag;
    }
  }
  const double se = std::sqrt(0.25 * 0.75 / n);
  CHECK(std::abs(double(upper) / n - 0.75) < 4 * se);
  CHECK(std::abs(double(left_half) / upper - 0.5) < 4 * std::sqrt(0.25 / upper));
  CHECK(std::abs(double(lower_diag) / (n - upper) - 0.5) < 4 * std::sqrt(0.25 / (n - upper)));

  TriangleMesh flat;
  flat.vertices = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  flat.triangles = {{0, 1, 2}};
  CHECK_THROWS_AS(sample_surface(flat, 10, rng), IoError);
}

TEST_CASE("checkpoint decodes a byte-level layout") {
  const auto bytes = handmade_checkpoint();
  const Checkpoint c = decode_checkpoint(bytes);
  CHECK(c.config_text == "heads = 8\n");
  REQUIRE(c.tensors.size() == 2);
  CHECK(c.tensors[0].first == "w");
  CHECK(c.tensors[0].second.shape() == Shape{2, 3});
  CHECK(c.tensors[0].second.at(1, 0) == 0.f);
  CHECK(c.tensors[0].second.at(0, 2) == 3.5f);
  CHECK(c.tensors[1].first == "bb");
  CHECK(c.tensors[1].second.item() == 42.f);
  CHECK(encode_checkpoint(c) == bytes);
}

TEST_CASE("checkpoint files round trip") {
  Checkpoint c;
  c.config_text = "a = 1\n";
  c.tensors.emplace_back("x", Tensor({3}, {1.f, 2.f, 3.f}));
  c.tensors.emplace_back("s", Tensor::scalar(-1.f));
  const auto path = std::filesystem::temp_directory_path() / "prinv_test_roundtrip.prinv";
  write_checkpoint(path, c);
  const Checkpoint back = read_checkpoint(path);
  CHECK(encode_checkpoint(back) == encode_checkpoint(c));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_checkpoint(path), IoError);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto good = handmade_checkpoint();
  auto magic = good;
  magic[5] = '2';
  CHECK_THROWS_AS(decode_checkpoint(magic), IoError);
  for (std::size_t cut : {std::size_t(3), std::size_t(12), std::size_t(40), good.size() - 1}) {
    const std::vector<std::uint8_t> t(good.begin(), good.begin() + cut);
    CHECK_THROWS_AS(decode_checkpoint(t), IoError);
  }
  auto dtype = good;
  dtype[6 + 4 + 10 + 4 + 2 + 1] = 7;
  CHECK_THROWS_AS(decode_checkpoint(dtype), IoError);
  auto nbytes = good;
  nbytes[6 + 4 + 10 + 4 + 2 + 1 + 1 + 1 + 16 + 8] = 20;
  CHECK_THROWS_AS(decode_checkpoint(nbytes), IoError);
}

TEST_CASE("key value parsing") {
  const KeyValues kv = parse_key_values("# comment\n a = 1 \n\nb=x y # tail\nc =\n");
  REQUIRE(kv.size() == 3);
  CHECK(kv[0] == std::pair<std::string, std::string>{"a", "1"});
  CHECK(kv[1].second == "x y");
  CHECK(kv[2].second.empty());
  CHECK_THROWS_AS(parse_key_values("a = 1\njunk\n"), ConfigError);
  CHECK_THROWS_AS(parse_key_values("= 3\n"), ConfigError);
  CHECK(parse_assignment("lr=0.01").second == "0.01");
  CHECK_THROWS_AS(parse_assignment("lr"), ConfigError);
  CHECK(parse_key_values(format_key_values(kv)) == kv);
}

TEST_CASE("scalar parsing") {
  CHECK(parse_bool("k", "true"));
  CHECK_FALSE(parse_bool("k", "0"));
  CHECK_THROWS_AS(parse_bool("k", "maybe"), ConfigError);
  CHECK(parse_size("k", "12") == 12);
  CHECK_THROWS_AS(parse_size("k", "-1"), ConfigError);
  CHECK_THROWS_AS(parse_size("k", "3x"), ConfigError);
  CHECK(parse_double("k", "2.5e-3") == 2.5e-3);
  CHECK_THROWS_AS(parse_double("k", "fast"), ConfigError);
  CHECK(parse_size_list("k", "64, 128,256") == std::vector<std::size_t>{64, 128, 256});
  CHECK(parse_size_list("k", "none").empty());
  CHECK(format_size_list({1, 2}) == "1,2");
  for (double v : {0.1, 1e-30, 123456.789, 0.7}) CHECK(parse_double("k", format_double(v)) == v);
}

TEST_CASE("adam matches a hand-rolled reference") {
  Tensor p({3}, {0.5f, -1.f, 2.f}, true);
  const std::vector<std::vector<float>> grads = {{0.1f, -0.2f, 0.f}, {0.3f, 0.1f, -1.f}, {-0.2f, 0.f, 0.5f}};
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> ref = {0.5, -1.0, 2.0}, m(3, 0.0), v(3, 0.0);
  AdamState state;
  for (std::size_t t = 0; t < grads.size(); ++t) {
    adam_step({p}, {std::span<const float>(grads[t])}, state, lr);
    for (int i = 0; i < 3; ++i) {
      const double g = grads[t][i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mh = m[i] / (1 - std::pow(b1, t + 1)), vh = v[i] / (1 - std::pow(b2, t + 1));
      ref[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
    for (int i = 0; i < 3; ++i) CHECK(p.at(i) == doctest::Approx(ref[i]).epsilon(1e-6));
  }
  CHECK(state.step == 3);
  // The first step moves every coordinate with a non-zero gradient by about lr.
  Tensor q({2}, {0.f, 0.f}, true);
  AdamState fresh;
  const std::vector<float> g = {1e-4f, -50.f};
  adam_step({q}, {std::span<const float>(g)}, fresh, 0.01);
  CHECK(q.at(0) == doctest::Approx(-0.01).epsilon(1e-3));
  CHECK(q.at(1) == doctest::Approx(0.01).epsilon(1e-3));
}

TEST_CASE("adam with accumulated gradients and missing ones") {
  Tensor a({2}, {1.f, 1.f}, true), b({1}, {3.f}, true);
  a.mutable_grad()[0] = 2.f;
  a.mutable_grad()[1] = -2.f;
  AdamState state;
  adam_step({a, b}, state, 0.1);
  CHECK(a.at(0) == doctest::Approx(0.9));
  CHECK(a.at(1) == doctest::Approx(1.1));
  CHECK(b.at(0) == 3.f);
}
