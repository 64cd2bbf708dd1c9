#include "doctest.h"
#include "gradcheck.hpp"
#include "support.hpp"

#include <algorithm>

#include "prinv/blocks.hpp"
#include "prinv/error.hpp"

using namespace prinv;
using test::random_tensor;

namespace {

// Dense MLP oracle in double: FC -> eval-mode BN -> ReLU per layer.
std::vector<double> mlp_row(const PfeParams& p, std::vector<double> x) {
  for (const auto& layer : p.gamma) {
    const std::size_t in = layer.fc.in(), out = layer.fc.out();
    std::vector<double> y(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = layer.fc.bias.at(o);
      for (std::size_t i = 0; i < in; ++i) s += x[i] * layer.fc.weight.at(i, o);
      const double mu = layer.bn.state.running_mean.at(o);
      const double var = layer.bn.state.running_var.at(o);
      s = (s - mu) / std::sqrt(var + layer.bn.state.eps) * layer.bn.gamma.at(o) + layer.bn.beta.at(o);
      y[o] = std::max(0.0, s);
    }
    x = std::move(y);
  }
  return x;
}

void randomize(PfeParams& p, Rng& rng) {
  for (auto& layer : p.gamma) {
    for (auto& v : layer.fc.bias.mutable_data()) v = float(0.2 * rng.normal());
    for (auto& v : layer.bn.gamma.mutable_data()) v = float(1.0 + 0.3 * rng.normal());
    for (auto& v : layer.bn.beta.mutable_data()) v = float(0.3 * rng.normal());
  }
}

struct PfeFixture {
  std::size_t n = 10, k = 3, geo_w = 4, d = 3;
  ParamStore store;
  PfeParams params;
  Tensor geo, feats, coords;
  std::vector<std::size_t> rows;
  PfeContext ctx;

  PfeFixture(Rng& rng, std::size_t k_) : k(k_) {
    params = make_pfe(store, "pfe", geo_w, d, {6, 5}, rng);
    randomize(params, rng);
    geo = random_tensor(rng, {n, geo_w}, 1.0, false);
    feats = random_tensor(rng, {n, d}, 1.0, false);
    coords = random_tensor(rng, {n, 3}, 1.0, false);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < k; ++t) rows.push_back((i + 3 * t) % n);
    }
    ctx.shapes = 1;
    ctx.points = n;
    ctx.k = k;
    ctx.geo = &geo;
    ctx.neighbor_rows = rows;
  }

  std::vector<double> input_row(std::size_t i) const {
    std::vector<double> x;
    for (std::size_t c = 0; c < geo_w; ++c) x.push_back(geo.at(i, c));
    for (std::size_t c = 0; c < d; ++c) x.push_back(feats.at(i, c));
    for (std::size_t c = 0; c < 3; ++c) x.push_back(coords.at(i, c));
    return x;
  }
};

}  // namespace

TEST_CASE("gamma with one neighbor reduces to a point MLP") {
  Rng rng(1);
  PfeFixture fx(rng, 1);
  const Tensor out = pfe_extract(fx.params, fx.ctx, fx.feats, fx.coords, Mode::kEval);
  REQUIRE(out.dim(0) == fx.n);
  REQUIRE(out.dim(1) == 5);
  for (std::size_t i = 0; i < fx.n; ++i) {
    const auto ref = mlp_row(fx.params, fx.input_row(i));
    for (std::size_t c = 0; c < 5; ++c) CHECK(out.at(i, c) == doctest::Approx(ref[c]).epsilon(1e-5));
  }
}

TEST_CASE("gamma max-pools the point MLP over each neighborhood") {
  Rng rng(2);
  PfeFixture fx(rng, 4);
  const Tensor out = pfe_extract(fx.params, fx.ctx, fx.feats, fx.coords, Mode::kEval);
  for (std::size_t i = 0; i < fx.n; ++i) {
    std::vector<double> best(5, -INFINITY);
    for (std::size_t t = 0; t < fx.k; ++t) {
      const auto r = mlp_row(fx.params, fx.input_row(fx.rows[i * fx.k + t]));
      for (std::size_t c = 0; c < 5; ++c) best[c] = std::max(best[c], r[c]);
    }
    for (std::size_t c = 0; c < 5; ++c) CHECK(out.at(i, c) == doctest::Approx(best[c]).epsilon(1e-5));
  }
}

TEST_CASE("gamma without geometric features reads only features and coordinates") {
  Rng rng(3);
  ParamStore store;
  PfeParams p = make_pfe(store, "pfe", 0, 2, {4}, rng);
  CHECK_FALSE(p.use_geo);
  CHECK(p.gamma.front().fc.in() == 5);
}

namespace {

struct RfeSetup {
  std::size_t n = 8, k = 3, d = 4, out = 5, geo_w = 6;
  ParamStore store;
  RfeParams params;
  std::vector<Vec3> coords;
  Tensor geo, feats;
  std::vector<std::size_t> rows;

  RfeSetup(Rng& rng, RfeSwitches sw = {}) {
    params = make_rfe(store, "rfe", k, d, out, 7, geo_w, sw, rng);
    for (std::size_t i = 0; i < n; ++i) coords.push_back({rng.normal(), rng.normal(), rng.normal()});
    geo = random_tensor(rng, {n, geo_w}, 1.0, false);
    feats = random_tensor(rng, {n, d}, 1.0, false);
    for (std::size_t i = 0; i < n; ++i) {
      rows.push_back(i);
      rows.push_back((i + 1) % n);
      rows.push_back((i + 5) % n);
    }
  }
};

std::vector<double> l2_rows(std::vector<double> v, std::size_t k) {
  for (std::size_t r = 0; r < v.size() / k; ++r) {
    double s = 0.0;
    for (std::size_t b = 0; b < k; ++b) s += v[r * k + b] * v[r * k + b];
    s = std::sqrt(s);
    for (std::size_t b = 0; b < k; ++b) v[r * k + b] = s < 1e-12 ? 0.0 : v[r * k + b] / s;
  }
  return v;
}

}  // namespace

TEST_CASE("relation terms match brute-force inner products") {
  Rng rng(4);
  RfeSetup s(rng);
  const RfeRelations r = rfe_relations(s.coords, s.geo, s.feats, s.rows, s.k, {});
  std::vector<double> cp, cg, cf;
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t a = 0; a < s.k; ++a) {
      for (std::size_t b = 0; b < s.k; ++b) {
        const std::size_t na = s.rows[i * s.k + a], nb = s.rows[i * s.k + b];
        cp.push_back(dot(s.coords[na] - s.coords[i], s.coords[nb] - s.coords[i]));
        double g = 0.0, f = 0.0;
        for (std::size_t c = 0; c < s.geo_w; ++c) g += double(s.geo.at(na, c)) * s.geo.at(nb, c);
        for (std::size_t c = 0; c < s.d; ++c) f += double(s.feats.at(na, c)) * s.feats.at(nb, c);
        cg.push_back(g);
        cf.push_back(f);
      }
    }
  }
  cp = l2_rows(cp, s.k);
  cg = l2_rows(cg, s.k);
  cf = l2_rows(cf, s.k);
  REQUIRE(r.cp.numel() == cp.size());
  for (std::size_t t = 0; t < cp.size(); ++t) {
    CHECK(r.cp.at(t) == doctest::Approx(cp[t]).epsilon(1e-5));
    CHECK(r.cg.at(t) == doctest::Approx(cg[t]).epsilon(1e-5));
    CHECK(r.cf.at(t) == doctest::Approx(cf[t]).epsilon(1e-5));
  }
  CHECK(r.correlations.dim(1) == 3 * s.k);
  // The centered term of the center point itself is zero.
  for (std::size_t i = 0; i < s.n; ++i) CHECK(r.cp.at(i * s.k * s.k) == 0.0f);
}

TEST_CASE("relational convolution contracts neighbors, channels and theta") {
  Rng rng(5);
  RfeSetup s(rng);
  for (auto& v : s.params.phi_out.weight.mutable_data()) v = float(0.4 * rng.normal());
  const RfeRelations r = rfe_relations(s.coords, s.geo, s.feats, s.rows, s.k, {});
  const Tensor phi = rfe_phi(s.params, r, s.geo);
  const Tensor out = rfe_forward(s.params, r, s.geo, s.feats);
  REQUIRE(out.dim(0) == s.n);
  REQUIRE(out.dim(1) == s.out);
  const auto th = s.params.theta.data();
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t l = 0; l < s.out; ++l) {
      double acc = 0.0;
      for (std::size_t t = 0; t < s.k; ++t) {
        const std::size_t nb = s.rows[i * s.k + t];
        for (std::size_t j = 0; j < s.d; ++j) {
          acc += double(s.feats.at(nb, j)) * phi.at(i * s.k + t, j) * th[(t * s.d + j) * s.out + l];
        }
      }
      CHECK(out.at(i, l) == doctest::Approx(acc).epsilon(1e-5));
    }
  }
}

TEST_CASE("a delta kernel returns the center features") {
  Rng rng(6);
  RfeSetup s(rng);
  ParamStore store;
  RfeParams p = make_rfe(store, "delta", s.k, s.d, s.d, 7, s.geo_w, {}, rng);
  std::fill(p.phi_out.weight.mutable_data().begin(), p.phi_out.weight.mutable_data().end(), 0.0f);
  std::fill(p.phi_out.bias.mutable_data().begin(), p.phi_out.bias.mutable_data().end(), 1.0f);
  auto th = p.theta.mutable_data();
  std::fill(th.begin(), th.end(), 0.0f);
  for (std::size_t j = 0; j < s.d; ++j) th[j * s.d + j] = 1.0f;  // theta[0] = I
  const RfeRelations r = rfe_relations(s.coords, s.geo, s.feats, s.rows, s.k, {});
  const Tensor out = rfe_forward(p, r, s.geo, s.feats);
  CHECK(test::max_abs_diff(out.data(), s.feats.data()) < 1e-6);
}

TEST_CASE("phi starts near one so the convolution starts near theta") {
  Rng rng(7);
  RfeSetup s(rng);
  const RfeRelations r = rfe_relations(s.coords, s.geo, s.feats, s.rows, s.k, {});
  const Tensor phi = rfe_phi(s.params, r, s.geo);
  for (float v : phi.data()) CHECK(std::abs(v - 1.0f) < 0.2f);
}

TEST_CASE("relation switches shape the weight network") {
  Rng rng(8);
  RfeSwitches none{false, false, false, false};
  RfeSetup s(rng, none);
  CHECK_FALSE(s.params.rel_weight.defined());
  CHECK_FALSE(s.params.geo_weight.defined());
  const RfeRelations r = rfe_relations(s.coords, s.geo, s.feats, s.rows, s.k, none);
  CHECK_FALSE(r.correlations.defined());
  CHECK(rfe_forward(s.params, r, s.geo, s.feats).dim(1) == s.out);

  RfeSwitches only_cf{false, false, true, false};
  RfeSetup t(rng, only_cf);
  CHECK(t.params.rel_weight.dim(0) == t.k);

  ParamStore store;
  RfeParams nogeo = make_rfe(store, "x", 3, 4, 4, 5, 0, RfeSwitches{}, rng);
  CHECK_FALSE(nogeo.switches.use_cg);
  CHECK_FALSE(nogeo.switches.use_gk);
  CHECK(nogeo.rel_weight.dim(0) == 2 * 3);
}

TEST_CASE("relational block rejects mismatched neighbor tables") {
  Rng rng(9);
  RfeSetup s(rng);
  std::vector<std::size_t> bad(s.rows.begin(), s.rows.end() - 1);
  CHECK_THROWS_AS(rfe_relations(s.coords, s.geo, s.feats, bad, s.k, {}), DimensionError);
  bad = s.rows;
  bad[4] = s.n;
  CHECK_THROWS_AS(rfe_relations(s.coords, s.geo, s.feats, bad, s.k, {}), DimensionError);
}

namespace {

struct PoseFixture {
  PfeFixture base;
  std::vector<Vec3> normalized, raw;
  std::vector<Mat3> transforms;

  explicit PoseFixture(Rng& rng) : base(rng, 3) {
    const PointCloud c = test::blob(rng, base.n);
    const PcaResult p = pca_normalize(c);
    normalized = p.normalized.points;
    raw = c.points;
    transforms = pose_transforms(build_rotation_set(RotationGroup::kA4));
    base.params.selector = make_pose_selector(base.store, "sel", 8, 5, rng);
    base.ctx.normalized = {&normalized};
    base.ctx.raw = {&raw};
    base.ctx.transforms = &transforms;
  }
};

}  // namespace

TEST_CASE("selection runs the extractor once, pooling once per pose") {
  Rng rng(10);
  PoseFixture fx(rng);
  auto& p = fx.base.params;
  for (PoseMode mode : {PoseMode::kSelect, PoseMode::kMaxPool, PoseMode::kAvgPool}) {
    BlockStats stats;
    PfeOptions o;
    o.pose_mode = mode;
    o.stats = &stats;
    const Tensor out = pfe_forward(p, fx.base.ctx, fx.base.feats, o);
    CHECK(out.dim(0) == fx.base.n);
    CHECK(stats.extractor_calls == (mode == PoseMode::kSelect ? 1 : fx.transforms.size()));
    if (mode == PoseMode::kSelect) CHECK(stats.selector_poses == fx.transforms.size());
  }
}

TEST_CASE("selection feeds the highest-scoring pose to gamma") {
  Rng rng(11);
  PoseFixture fx(rng);
  std::vector<PfeShapeTrace> trace;
  PfeOptions o;
  o.trace = &trace;
  const Tensor out = pfe_forward(fx.base.params, fx.base.ctx, fx.base.feats, o);
  REQUIRE(trace.size() == 1);
  const auto& t = trace.front();
  for (const auto& s : t.scores) CHECK(s.best <= t.scores[t.selected].best);
  const PoseSelection sel = select_pose(*fx.base.params.selector, t.space);
  CHECK(sel.index == t.selected);
  Tensor coords = points_tensor(t.selected_points);
  const Tensor direct = pfe_extract(fx.base.params, fx.base.ctx, fx.base.feats, coords, Mode::kEval);
  CHECK(test::max_abs_diff(out.data(), direct.data()) == 0.0);
}

TEST_CASE("pooling over poses does not depend on the transform order") {
  Rng rng(12);
  PoseFixture fx(rng);
  PfeOptions o;
  o.pose_mode = PoseMode::kMaxPool;
  const Tensor a = pfe_forward(fx.base.params, fx.base.ctx, fx.base.feats, o);
  rng.shuffle(fx.transforms);
  const Tensor b = pfe_forward(fx.base.params, fx.base.ctx, fx.base.feats, o);
  CHECK(test::max_abs_diff(a.data(), b.data()) == 0.0);
}

TEST_CASE("straight-through selection leaves forward values unchanged") {
  Rng rng(13);
  PoseFixture fx(rng);
  PfeOptions o;
  o.mode = Mode::kEval;
  const Tensor untaped = pfe_forward(fx.base.params, fx.base.ctx, fx.base.feats, o);
  Tape tape;
  Tensor taped, loss;
  {
    TapeScope s(tape);
    taped = pfe_forward(fx.base.params, fx.base.ctx, fx.base.feats, o);
    loss = sum(taped);
  }
  CHECK(test::max_abs_diff(untaped.data(), taped.data()) == 0.0);
  tape.backward(loss);
  CHECK(fx.base.params.selector->head_fc.weight.has_grad());
}

TEST_CASE("pose mode names") {
  CHECK(parse_pose_mode("select") == PoseMode::kSelect);
  CHECK(parse_pose_mode("max") == PoseMode::kMaxPool);
  CHECK(parse_pose_mode("avg") == PoseMode::kAvgPool);
  CHECK(to_string(PoseMode::kAvgPool) == "avg");
  CHECK_THROWS(parse_pose_mode("median"));
}
