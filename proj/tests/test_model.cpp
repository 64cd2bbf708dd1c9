#include "doctest.h"
#include "support.hpp"

#include <algorithm>
#include <numeric>

#include "prinv/error.hpp"
#include "prinv/model.hpp"
#include "prinv/optim.hpp"

using namespace prinv;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_classes = 4;
  c.init_width = 8;
  c.stages = {16, 32};
  c.heads = 16;
  c.selector_hidden = 16;
  c.head_widths = {32};
  return c;
}

ModelConfig uniform_config() {
  ModelConfig c = small_config();
  c.init_width = 12;
  c.stages = {12, 12, 12};
  c.rotation_group = RotationGroup::kA4;
  return c;
}

std::size_t learnable(const Model& m, const std::string& prefix = "") {
  return m.params().learnable_count(prefix);
}

}  // namespace

TEST_CASE("classification logits are rotation invariant") {
  Model model(small_config());
  Rng rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    PointCloud cloud = test::blob(rng, 128);
    const Mat3 r = test::haar_rotation(rng);
    Tensor a = model.forward({cloud});
    Tensor b = model.forward({transform(cloud, r)});
    CHECK(a.dim(1) == 4);
    CHECK(test::max_abs_diff(a.data(), b.data()) < 1e-4);
  }
}

TEST_CASE("logits do not depend on translation, scale or batch company") {
  Model model(small_config());
  Rng rng(4);
  const PointCloud a = test::blob(rng, 96), b = test::blob(rng, 96);
  PointCloud moved = a;
  for (auto& p : moved.points) p = 3.0 * p + Vec3{1.0, -4.0, 2.0};
  const Tensor la = model.forward({a});
  CHECK(test::max_abs_diff(la.data(), model.forward({moved}).data()) < 1e-4);
  const Tensor pair = model.forward({b, a});
  CHECK(test::max_abs_diff(la.data(), pair.data().subspan(4, 4)) < 1e-6);
}

TEST_CASE("segmentation is permutation equivariant and rotation invariant") {
  ModelConfig c = ModelConfig::defaults_for(Task::kSegment);
  c.num_classes = 5;
  c.init_width = 8;
  c.stages = {8, 16};
  c.heads = 8;
  c.selector_hidden = 8;
  c.head_widths = {16};
  c.rotation_group = RotationGroup::kA4;
  Model model(c);
  CHECK(model.level_count() == 1);
  Rng rng(5);
  const PointCloud cloud = test::blob(rng, 80);
  std::vector<std::size_t> perm(cloud.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  const PointCloud shuffled = subset(cloud, perm);
  const Tensor a = model.forward({cloud});
  const Tensor b = model.forward({shuffled});
  const Tensor r = model.forward({transform(cloud, test::haar_rotation(rng))});
  REQUIRE(a.dim(0) == 80);
  REQUIRE(a.dim(1) == 5);
  double perm_err = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      perm_err = std::max(perm_err, std::abs(double(b.at(i, j)) - a.at(perm[i], j)));
    }
  }
  CHECK(perm_err < 1e-5);
  CHECK(test::max_abs_diff(a.data(), r.data()) < 1e-4);
}

TEST_CASE("segmentation defaults double the widths") {
  const ModelConfig cls = ModelConfig::defaults_for(Task::kClassify);
  const ModelConfig seg = ModelConfig::defaults_for(Task::kSegment);
  CHECK(seg.num_classes == 50);
  CHECK(seg.init_width == 2 * cls.init_width);
  for (std::size_t s = 0; s < cls.stages.size(); ++s) CHECK(seg.stages[s] == 2 * cls.stages[s]);
  CHECK_FALSE(seg.coarsen);
}

TEST_CASE("a cloud of identical points gives finite logits") {
  Model model(small_config());
  PointCloud same;
  same.points.assign(64, Vec3{0.3, -0.2, 0.5});
  const Tensor out = model.forward({same});
  for (float v : out.data()) CHECK(std::isfinite(v));
}

TEST_CASE("point hierarchy halves by farthest-point sampling") {
  ModelConfig c = small_config();
  c.stages = {8, 8, 8};
  Rng rng(6);
  const PointCloud cloud = test::blob(rng, 100);
  const ShapeGeometry g = prepare_geometry(cloud, c);
  REQUIRE(g.levels.size() == 3);
  CHECK(g.levels[0].coords.size() == 100);
  CHECK(g.levels[1].coords.size() == 50);
  CHECK(g.levels[2].coords.size() == 25);
  CHECK(std::is_sorted(g.levels[1].from_previous.begin(), g.levels[1].from_previous.end()));
  std::vector<std::size_t> order = g.order;
  std::sort(order.begin(), order.end());
  for (std::size_t i = 0; i < order.size(); ++i) CHECK(order[i] == i);
  for (const auto& level : g.levels) {
    CHECK(level.geo.size() == level.coords.size() * 97);
    CHECK(level.neighbors.k == c.k_neighbors);
  }
  // Canonical rows ascend in squared PCA coordinates.
  const auto& n = g.levels[0].normalized;
  for (std::size_t r = 1; r < n.size(); ++r) {
    const Vec3 a{n[r - 1][0] * n[r - 1][0], n[r - 1][1] * n[r - 1][1], n[r - 1][2] * n[r - 1][2]};
    const Vec3 b{n[r][0] * n[r][0], n[r][1] * n[r][1], n[r][2] * n[r][2]};
    CHECK_FALSE(b < a);
  }
  c.coarsen = false;
  CHECK(prepare_geometry(cloud, c).levels.size() == 1);
  c.coarsen = true;
  c.k_neighbors = 40;
  CHECK_THROWS_AS(prepare_geometry(cloud, c), ParameterError);
}

TEST_CASE("aggregation width follows the selected blocks") {
  ModelConfig c = small_config();
  const std::pair<AggregateMode, std::size_t> modes[] = {
      {AggregateMode::kAll, 8 + 16 + 16 + 32 + 32},
      {AggregateMode::kPfeOnly, 16 + 32},
      {AggregateMode::kRfeOnly, 8 + 16 + 32},
      {AggregateMode::kLastRfe, 32}};
  Rng rng(7);
  const PointCloud cloud = test::blob(rng, 64);
  for (const auto& [mode, width] : modes) {
    c.aggregate = mode;
    Model m(c);
    CHECK(m.embedding_width() == width);
    CHECK(m.params().find("head.0.fc.weight")->tensor.dim(0) == width);
    ForwardTrace trace;
    ForwardOptions o;
    o.trace = &trace;
    m.forward({cloud}, o);
    CHECK(trace.embedding.dim(1) == width);
  }
  CHECK(parse_aggregate_mode("last_rfe") == AggregateMode::kLastRfe);
  CHECK(to_string(AggregateMode::kPfeOnly) == "pfe_only");
}

TEST_CASE("removing a block family removes exactly its parameters") {
  const ModelConfig full = uniform_config();
  const Model m(full);
  std::size_t pfe = 0, rfe = learnable(m, "init.rfe");
  for (int s = 1; s <= 3; ++s) {
    pfe += learnable(m, "stage" + std::to_string(s) + ".pfe");
    pfe += learnable(m, "stage" + std::to_string(s) + ".selector");
    rfe += learnable(m, "stage" + std::to_string(s) + ".rfe");
  }
  CHECK(pfe > 0);
  CHECK(rfe > 0);

  // Each dropped block also takes its rows of the first head layer.
  const std::size_t head_rows = full.head_widths.front();

  ModelConfig no_pfe = full;
  no_pfe.use_pfe = false;
  const Model a(no_pfe);
  CHECK(learnable(m) - learnable(a) == pfe + 3 * 12 * head_rows);

  ModelConfig no_rfe = full;
  no_rfe.use_rfe = false;
  const Model r(no_rfe);
  // Without the initial RFE the first PFE reads the 97-d geometric feature
  // instead of a 12-d one.
  const std::size_t stage1_gamma_rows = (97 - 12) * 12;
  CHECK(learnable(m) - learnable(r) == rfe + 4 * 12 * head_rows - stage1_gamma_rows);

  ModelConfig shared = full;
  shared.share_selector = true;
  const Model b(shared);
  CHECK(learnable(m) - learnable(b) == 2 * learnable(m, "stage1.selector"));
  CHECK(learnable(b, "selector") == learnable(m, "stage1.selector"));

  ModelConfig pooled = full;
  pooled.pose_mode = PoseMode::kMaxPool;
  const Model p(pooled);
  CHECK(learnable(m) - learnable(p) == 3 * learnable(m, "stage1.selector"));
  CHECK(learnable(p, "stage1.selector") == 0);
}

TEST_CASE("the selector head count sets the selector size") {
  ModelConfig c = uniform_config();
  std::vector<std::size_t> counts;
  for (std::size_t h : {1, 50, 200}) {
    c.heads = h;
    const Model m(c);
    counts.push_back(learnable(m, "stage1.selector"));
    CHECK(counts.back() == (3 * 16 + 16) + (16 * h + h));
  }
}

TEST_CASE("models are deterministic in their seed") {
  const Model a(small_config()), b(small_config());
  ModelConfig other = small_config();
  other.seed = 9;
  const Model c(other);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
    const auto& ta = a.params().entries()[i].tensor;
    CHECK(test::max_abs_diff(ta.data(), b.params().entries()[i].tensor.data()) == 0.0);
    if (test::max_abs_diff(ta.data(), c.params().entries()[i].tensor.data()) > 0.0) any_diff = true;
  }
  CHECK(any_diff);
  Rng rng(8);
  const PointCloud cloud = test::blob(rng, 64);
  CHECK(test::max_abs_diff(a.forward({cloud}).data(), b.forward({cloud}).data()) == 0.0);
}

TEST_CASE("checkpoints restore the exact model") {
  Model a(small_config());
  Rng rng(9);
  const PointCloud cloud = test::blob(rng, 64);
  // Move the batch-norm statistics away from their initial values.
  {
    Rng drop(1);
    ForwardOptions o;
    o.mode = Mode::kTrain;
    o.rng = &drop;
    a.forward({cloud, test::blob(rng, 64)}, o);
  }
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(a.to_checkpoint()));
  const Model b = Model::from_checkpoint(ck);
  CHECK(b.config().to_text() == a.config().to_text());
  CHECK(test::max_abs_diff(a.forward({cloud}).data(), b.forward({cloud}).data()) == 0.0);

  Checkpoint broken = a.to_checkpoint();
  broken.tensors.pop_back();
  Model c(small_config());
  CHECK_THROWS_AS(c.load_state(broken), IoError);
  broken = a.to_checkpoint();
  broken.tensors.front().second = Tensor::zeros({1});
  CHECK_THROWS_AS(c.load_state(broken), IoError);
}

TEST_CASE("training drives the loss down on a small fixed batch") {
  ModelConfig c = small_config();
  c.rotation_group = RotationGroup::kA4;
  c.dropout = 0.0;
  Model model(c);
  Rng rng(10);
  std::vector<PointCloud> batch;
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) {
    const double s = 0.3 + 0.1 * i;
    batch.push_back(test::blob(rng, 64, {1.0, s, s * 0.5}));
    labels.push_back(i % 4);
  }
  std::vector<ShapeGeometry> geom;
  for (const auto& p : batch) geom.push_back(prepare_geometry(p, c));
  std::vector<const ShapeGeometry*> ptrs;
  for (const auto& g : geom) ptrs.push_back(&g);

  AdamState adam;
  const auto params = model.params().learnable();
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 200; ++step) {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      ForwardOptions o;
      o.mode = Mode::kTrain;
      o.rng = &rng;
      loss = cross_entropy(model.forward_prepared(ptrs, o), labels);
    }
    if (step == 0) first = loss.item();
    last = loss.item();
    model.params().zero_grad();
    tape.backward(loss);
    adam_step(params, adam, 1e-3);
  }
  INFO("first " << first << " last " << last);
  CHECK(last < 0.5 * first);
}

TEST_CASE("model configuration text round trip and validation") {
  ModelConfig c = small_config();
  c.relations.use_cg = false;
  c.pose_mode = PoseMode::kAvgPool;
  c.rotation_group = RotationGroup::kS4;
  const ModelConfig back = ModelConfig::from_text(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.items().size() == c.items().size());
  for (const auto& [k, v] : c.items()) CHECK(is_model_key(k));
  CHECK_FALSE(is_model_key("epochs"));

  ModelConfig bad = small_config();
  CHECK_THROWS_AS(bad.set("no_such_key", "1"), ConfigError);
  CHECK_THROWS_AS(bad.set("heads", "many"), ConfigError);
  bad.k_neighbors = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_config();
  bad.use_rfe = false;
  bad.use_pfe = false;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_config();
  bad.use_pfe = false;
  bad.aggregate = AggregateMode::kPfeOnly;
  CHECK_THROWS_AS(Model{bad}, ConfigError);
}
