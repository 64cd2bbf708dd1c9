#include "prinv/model.hpp"

#include <algorithm>
#include <numeric>

#include "prinv/error.hpp"

namespace prinv {

Task parse_task(std::string_view name) {
  if (name == "classify" || name == "classification") return Task::kClassify;
  if (name == "segment" || name == "segmentation") return Task::kSegment;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected classify, segment)");
}

std::string to_string(Task task) { return task == Task::kClassify ? "classify" : "segment"; }

AggregateMode parse_aggregate_mode(std::string_view name) {
  if (name == "all") return AggregateMode::kAll;
  if (name == "pfe_only") return AggregateMode::kPfeOnly;
  if (name == "rfe_only") return AggregateMode::kRfeOnly;
  if (name == "last_rfe") return AggregateMode::kLastRfe;
  throw ConfigError("unknown aggregate mode '" + std::string(name) +
                    "' (expected all, pfe_only, rfe_only, last_rfe)");
}

std::string to_string(AggregateMode mode) {
  switch (mode) {
    case AggregateMode::kAll: return "all";
    case AggregateMode::kPfeOnly: return "pfe_only";
    case AggregateMode::kRfeOnly: return "rfe_only";
    case AggregateMode::kLastRfe: return "last_rfe";
  }
  return "?";
}

namespace {

const std::vector<std::string>& model_keys() {
  static const std::vector<std::string> keys{
      "task",          "num_classes",    "init_width",  "stages",         "gamma_depth",
      "phi_hidden",    "selector_hidden", "heads",      "k_neighbors",    "rotation_group",
      "aggregate_mode", "coarsen",       "use_geo",     "use_pfe",        "use_rfe",
      "use_cp",        "use_cg",         "use_cf",      "use_gk",         "pose_mode",
      "share_selector", "head",          "dropout",     "seed"};
  return keys;
}

}  // namespace

bool is_model_key(const std::string& key) {
  const auto& keys = model_keys();
  return std::find(keys.begin(), keys.end(), key) != keys.end();
}

void ModelConfig::set(const std::string& key, const std::string& v) {
  if (key == "task") task = parse_task(v);
  else if (key == "num_classes") num_classes = parse_size(key, v);
  else if (key == "init_width") init_width = parse_size(key, v);
  else if (key == "stages") stages = parse_size_list(key, v);
  else if (key == "gamma_depth") gamma_depth = parse_size(key, v);
  else if (key == "phi_hidden") phi_hidden = parse_size(key, v);
  else if (key == "selector_hidden") selector_hidden = parse_size(key, v);
  else if (key == "heads") heads = parse_size(key, v);
  else if (key == "k_neighbors") k_neighbors = parse_size(key, v);
  else if (key == "rotation_group") rotation_group = parse_rotation_group(v);
  else if (key == "aggregate_mode") aggregate = parse_aggregate_mode(v);
  else if (key == "coarsen") coarsen = parse_bool(key, v);
  else if (key == "use_geo") use_geo = parse_bool(key, v);
  else if (key == "use_pfe") use_pfe = parse_bool(key, v);
  else if (key == "use_rfe") use_rfe = parse_bool(key, v);
  else if (key == "use_cp") relations.use_cp = parse_bool(key, v);
  else if (key == "use_cg") relations.use_cg = parse_bool(key, v);
  else if (key == "use_cf") relations.use_cf = parse_bool(key, v);
  else if (key == "use_gk") relations.use_gk = parse_bool(key, v);
  else if (key == "pose_mode") pose_mode = parse_pose_mode(v);
  else if (key == "share_selector") share_selector = parse_bool(key, v);
  else if (key == "head") head_widths = parse_size_list(key, v);
  else if (key == "dropout") dropout = parse_double(key, v);
  else if (key == "seed") seed = parse_u64(key, v);
  else throw ConfigError("unknown model key '" + key + "'");
}

KeyValues ModelConfig::items() const {
  return {{"task", to_string(task)},
          {"num_classes", std::to_string(num_classes)},
          {"init_width", std::to_string(init_width)},
          {"stages", format_size_list(stages)},
          {"gamma_depth", std::to_string(gamma_depth)},
          {"phi_hidden", std::to_string(phi_hidden)},
          {"selector_hidden", std::to_string(selector_hidden)},
          {"heads", std::to_string(heads)},
          {"k_neighbors", std::to_string(k_neighbors)},
          {"rotation_group", to_string(rotation_group)},
          {"aggregate_mode", to_string(aggregate)},
          {"coarsen", format_bool(coarsen)},
          {"use_geo", format_bool(use_geo)},
          {"use_pfe", format_bool(use_pfe)},
          {"use_rfe", format_bool(use_rfe)},
          {"use_cp", format_bool(relations.use_cp)},
          {"use_cg", format_bool(relations.use_cg)},
          {"use_cf", format_bool(relations.use_cf)},
          {"use_gk", format_bool(relations.use_gk)},
          {"pose_mode", to_string(pose_mode)},
          {"share_selector", format_bool(share_selector)},
          {"head", format_size_list(head_widths)},
          {"dropout", format_double(dropout)},
          {"seed", std::to_string(seed)}};
}

std::string ModelConfig::to_text() const { return format_key_values(items()); }

ModelConfig ModelConfig::defaults_for(Task task) {
  ModelConfig c;
  c.task = task;
  if (task == Task::kSegment) {
    c.num_classes = 50;
    c.init_width *= 2;
    for (auto& w : c.stages) w *= 2;
    c.coarsen = false;
  }
  return c;
}

ModelConfig ModelConfig::from_items(const KeyValues& items) {
  Task task = Task::kClassify;
  for (const auto& [k, v] : items) {
    if (k == "task") task = parse_task(v);
  }
  ModelConfig c = defaults_for(task);
  for (const auto& [k, v] : items) c.set(k, v);
  return c;
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  return from_items(parse_key_values(text));
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(num_classes >= 1, "num_classes must be >= 1");
  need(init_width >= 1, "init_width must be >= 1");
  for (auto w : stages) need(w >= 1, "stage widths must be >= 1");
  need(gamma_depth >= 1, "gamma_depth must be >= 1");
  need(selector_hidden >= 1 && heads >= 1, "selector needs >= 1 hidden unit and head");
  need(k_neighbors >= 1, "k_neighbors must be >= 1");
  for (auto w : head_widths) need(w >= 1, "head widths must be >= 1");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  need(use_rfe || (use_pfe && !stages.empty()), "the network has no feature blocks");
  switch (aggregate) {
    case AggregateMode::kPfeOnly:
      need(use_pfe && !stages.empty(), "aggregate_mode=pfe_only needs PFE blocks");
      break;
    case AggregateMode::kRfeOnly:
    case AggregateMode::kLastRfe:
      need(use_rfe, "aggregate_mode=" + to_string(aggregate) + " needs RFE blocks");
      break;
    case AggregateMode::kAll: break;
  }
}

namespace {

bool coarsening(const ModelConfig& c) {
  return c.coarsen && c.task == Task::kClassify && c.stages.size() > 1;
}

std::size_t levels_for(const ModelConfig& c) { return coarsening(c) ? c.stages.size() : 1; }

std::size_t stage_level(const ModelConfig& c, std::size_t stage) {
  return coarsening(c) ? stage : 0;
}

void fill_level(LevelGeometry& level, const ModelConfig& config) {
  const std::size_t n = level.coords.size();
  if (n < config.k_neighbors) {
    throw ParameterError("cloud level of " + std::to_string(n) + " points is smaller than k=" +
                         std::to_string(config.k_neighbors));
  }
  const GeoFeatureConfig geo_cfg;
  const std::size_t max_scale = *std::max_element(geo_cfg.scales.begin(), geo_cfg.scales.end());
  const std::size_t table_k = std::max(config.k_neighbors, std::min(max_scale, n));
  PointCloud cloud;
  cloud.points = level.coords;
  const NeighborIndex table = knn(cloud, table_k);
  level.neighbors = neighbor_prefix(table, config.k_neighbors);
  if (config.use_geo) level.geo = geo_features(cloud, geo_cfg, &table);
}

}  // namespace

ShapeGeometry prepare_geometry(const PointCloud& cloud, const ModelConfig& config) {
  if (cloud.size() < std::max<std::size_t>(3, config.k_neighbors)) {
    throw ParameterError("cloud of " + std::to_string(cloud.size()) +
                         " points is too small for k=" + std::to_string(config.k_neighbors));
  }
  ShapeGeometry g;
  const PointCloud scaled = center_and_scale(cloud);
  g.pca = pca_normalize(scaled);
  const auto& hat = g.pca.normalized.points;
  const std::size_t n = scaled.size();
  g.order.resize(n);
  std::iota(g.order.begin(), g.order.end(), std::size_t{0});
  std::sort(g.order.begin(), g.order.end(), [&](std::size_t a, std::size_t b) {
    for (int c = 0; c < 3; ++c) {
      const double qa = hat[a][c] * hat[a][c], qb = hat[b][c] * hat[b][c];
      if (qa != qb) return qa < qb;
    }
    return a < b;
  });
  LevelGeometry base;
  base.coords.reserve(n);
  base.normalized.reserve(n);
  for (auto i : g.order) {
    base.coords.push_back(scaled.points[i]);
    base.normalized.push_back(hat[i]);
  }
  fill_level(base, config);
  g.levels.push_back(std::move(base));
  for (std::size_t l = 1; l < levels_for(config); ++l) {
    const LevelGeometry& prev = g.levels.back();
    PointCloud prev_cloud;
    prev_cloud.points = prev.coords;
    LevelGeometry next;
    next.from_previous = fps(prev_cloud, prev.coords.size() / 2, 0);
    std::sort(next.from_previous.begin(), next.from_previous.end());
    for (auto i : next.from_previous) {
      next.coords.push_back(prev.coords[i]);
      next.normalized.push_back(prev.normalized[i]);
    }
    fill_level(next, config);
    g.levels.push_back(std::move(next));
  }
  return g;
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  rotations_ = build_rotation_set(config_.rotation_group);
  transforms_ = prinv::pose_transforms(rotations_);
  Rng rng(config_.seed);
  const std::size_t geo_width = config_.use_geo ? geo_feature_width() : 0;
  const std::size_t k = config_.k_neighbors;
  auto phi_hidden = [&](std::size_t out) { return config_.phi_hidden ? config_.phi_hidden : out; };

  std::size_t width = config_.use_geo ? geo_width : 1;
  if (config_.use_rfe) {
    init_rfe_ = make_rfe(store_, "init.rfe", k, width, config_.init_width,
                         phi_hidden(config_.init_width), geo_width, config_.relations, rng);
    width = config_.init_width;
    blocks_.push_back({"init.rfe", false, width, 0});
  }
  std::optional<PoseSelectorParams> shared;
  const bool selecting = config_.pose_mode == PoseMode::kSelect;
  if (config_.use_pfe && selecting && config_.share_selector && !config_.stages.empty()) {
    shared = make_pose_selector(store_, "selector", config_.selector_hidden, config_.heads, rng);
  }
  for (std::size_t s = 0; s < config_.stages.size(); ++s) {
    const std::string prefix = "stage" + std::to_string(s + 1);
    const std::size_t w = config_.stages[s];
    const std::size_t level = stage_level(config_, s);
    Stage stage;
    if (config_.use_pfe) {
      stage.pfe = make_pfe(store_, prefix + ".pfe", geo_width, width,
                           std::vector<std::size_t>(config_.gamma_depth, w), rng);
      if (selecting) {
        stage.pfe->selector = shared ? *shared
                                     : make_pose_selector(store_, prefix + ".selector",
                                                          config_.selector_hidden, config_.heads,
                                                          rng);
      }
      width = w;
      blocks_.push_back({prefix + ".pfe", true, width, level});
    }
    if (config_.use_rfe) {
      stage.rfe = make_rfe(store_, prefix + ".rfe", k, width, w, phi_hidden(w), geo_width,
                           config_.relations, rng);
      width = w;
      blocks_.push_back({prefix + ".rfe", false, width, level});
    }
    stages_.push_back(std::move(stage));
  }
  std::size_t in = embedding_width();
  for (std::size_t h = 0; h < config_.head_widths.size(); ++h) {
    head_.push_back(make_dense_bn_relu(store_, "head." + std::to_string(h), in,
                                       config_.head_widths[h], rng));
    in = config_.head_widths[h];
  }
  classifier_ = make_linear(store_, "head.out", in, config_.num_classes, rng);
}

std::size_t Model::level_count() const { return levels_for(config_); }

std::vector<std::size_t> Model::aggregated_blocks() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    switch (config_.aggregate) {
      case AggregateMode::kAll: out.push_back(i); break;
      case AggregateMode::kPfeOnly:
        if (blocks_[i].is_pfe) out.push_back(i);
        break;
      case AggregateMode::kRfeOnly:
        if (!blocks_[i].is_pfe) out.push_back(i);
        break;
      case AggregateMode::kLastRfe:
        if (!blocks_[i].is_pfe) out.assign(1, i);
        break;
    }
  }
  return out;
}

std::size_t Model::embedding_width() const {
  std::size_t w = 0;
  for (auto i : aggregated_blocks()) w += blocks_[i].width;
  return config_.task == Task::kSegment ? 2 * w : w;
}

namespace {

// One hierarchy level for the whole batch.
struct LevelBatch {
  std::size_t points = 0;
  Tensor geo;
  std::vector<Vec3> coords;
  std::vector<std::size_t> neighbor_rows;
  std::vector<std::size_t> keep_rows;
  std::vector<const std::vector<Vec3>*> normalized;
  std::vector<const std::vector<Vec3>*> raw;
};

std::vector<LevelBatch> stack_levels(const std::vector<const ShapeGeometry*>& shapes,
                                     std::size_t level_count, std::size_t k, bool use_geo) {
  const std::size_t b_count = shapes.size();
  std::vector<LevelBatch> out(level_count);
  for (std::size_t l = 0; l < level_count; ++l) {
    LevelBatch& lb = out[l];
    lb.points = shapes[0]->levels.at(l).coords.size();
    const std::size_t prev_points = l > 0 ? out[l - 1].points : 0;
    std::vector<float> geo;
    for (std::size_t b = 0; b < b_count; ++b) {
      const LevelGeometry& lg = shapes[b]->levels.at(l);
      if (lg.coords.size() != lb.points) {
        throw DimensionError("batch shapes differ in point count at level " + std::to_string(l));
      }
      if (lg.neighbors.k != k) throw DimensionError("prepared geometry has a different k");
      const std::size_t base = b * lb.points;
      lb.coords.insert(lb.coords.end(), lg.coords.begin(), lg.coords.end());
      for (auto idx : lg.neighbors.indices) lb.neighbor_rows.push_back(base + idx);
      for (auto idx : lg.from_previous) lb.keep_rows.push_back(b * prev_points + idx);
      if (use_geo) {
        if (lg.geo.empty()) throw DimensionError("prepared geometry lacks geometric features");
        for (double v : lg.geo) geo.push_back(static_cast<float>(v));
      }
      lb.normalized.push_back(&lg.normalized);
      lb.raw.push_back(&lg.coords);
    }
    if (use_geo) {
      const std::size_t rows = b_count * lb.points;
      const std::size_t cols = geo.size() / rows;
      lb.geo = Tensor({rows, cols}, std::move(geo));
    }
  }
  return out;
}

}  // namespace

Tensor Model::forward(const std::vector<PointCloud>& batch, const ForwardOptions& options) const {
  if (batch.empty()) throw ParameterError("forward: empty batch");
  std::vector<ShapeGeometry> geometry;
  geometry.reserve(batch.size());
  for (const auto& cloud : batch) geometry.push_back(prepare_geometry(cloud, config_));
  std::vector<const ShapeGeometry*> ptrs;
  for (const auto& g : geometry) ptrs.push_back(&g);
  Tensor out = forward_prepared(ptrs, options);
  if (options.trace) options.trace->geometry = std::move(geometry);
  return out;
}

Tensor Model::forward_prepared(const std::vector<const ShapeGeometry*>& geometry,
                               const ForwardOptions& options) const {
  if (geometry.empty()) throw ParameterError("forward: empty batch");
  if (options.mode == Mode::kTrain && options.rng == nullptr && config_.dropout > 0.0 &&
      !head_.empty()) {
    throw ParameterError("forward: train mode needs an rng for dropout");
  }
  const std::size_t shapes = geometry.size();
  const std::size_t k = config_.k_neighbors;
  const auto levels = stack_levels(geometry, level_count(), k, config_.use_geo);
  if (options.trace) {
    options.trace->blocks.clear();
    options.trace->poses.clear();
  }

  std::vector<Tensor> outputs;
  Tensor f = config_.use_geo ? levels[0].geo : Tensor::full({shapes * levels[0].points, 1}, 1.0f);
  auto record = [&](std::size_t block, const Tensor& t) {
    outputs.push_back(t);
    if (options.trace) {
      const auto& info = blocks_[block];
      options.trace->blocks.push_back({info.name, info.is_pfe, info.level, t});
    }
  };
  auto run_rfe = [&](const RfeParams& p, const LevelBatch& lb, const Tensor& x) {
    const auto rel = rfe_relations(lb.coords, lb.geo, x, lb.neighbor_rows, k, p.switches);
    return rfe_block(p, rel, lb.geo, x, options.mode);
  };

  std::size_t block = 0;
  if (init_rfe_) {
    f = run_rfe(*init_rfe_, levels[0], f);
    record(block++, f);
  }
  std::size_t level = 0;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::size_t l = stage_level(config_, s);
    if (l != level) {
      f = gather_rows(f, levels[l].keep_rows);
      level = l;
    }
    const LevelBatch& lb = levels[l];
    if (stages_[s].pfe) {
      PfeContext ctx;
      ctx.shapes = shapes;
      ctx.points = lb.points;
      ctx.k = k;
      ctx.geo = &lb.geo;
      ctx.neighbor_rows = lb.neighbor_rows;
      ctx.normalized = lb.normalized;
      ctx.raw = lb.raw;
      ctx.transforms = &transforms_;
      PfeOptions po;
      po.mode = options.mode;
      po.pose_mode = config_.pose_mode;
      po.break_selector = options.break_selector;
      po.stats = options.stats;
      std::vector<PfeShapeTrace> trace;
      if (options.trace) po.trace = &trace;
      f = pfe_forward(*stages_[s].pfe, ctx, f, po);
      if (options.trace) options.trace->poses.push_back(std::move(trace));
      record(block++, f);
    }
    if (stages_[s].rfe) {
      f = run_rfe(*stages_[s].rfe, lb, f);
      record(block++, f);
    }
  }

  const auto chosen = aggregated_blocks();
  Tensor x;
  if (config_.task == Task::kClassify) {
    std::vector<Tensor> pooled;
    for (auto i : chosen) {
      const std::size_t n = levels[blocks_[i].level].points;
      pooled.push_back(
          max_pool(reshape(outputs[i], {shapes, n, blocks_[i].width}), 1).values);
    }
    x = pooled.size() == 1 ? pooled[0] : concat_cols(pooled);
  } else {
    std::vector<Tensor> parts;
    for (auto i : chosen) parts.push_back(outputs[i]);
    Tensor per_point = parts.size() == 1 ? parts[0] : concat_cols(parts);
    const std::size_t n = levels[0].points, w = per_point.dim(1);
    Tensor global = max_pool(reshape(per_point, {shapes, n, w}), 1).values;
    std::vector<std::size_t> owner(shapes * n);
    for (std::size_t r = 0; r < owner.size(); ++r) owner[r] = r / n;
    x = concat_cols({per_point, gather_rows(global, owner)});
  }
  if (options.trace) options.trace->embedding = x;

  Rng no_noise(0);
  Rng& rng = options.rng ? *options.rng : no_noise;
  for (const auto& layer : head_) {
    x = dropout(layer(x, options.mode), static_cast<float>(config_.dropout), options.mode, rng);
  }
  Tensor logits = classifier_(x);
  if (config_.task == Task::kClassify) return logits;

  const std::size_t n = levels[0].points;
  std::vector<std::size_t> back(shapes * n);
  for (std::size_t b = 0; b < shapes; ++b) {
    const auto& order = geometry[b]->order;
    for (std::size_t r = 0; r < n; ++r) back[b * n + order[r]] = b * n + r;
  }
  return gather_rows(logits, back);
}

Checkpoint Model::to_checkpoint() const {
  Checkpoint c;
  c.config_text = config_.to_text();
  for (const auto& e : store_.entries()) c.tensors.emplace_back(e.name, e.tensor.clone());
  return c;
}

void Model::load_state(const Checkpoint& checkpoint) {
  for (const auto& e : store_.entries()) {
    const Tensor* src = nullptr;
    for (const auto& [name, t] : checkpoint.tensors) {
      if (name == e.name) {
        src = &t;
        break;
      }
    }
    if (src == nullptr) throw IoError("checkpoint lacks tensor '" + e.name + "'");
    if (src->shape() != e.tensor.shape()) {
      throw IoError("checkpoint tensor '" + e.name + "' has shape " + shape_str(src->shape()) +
                    ", model expects " + shape_str(e.tensor.shape()));
    }
    Tensor target = e.tensor;
    auto dst = target.mutable_data();
    std::copy(src->data().begin(), src->data().end(), dst.begin());
  }
  if (checkpoint.tensors.size() != store_.entries().size()) {
    throw IoError("checkpoint holds " + std::to_string(checkpoint.tensors.size()) +
                  " tensors, model has " + std::to_string(store_.entries().size()));
  }
}

Model Model::from_checkpoint(const Checkpoint& checkpoint) {
  Model m(ModelConfig::from_text(checkpoint.config_text));
  m.load_state(checkpoint);
  return m;
}

}  // namespace prinv
