#include "prinv/blocks.hpp"

#include <cmath>

#include "prinv/error.hpp"

namespace prinv {

RfeParams make_rfe(ParamStore& store, const std::string& name, std::size_t k, std::size_t d_in,
                   std::size_t d_out, std::size_t hidden, std::size_t geo_width,
                   RfeSwitches switches, Rng& rng) {
  if (k == 0 || d_in == 0 || d_out == 0 || hidden == 0) {
    throw ConfigError("rfe block '" + name + "' needs nonzero k and widths");
  }
  if (geo_width == 0) {
    switches.use_cg = false;
    switches.use_gk = false;
  }
  RfeParams p;
  p.k = k;
  p.switches = switches;
  const std::size_t terms = switches.correlation_terms();
  const std::size_t phi_in = terms * k + (switches.use_gk ? geo_width : 0);
  const double bound = phi_in > 0 ? std::sqrt(6.0 / double(phi_in)) : 0.0;
  if (terms > 0) {
    p.rel_weight = uniform_tensor({terms * k, hidden}, bound, rng);
    store.add(name + ".phi.rel_weight", p.rel_weight);
  }
  if (switches.use_gk) {
    p.geo_weight = uniform_tensor({geo_width, hidden}, bound, rng);
    store.add(name + ".phi.geo_weight", p.geo_weight);
  }
  p.hidden_bias = Tensor::zeros({hidden});
  store.add(name + ".phi.hidden_bias", p.hidden_bias);
  p.phi_out = make_linear(store, name + ".phi.out", hidden, d_in, rng, 0.01);
  for (auto& b : p.phi_out.bias.mutable_data()) b = 1.0f;
  p.theta = uniform_tensor({k, d_in, d_out}, std::sqrt(6.0 / double(k * d_in)), rng);
  store.add(name + ".theta", p.theta);
  p.bn = make_batch_norm(store, name + ".bn", d_out);
  return p;
}

namespace {

void check_neighbor_rows(std::span<const std::size_t> neighbor_rows, std::size_t k,
                         std::size_t rows, const char* what) {
  if (k == 0 || neighbor_rows.size() != rows * k) {
    throw DimensionError(std::string(what) + ": neighbor table of " +
                         std::to_string(neighbor_rows.size()) + " entries for " +
                         std::to_string(rows) + " rows, k=" + std::to_string(k));
  }
}

Tensor centered_correlation(std::span<const Vec3> coords, std::span<const std::size_t> nbr,
                            std::size_t k) {
  const std::size_t rows = coords.size();
  std::vector<float> out(rows * k * k);
  std::vector<Vec3> rel(k);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t a = 0; a < k; ++a) rel[a] = coords[nbr[i * k + a]] - coords[i];
    for (std::size_t a = 0; a < k; ++a) {
      float* row = &out[(i * k + a) * k];
      double sq = 0.0;
      std::vector<double> g(k);
      for (std::size_t b = 0; b < k; ++b) {
        g[b] = dot(rel[a], rel[b]);
        sq += g[b] * g[b];
      }
      const double nrm = std::sqrt(sq);
      if (nrm < 1e-12) continue;
      for (std::size_t b = 0; b < k; ++b) row[b] = static_cast<float>(g[b] / nrm);
    }
  }
  return Tensor({rows * k, k}, std::move(out));
}

}  // namespace

RfeRelations rfe_relations(std::span<const Vec3> coords, const Tensor& geo, const Tensor& feats,
                           std::span<const std::size_t> neighbor_rows, std::size_t k,
                           const RfeSwitches& switches) {
  const std::size_t rows = feats.dim(0);
  check_neighbor_rows(neighbor_rows, k, rows, "rfe_relations");
  RfeRelations r;
  r.k = k;
  r.neighbor_rows.assign(neighbor_rows.begin(), neighbor_rows.end());
  std::vector<Tensor> parts;
  if (switches.use_cp) {
    if (coords.size() != rows) throw DimensionError("rfe_relations: coordinate count mismatch");
    r.cp = centered_correlation(coords, neighbor_rows, k);
    parts.push_back(r.cp);
  }
  if (switches.use_cg) {
    if (!geo.defined() || geo.dim(0) != rows) {
      throw DimensionError("rfe_relations: geometric features missing or mismatched");
    }
    NoGradScope constant;
    r.cg = neighborhood_correlation(gather_rows(geo, neighbor_rows), k);
    parts.push_back(r.cg);
  }
  if (switches.use_cf) {
    r.cf = neighborhood_correlation(gather_rows(feats, neighbor_rows), k);
    parts.push_back(r.cf);
  }
  if (parts.size() == 1) {
    r.correlations = parts.front();
  } else if (!parts.empty()) {
    r.correlations = concat_cols(parts);
  }
  return r;
}

Tensor rfe_phi(const RfeParams& params, const RfeRelations& relations, const Tensor& geo) {
  const std::size_t pairs = relations.neighbor_rows.size();
  const std::size_t hidden = params.hidden_bias.numel();
  Tensor h;
  if (params.rel_weight.defined()) {
    if (!relations.correlations.defined()) {
      throw DimensionError("rfe_phi: relations were built without the correlation terms");
    }
    h = matmul(relations.correlations, params.rel_weight);
  }
  if (params.geo_weight.defined()) {
    if (!geo.defined()) throw DimensionError("rfe_phi: geometric features missing");
    Tensor per_point = matmul(geo, params.geo_weight);
    Tensor g = gather_rows(per_point, relations.neighbor_rows);
    h = h.defined() ? add(h, g) : g;
  }
  if (!h.defined()) h = Tensor::zeros({pairs, hidden});
  return params.phi_out(relu(add_bias(h, params.hidden_bias)));
}

Tensor rfe_forward(const RfeParams& params, const RfeRelations& relations, const Tensor& geo,
                   const Tensor& feats) {
  const std::size_t rows = feats.dim(0);
  const std::size_t k = params.k, d = params.in_width();
  if (relations.k != k) throw DimensionError("rfe_forward: relation k differs from the block's");
  check_neighbor_rows(relations.neighbor_rows, k, rows, "rfe_forward");
  if (feats.rank() != 2 || feats.dim(1) != d) {
    throw DimensionError("rfe_forward: features " + shape_str(feats.shape()) + " for width " +
                         std::to_string(d));
  }
  Tensor phi = rfe_phi(params, relations, geo);
  Tensor modulated = mul(gather_rows(feats, relations.neighbor_rows), phi);
  return matmul(reshape(modulated, {rows, k * d}),
                reshape(params.theta, {k * d, params.out_width()}));
}

Tensor rfe_block(const RfeParams& params, const RfeRelations& relations, const Tensor& geo,
                 const Tensor& feats, Mode mode) {
  return relu(params.bn(rfe_forward(params, relations, geo, feats), mode));
}

PoseMode parse_pose_mode(std::string_view name) {
  if (name == "select") return PoseMode::kSelect;
  if (name == "max") return PoseMode::kMaxPool;
  if (name == "avg") return PoseMode::kAvgPool;
  throw ConfigError("unknown pose mode '" + std::string(name) + "' (expected select, max, avg)");
}

std::string to_string(PoseMode mode) {
  switch (mode) {
    case PoseMode::kSelect: return "select";
    case PoseMode::kMaxPool: return "max";
    case PoseMode::kAvgPool: return "avg";
  }
  return "?";
}

PfeParams make_pfe(ParamStore& store, const std::string& name, std::size_t geo_width,
                   std::size_t d_in, const std::vector<std::size_t>& widths, Rng& rng) {
  if (widths.empty()) throw ConfigError("pfe block '" + name + "' needs at least one layer");
  PfeParams p;
  p.use_geo = geo_width > 0;
  std::size_t in = geo_width + d_in + 3;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    p.gamma.push_back(
        make_dense_bn_relu(store, name + ".gamma." + std::to_string(l), in, widths[l], rng));
    in = widths[l];
  }
  return p;
}

Tensor pfe_extract(const PfeParams& params, const PfeContext& ctx, const Tensor& feats,
                   const Tensor& pose_coords, Mode mode) {
  const std::size_t rows = ctx.shapes * ctx.points;
  if (feats.dim(0) != rows || pose_coords.dim(0) != rows) {
    throw DimensionError("pfe_extract: expected " + std::to_string(rows) + " rows");
  }
  check_neighbor_rows(ctx.neighbor_rows, ctx.k, rows, "pfe_extract");
  std::vector<Tensor> parts;
  if (params.use_geo) {
    if (ctx.geo == nullptr || !ctx.geo->defined()) {
      throw DimensionError("pfe_extract: geometric features missing");
    }
    parts.push_back(*ctx.geo);
  }
  parts.push_back(feats);
  parts.push_back(pose_coords);
  Tensor h = concat_cols(parts);
  for (const auto& layer : params.gamma) h = layer(h, mode);
  const std::size_t w = params.out_width();
  Tensor grouped = reshape(gather_rows(h, ctx.neighbor_rows), {rows, ctx.k, w});
  return max_pool(grouped, 1).values;
}

namespace {

void append_points(std::vector<float>& dst, const std::vector<Vec3>& points, const Mat3* t) {
  for (const auto& p : points) {
    const Vec3 q = t ? p * *t : p;
    for (double v : q) dst.push_back(static_cast<float>(v));
  }
}

}  // namespace

Tensor pfe_forward(const PfeParams& params, const PfeContext& ctx, const Tensor& feats,
                   const PfeOptions& options) {
  const std::size_t shapes = ctx.shapes, n = ctx.points;
  if (ctx.normalized.size() != shapes || ctx.raw.size() != shapes || ctx.transforms == nullptr ||
      ctx.transforms->empty()) {
    throw DimensionError("pfe_forward: incomplete context");
  }
  for (std::size_t b = 0; b < shapes; ++b) {
    if (ctx.normalized[b]->size() != n || ctx.raw[b]->size() != n) {
      throw DimensionError("pfe_forward: shape " + std::to_string(b) + " has the wrong size");
    }
  }
  if (options.trace) options.trace->assign(shapes, {});

  if (options.pose_mode != PoseMode::kSelect) {
    std::vector<Tensor> outs;
    for (const auto& t : *ctx.transforms) {
      std::vector<float> coords;
      coords.reserve(shapes * n * 3);
      for (std::size_t b = 0; b < shapes; ++b) {
        append_points(coords, options.break_selector ? *ctx.raw[b] : *ctx.normalized[b], &t);
      }
      outs.push_back(pfe_extract(params, ctx, feats, Tensor({shapes * n, 3}, std::move(coords)),
                                 options.mode));
      if (options.stats) options.stats->extractor_calls += shapes;
    }
    const std::size_t count = outs.size(), w = params.out_width();
    Tensor stacked = reshape(concat_rows(outs), {count, shapes * n * w});
    Tensor pooled = options.pose_mode == PoseMode::kMaxPool ? max_pool(stacked, 0).values
                                                            : mean_pool(stacked, 0);
    return reshape(pooled, {shapes * n, w});
  }

  if (!params.selector) throw ConfigError("pfe_forward: select mode without a pose selector");
  const auto& selector = *params.selector;
  std::vector<float> coords;
  coords.reserve(shapes * n * 3);
  for (std::size_t b = 0; b < shapes; ++b) {
    if (options.break_selector) {
      append_points(coords, *ctx.raw[b], nullptr);
      if (options.trace) (*options.trace)[b].selected_points = *ctx.raw[b];
      continue;
    }
    PointCloud cloud;
    cloud.points = *ctx.normalized[b];
    PoseSpace space = expand_poses(cloud, *ctx.transforms);
    std::vector<PoseScore> scores;
    {
      NoGradScope untaped;
      scores = score_poses(selector, space);
    }
    std::vector<Mat3> transforms;
    transforms.reserve(space.size());
    for (const auto& p : space.poses) transforms.push_back(p.transform);
    const std::size_t idx = select_index(scores, transforms);
    append_points(coords, space.poses[idx].points, nullptr);
    if (options.stats) options.stats->selector_poses += space.size();
    if (options.trace) {
      auto& tr = (*options.trace)[b];
      tr.selected = idx;
      tr.selected_points = space.poses[idx].points;
      tr.scores = std::move(scores);
      tr.space = std::move(space);
    }
  }
  Tensor pose_coords({shapes * n, 3}, std::move(coords));
  Tensor out = pfe_extract(params, ctx, feats, pose_coords, options.mode);
  if (options.stats) options.stats->extractor_calls += shapes;

  // The winner's score scales gamma's output in the backward pass only, so the
  // selector learns to favor poses whose features reduce the loss.
  const bool selector_trains =
      selector.point_fc.weight.requires_grad() || selector.head_fc.weight.requires_grad();
  if (!options.break_selector && active_tape() != nullptr && selector_trains) {
    Tensor best = max_pool(selector_forward(selector, pose_coords, shapes), 1).values;
    out = straight_through_scale(out, best);
  }
  return out;
}

}  // namespace prinv
