#include "prinv/pose_select.hpp"

#include <algorithm>

#include "prinv/error.hpp"

namespace prinv {

PoseSelectorParams make_pose_selector(ParamStore& store, const std::string& name,
                                      std::size_t hidden, std::size_t heads, Rng& rng) {
  if (heads == 0 || hidden == 0) throw ConfigError("pose selector needs >= 1 head and hidden unit");
  PoseSelectorParams p;
  p.point_fc = make_linear(store, name + ".point_fc", 3, hidden, rng);
  p.head_fc = make_linear(store, name + ".head_fc", hidden, heads, rng);
  return p;
}

Tensor points_tensor(const std::vector<Vec3>& points) {
  std::vector<float> data;
  data.reserve(points.size() * 3);
  for (const auto& p : points) {
    for (double v : p) data.push_back(static_cast<float>(v));
  }
  return Tensor({points.size(), 3}, std::move(data));
}

Tensor selector_forward(const PoseSelectorParams& params, const Tensor& points, std::size_t poses) {
  if (points.rank() != 2 || points.dim(1) != 3 || poses == 0 || points.dim(0) % poses != 0 ||
      points.dim(0) == 0) {
    throw DimensionError("selector_forward: points " + shape_str(points.shape()) + " for " +
                         std::to_string(poses) + " poses");
  }
  const std::size_t n = points.dim(0) / poses;
  Tensor h = relu(params.point_fc(points));
  Tensor pooled = max_pool(reshape(h, {poses, n, params.point_fc.out()}), 1).values;
  return softmax(params.head_fc(pooled), 1);
}

namespace {

std::vector<PoseScore> unpack_scores(const Tensor& scores) {
  const std::size_t poses = scores.dim(0), heads = scores.dim(1);
  std::vector<PoseScore> out(poses);
  const auto d = scores.data();
  for (std::size_t s = 0; s < poses; ++s) {
    auto& ps = out[s];
    ps.scores.assign(d.begin() + s * heads, d.begin() + (s + 1) * heads);
    for (std::size_t h = 0; h < heads; ++h) {
      if (ps.scores[h] > ps.scores[ps.head]) ps.head = h;
    }
    ps.best = ps.scores[ps.head];
  }
  return out;
}

}  // namespace

PoseScore score_pose(const PoseSelectorParams& params, const std::vector<Vec3>& points) {
  if (points.empty()) throw ParameterError("score_pose: empty pose");
  return unpack_scores(selector_forward(params, points_tensor(points), 1)).front();
}

std::vector<PoseScore> score_poses(const PoseSelectorParams& params, const PoseSpace& space) {
  if (space.poses.empty()) return {};
  if (active_tape() != nullptr) {
    const std::size_t n = space.poses.front().points.size();
    std::vector<float> data;
    data.reserve(space.size() * n * 3);
    for (const auto& pose : space.poses) {
      for (const auto& p : pose.points) {
        for (double v : p) data.push_back(static_cast<float>(v));
      }
    }
    Tensor stacked({space.size() * n, 3}, std::move(data));
    return unpack_scores(selector_forward(params, stacked, space.size()));
  }
  // Untaped: FC + ReLU + max over points without materializing the activations.
  // Same float operation order as selector_forward.
  const std::size_t hidden = params.point_fc.out();
  const float* w = params.point_fc.weight.data().data();
  const float* b = params.point_fc.bias.data().data();
  std::vector<float> pooled(space.size() * hidden);
  std::vector<float> h(hidden);
  for (std::size_t s = 0; s < space.size(); ++s) {
    float* out = &pooled[s * hidden];
    const auto& pts = space.poses[s].points;
    if (pts.empty()) throw ParameterError("score_poses: empty pose");
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const float x0 = static_cast<float>(pts[i][0]);
      const float x1 = static_cast<float>(pts[i][1]);
      const float x2 = static_cast<float>(pts[i][2]);
      for (std::size_t j = 0; j < hidden; ++j) {
        float v = 0.0f;
        v += x0 * w[j];
        v += x1 * w[hidden + j];
        v += x2 * w[2 * hidden + j];
        v += b[j];
        h[j] = v > 0.0f ? v : 0.0f;
      }
      if (i == 0) {
        std::copy(h.begin(), h.end(), out);
      } else {
        for (std::size_t j = 0; j < hidden; ++j) out[j] = std::max(out[j], h[j]);
      }
    }
  }
  const Tensor pooled_t({space.size(), hidden}, std::move(pooled));
  return unpack_scores(softmax(params.head_fc(pooled_t), 1));
}

std::size_t select_index(const std::vector<PoseScore>& scores, const std::vector<Mat3>& transforms) {
  if (scores.empty()) throw ParameterError("select_pose: empty pose space");
  std::size_t best = 0;
  for (std::size_t s = 1; s < scores.size(); ++s) {
    if (scores[s].best > scores[best].best ||
        (scores[s].best == scores[best].best && lex_less(transforms[s], transforms[best]))) {
      best = s;
    }
  }
  return best;
}

PoseSelection select_pose(const PoseSelectorParams& params, const PoseSpace& space) {
  if (space.poses.empty()) throw ParameterError("select_pose: empty pose space");
  PoseSelection sel;
  sel.scores = score_poses(params, space);
  std::vector<Mat3> transforms;
  transforms.reserve(space.size());
  for (const auto& p : space.poses) transforms.push_back(p.transform);
  sel.index = select_index(sel.scores, transforms);
  return sel;
}

}  // namespace prinv
