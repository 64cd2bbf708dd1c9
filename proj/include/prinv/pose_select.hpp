#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "prinv/layers.hpp"
#include "prinv/pose_space.hpp"

namespace prinv {

// Multi-head pose scorer: point-wise FC + ReLU, max over points, FC, softmax
// over the heads.
struct PoseSelectorParams {
  Linear point_fc;  // 3 -> hidden
  Linear head_fc;   // hidden -> heads

  std::size_t heads() const { return head_fc.out(); }
};

PoseSelectorParams make_pose_selector(ParamStore& store, const std::string& name,
                                      std::size_t hidden, std::size_t heads, Rng& rng);

struct PoseScore {
  std::vector<float> scores;  // softmax over heads
  float best = 0.0f;          // max of scores
  std::size_t head = 0;       // argmax of scores
};

// Float32 [N x 3] tensor of a pose's coordinates.
Tensor points_tensor(const std::vector<Vec3>& points);

// Head scores [poses x heads] for `points` holding `poses` stacked clouds of
// equal size, [(poses * n) x 3]. Records on the tape when one is active.
Tensor selector_forward(const PoseSelectorParams& params, const Tensor& points, std::size_t poses);

PoseScore score_pose(const PoseSelectorParams& params, const std::vector<Vec3>& points);

// Scores every pose of the space in one stacked pass.
std::vector<PoseScore> score_poses(const PoseSelectorParams& params, const PoseSpace& space);

// Index of the largest best-score; exact ties go to the lexicographically
// smallest transform.
std::size_t select_index(const std::vector<PoseScore>& scores, const std::vector<Mat3>& transforms);

struct PoseSelection {
  std::size_t index = 0;
  std::vector<PoseScore> scores;
};

// Throws ParameterError for an empty space.
PoseSelection select_pose(const PoseSelectorParams& params, const PoseSpace& space);

}  // namespace prinv
