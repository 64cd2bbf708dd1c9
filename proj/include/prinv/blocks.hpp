#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prinv/layers.hpp"
#include "prinv/pose_select.hpp"
#include "prinv/pose_space.hpp"

namespace prinv {

// Which relation terms feed the RFE weight network.
struct RfeSwitches {
  bool use_cp = true;  // centered-coordinate correlations
  bool use_cg = true;  // geometric-feature correlations
  bool use_cf = true;  // point-feature correlations
  bool use_gk = true;  // the neighbor's own geometric feature

  std::size_t correlation_terms() const { return std::size_t(use_cp) + use_cg + use_cf; }
};

// Relational convolution
//   f'_il = sum_k sum_j f_kj * phi(r_ik)_j * theta_kjl
// where r_ik = [Cp_k, Cg_k, Cf_k, g_k] for the k-th neighbor of point i.
// phi is FC -> ReLU -> FC; its first layer is split into a correlation part and
// a geometric part so the latter can be evaluated once per point.
struct RfeParams {
  std::size_t k = 0;
  RfeSwitches switches;
  Tensor rel_weight;   // [(terms * k) x hidden], undefined when terms == 0
  Tensor geo_weight;   // [geo_width x hidden], undefined when !use_gk
  Tensor hidden_bias;  // [hidden]
  Linear phi_out;      // hidden -> d_in
  Tensor theta;        // [k x d_in x d_out]
  BatchNorm bn;        // epilogue, applied by rfe_block

  std::size_t in_width() const { return theta.dim(1); }
  std::size_t out_width() const { return theta.dim(2); }
};

// phi's output layer starts near zero with bias 1, so initially W ~ theta.
RfeParams make_rfe(ParamStore& store, const std::string& name, std::size_t k, std::size_t d_in,
                   std::size_t d_out, std::size_t hidden, std::size_t geo_width,
                   RfeSwitches switches, Rng& rng);

struct RfeRelations {
  std::size_t k = 0;
  // Row (i * k + t) is the global row of the t-th neighbor of row i.
  std::vector<std::size_t> neighbor_rows;
  Tensor cp;  // [(rows * k) x k] or undefined
  Tensor cg;
  Tensor cf;  // recorded on the tape: depends on the features
  Tensor correlations;  // concatenation of the enabled terms, or undefined
};

// Correlations for every (point, neighbor) pair. `coords` are the point
// positions of all rows; Cp uses positions relative to the center point, the
// other terms use raw inner products. Each correlation row is l2-normalized,
// with all-zero rows left at zero. `geo` may be undefined when neither Cg nor
// g_k is used.
RfeRelations rfe_relations(std::span<const Vec3> coords, const Tensor& geo, const Tensor& feats,
                           std::span<const std::size_t> neighbor_rows, std::size_t k,
                           const RfeSwitches& switches);

// Weight-network output phi(r_ik), [(rows * k) x d_in].
Tensor rfe_phi(const RfeParams& params, const RfeRelations& relations, const Tensor& geo);

// The convolution itself, without bias or activation. [rows x d_out].
Tensor rfe_forward(const RfeParams& params, const RfeRelations& relations, const Tensor& geo,
                   const Tensor& feats);

// rfe_forward followed by batch norm and ReLU.
Tensor rfe_block(const RfeParams& params, const RfeRelations& relations, const Tensor& geo,
                 const Tensor& feats, Mode mode);

enum class PoseMode { kSelect, kMaxPool, kAvgPool };

PoseMode parse_pose_mode(std::string_view name);
std::string to_string(PoseMode mode);

// Positional feature embedding: pose expansion, selection, and the shared
// point MLP gamma max-pooled over each neighborhood.
struct PfeParams {
  std::optional<PoseSelectorParams> selector;  // absent in pooling modes
  std::vector<DenseBnRelu> gamma;
  bool use_geo = true;

  std::size_t out_width() const { return gamma.back().fc.out(); }
};

PfeParams make_pfe(ParamStore& store, const std::string& name, std::size_t geo_width,
                   std::size_t d_in, const std::vector<std::size_t>& widths, Rng& rng);

// Counts positional-extractor evaluations, one per shape per pose.
struct BlockStats {
  std::size_t extractor_calls = 0;
  std::size_t selector_poses = 0;
};

// Per-shape record of what the pose expander and selector did.
struct PfeShapeTrace {
  PoseSpace space;
  std::vector<PoseScore> scores;
  std::size_t selected = 0;
  std::vector<Vec3> selected_points;
};

// Batch of equally sized shapes stacked row-wise.
struct PfeContext {
  std::size_t shapes = 0;
  std::size_t points = 0;  // per shape
  std::size_t k = 0;
  const Tensor* geo = nullptr;  // [(shapes * points) x 97], ignored when !use_geo
  std::span<const std::size_t> neighbor_rows;
  // Per shape: coordinates in the canonical PCA frame, and in the input frame.
  std::vector<const std::vector<Vec3>*> normalized;
  std::vector<const std::vector<Vec3>*> raw;
  const std::vector<Mat3>* transforms = nullptr;
};

struct PfeOptions {
  Mode mode = Mode::kEval;
  PoseMode pose_mode = PoseMode::kSelect;
  // Feeds input-frame coordinates to gamma instead of the selected pose.
  bool break_selector = false;
  BlockStats* stats = nullptr;
  std::vector<PfeShapeTrace>* trace = nullptr;
};

// gamma over one pose per shape: shared MLP on [g_j, f_j, p_j] followed by a
// max over each neighborhood. `pose_coords` is [(shapes * points) x 3].
Tensor pfe_extract(const PfeParams& params, const PfeContext& ctx, const Tensor& feats,
                   const Tensor& pose_coords, Mode mode);

Tensor pfe_forward(const PfeParams& params, const PfeContext& ctx, const Tensor& feats,
                   const PfeOptions& options);

}  // namespace prinv
