#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prinv/blocks.hpp"
#include "prinv/checkpoint.hpp"
#include "prinv/config.hpp"
#include "prinv/geometry.hpp"
#include "prinv/params.hpp"

namespace prinv {

enum class Task { kClassify, kSegment };
enum class AggregateMode { kAll, kPfeOnly, kRfeOnly, kLastRfe };

Task parse_task(std::string_view name);
std::string to_string(Task task);
AggregateMode parse_aggregate_mode(std::string_view name);
std::string to_string(AggregateMode mode);

struct ModelConfig {
  Task task = Task::kClassify;
  std::size_t num_classes = 40;  // shape classes, or part labels for segmentation
  std::size_t init_width = 32;
  std::vector<std::size_t> stages{64, 128, 256};
  std::size_t gamma_depth = 2;      // layers of gamma, the last one at the stage width
  std::size_t phi_hidden = 0;       // 0: the block's output width
  std::size_t selector_hidden = 64;
  std::size_t heads = 200;
  std::size_t k_neighbors = 16;
  RotationGroup rotation_group = RotationGroup::kA5;
  AggregateMode aggregate = AggregateMode::kAll;
  bool coarsen = true;  // halve the point count between stages (classification only)
  bool use_geo = true;
  bool use_pfe = true;
  bool use_rfe = true;
  RfeSwitches relations;
  PoseMode pose_mode = PoseMode::kSelect;
  bool share_selector = false;
  std::vector<std::size_t> head_widths{512, 256};
  double dropout = 0.5;
  std::uint64_t seed = 0;

  // Applies one `key = value` setting. Throws ConfigError for unknown keys or
  // malformed values.
  void set(const std::string& key, const std::string& value);
  // Every key with its current value, in a stable order.
  std::vector<std::pair<std::string, std::string>> items() const;
  std::string to_text() const;
  // Segmentation defaults double every feature width and predict 50 parts.
  static ModelConfig defaults_for(Task task);
  // Starts from defaults_for(task) when `task` is among the items, then
  // applies every item in order.
  static ModelConfig from_items(const KeyValues& items);
  static ModelConfig from_text(const std::string& text);
  void validate() const;
};

bool is_model_key(const std::string& key);

// Geometry of one level of the point hierarchy, in canonical point order.
struct LevelGeometry {
  std::vector<Vec3> coords;      // input frame (after centering and scaling)
  std::vector<Vec3> normalized;  // PCA frame
  std::vector<double> geo;       // [N x 97], empty without geometric features
  NeighborIndex neighbors;       // k_neighbors columns
  std::vector<std::size_t> from_previous;  // rows kept from the previous level
};

struct ShapeGeometry {
  // order[r] is the input index of canonical row r.
  std::vector<std::size_t> order;
  PcaResult pca;
  std::vector<LevelGeometry> levels;  // one per stage (or one if not coarsening)
};

// Centers and scales the cloud, computes the PCA frame once, and sorts points
// by squared PCA coordinates, which does not depend on the axis signs.
// Coarser levels come from farthest-point sampling in that order.
ShapeGeometry prepare_geometry(const PointCloud& cloud, const ModelConfig& config);

// Output of one block, stacked over the batch: [(shapes * N_level) x width].
struct BlockOutput {
  std::string name;  // "init.rfe", "stage1.pfe", ...
  bool is_pfe = false;
  std::size_t level = 0;
  Tensor features;
};

struct ForwardTrace {
  std::vector<ShapeGeometry> geometry;  // per shape
  std::vector<BlockOutput> blocks;
  // Per PFE stage, per shape.
  std::vector<std::vector<PfeShapeTrace>> poses;
  Tensor embedding;  // aggregated representation fed to the head
};

struct ForwardOptions {
  Mode mode = Mode::kEval;
  Rng* rng = nullptr;  // dropout noise, required in train mode
  bool break_selector = false;
  BlockStats* stats = nullptr;
  ForwardTrace* trace = nullptr;
};

class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  // Classification: logits [B x classes]. Segmentation: per-point logits
  // [(B * N) x parts] with rows in each cloud's input order. All clouds must
  // have the same point count.
  Tensor forward(const std::vector<PointCloud>& batch, const ForwardOptions& options = {}) const;

  // Same, reusing geometry prepared earlier (e.g. cached across epochs).
  Tensor forward_prepared(const std::vector<const ShapeGeometry*>& geometry,
                          const ForwardOptions& options) const;

  struct BlockInfo {
    std::string name;
    bool is_pfe = false;
    std::size_t width = 0;
    std::size_t level = 0;
  };
  // Feature blocks in execution order.
  const std::vector<BlockInfo>& blocks() const { return blocks_; }
  // Indices into blocks() that feed the head under the aggregate mode.
  std::vector<std::size_t> aggregated_blocks() const;
  std::size_t embedding_width() const;
  std::size_t level_count() const;
  const std::vector<Mat3>& pose_transforms() const { return transforms_; }

  Checkpoint to_checkpoint() const;
  // Copies tensors into this model by name; throws IoError on a missing name
  // or shape mismatch.
  void load_state(const Checkpoint& checkpoint);
  static Model from_checkpoint(const Checkpoint& checkpoint);

 private:
  struct Stage {
    std::optional<PfeParams> pfe;
    std::optional<RfeParams> rfe;
  };

  ModelConfig config_;
  ParamStore store_;
  RotationSet rotations_;
  std::vector<Mat3> transforms_;
  std::optional<RfeParams> init_rfe_;
  std::vector<Stage> stages_;
  std::vector<BlockInfo> blocks_;
  std::vector<DenseBnRelu> head_;
  Linear classifier_;
};

}  // namespace prinv
