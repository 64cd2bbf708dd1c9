#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "prinv/config.hpp"
#include "prinv/io.hpp"
#include "prinv/model.hpp"

namespace prinv {

// ---- datasets ---------------------------------------------------------------

enum class Split { kTrain, kVal, kTest };

Split parse_split(std::string_view name);
std::string to_string(Split split);

struct Dataset {
  std::vector<std::string> class_names;
  std::size_t num_parts = 0;  // 0 when clouds carry no per-point labels
  std::vector<PointCloud> clouds;
  std::vector<Split> splits;
  std::vector<std::string> sources;  // file path (relative to the root) or a synthetic tag

  std::size_t size() const { return clouds.size(); }
  std::vector<PointCloud> select(Split split) const;
  std::size_t count(Split split) const;
};

struct SynthOptions {
  std::size_t n_per_class = 25;
  std::size_t points = kDefaultPointCount;
  double jitter = 0.005;
  double val_fraction = 0.2;
  double test_fraction = 0.2;
};

inline constexpr std::size_t kSynthClasses = 4;
inline constexpr std::size_t kSynthParts = 10;
// Smallest relative principal-variance gap a synthetic cloud may have.
inline constexpr double kSynthMinGap = 0.05;

// Four classes (ellipsoid, box shell, dumbbell, L-bracket) with randomized
// proportions and per-point part labels. Clouds are jittered, centered and
// scaled to the unit ball, and redrawn until their principal variances are
// separated by kSynthMinGap. Each class is split val/test/train by fraction.
Dataset synth_dataset(std::uint64_t seed, const SynthOptions& options = {});

// `<root>/<class_name>/*.xyz|*.off`, classes in sorted name order. When
// `manifest` names a file (relative paths resolve against the root) it assigns
// splits with lines `<train|val|test> <relative path>` and only listed files
// are loaded; otherwise every file is loaded and split by fraction with `seed`.
struct DirectoryOptions {
  std::size_t points = kDefaultPointCount;
  std::string manifest;  // empty: look for <root>/split.txt
  double val_fraction = 0.2;
  double test_fraction = 0.2;
};

Dataset load_directory_dataset(const std::filesystem::path& root, std::uint64_t seed,
                               const DirectoryOptions& options = {});

void write_split_manifest(std::ostream& out, const Dataset& dataset);

// ---- augmentation -----------------------------------------------------------

enum class RotationMode { kNone, kZ, kSO3 };

RotationMode parse_rotation_mode(std::string_view name);
std::string to_string(RotationMode mode);

// Train-time and test-time rotation, written "z/z", "z/SO3", "SO3/SO3" (or
// with "SO(3)"), or "none".
struct AugmentMode {
  RotationMode train = RotationMode::kSO3;
  RotationMode test = RotationMode::kSO3;
};

AugmentMode parse_augment_mode(std::string_view text);
std::string to_string(const AugmentMode& mode);

// z: rotation about +z by a uniform angle. SO3: Haar-uniform via a normalized
// Gaussian quaternion. none: identity.
Mat3 random_rotation(RotationMode mode, Rng& rng);

PointCloud rotate_and_jitter(const PointCloud& cloud, RotationMode mode, double noise, Rng& rng);

// ---- run configuration --------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 250;
  std::size_t batch_size = 16;
  double lr = 0.001;
  double lr_decay_rate = 0.7;
  std::uint64_t lr_decay_step = 200000;  // in samples seen
  bool lr_staircase = true;
  AugmentMode augment;
  double noise = 0.0;  // Gaussian jitter applied to evaluation clouds
  std::size_t eval_batch_size = 32;
};

struct DataConfig {
  std::string data = "synth";  // "synth" or a dataset directory
  std::uint64_t data_seed = 1;
  std::size_t n_per_class = 25;
  std::size_t points = kDefaultPointCount;
  double val_fraction = 0.2;
  double test_fraction = 0.2;
  std::string manifest;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string out_dir = "run";

  // Model keys go to `model` (see ModelConfig::from_items); anything else
  // unknown throws ConfigError.
  static RunConfig from_items(const KeyValues& items);
  KeyValues items() const;
  std::string to_text() const { return format_key_values(items()); }
};

Dataset load_dataset(const DataConfig& config);

// ---- metrics ----------------------------------------------------------------

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);

// Mean over the classes present in `truth` of |pred ∩ truth| / |pred ∪ truth|.
double mean_iou(const std::vector<int>& predicted, const std::vector<int>& truth,
                std::size_t num_classes);

std::vector<int> argmax_rows(const Tensor& logits);

struct Metrics {
  std::size_t count = 0;
  double accuracy = 0.0;  // shape accuracy, or point accuracy for segmentation
  double miou = 0.0;      // segmentation only
  double loss = 0.0;
  std::vector<int> predictions;
};

// Evaluates in eval mode after applying `rotation` and `noise` to each cloud.
// Throws ParameterError when a label is outside the model's class range.
Metrics evaluate(const Model& model, const std::vector<PointCloud>& clouds, RotationMode rotation,
                 double noise, std::uint64_t seed, std::size_t batch_size = 32);

// ---- training ----------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double val_miou = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

inline constexpr const char* kEpochCsvHeader =
    "epoch,train_loss,train_accuracy,val_accuracy,val_miou,lr,seconds";

std::string epoch_csv_line(const EpochRecord& r);

struct TrainResult {
  Model final_model;
  std::optional<Checkpoint> best;  // highest validation score, if a val split exists
  std::vector<EpochRecord> epochs;
  double initial_loss = 0.0;  // first minibatch of epoch 0, before any update
  std::size_t steps = 0;
};

struct TrainHooks {
  std::ostream* log = nullptr;      // human-readable progress
  std::ostream* csv = nullptr;      // one line per epoch, header first
  std::size_t max_steps = 0;        // stop early after this many steps (0: no limit)
};

// Adam on softmax cross-entropy (mean over points for segmentation). Throws
// NumericalError with the learning rate and gradient norms when the loss or a
// gradient stops being finite.
TrainResult train(const RunConfig& config, const Dataset& dataset, const TrainHooks& hooks = {});

// Runs train() and writes run.log, log.csv, best.prinv and final.prinv into
// config.out_dir.
TrainResult train_to_directory(const RunConfig& config, const Dataset& dataset,
                               std::ostream* progress = nullptr);

// ---- invariance verification ----------------------------------------------------

struct InvarianceOptions {
  std::size_t rotations = 20;
  double tolerance = 1e-4;
  double degeneracy = 1e-3;  // relative eigenvalue gap below which a shape is skipped
  std::uint64_t seed = 0;
  bool break_selector = false;
};

struct ShapeResidual {
  std::size_t index = 0;
  std::string source;
  double relative_gap = 0.0;
  bool skipped = false;
  // Named maxima over rotations: "logits", "geo_features", "pose_space",
  // "selected_pose", then one per feature block.
  std::vector<std::pair<std::string, double>> residuals;

  double max() const;
};

struct InvarianceReport {
  std::vector<ShapeResidual> shapes;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double tolerance = 0.0;
  std::vector<std::pair<std::string, double>> worst;  // per residual name

  bool passed() const;
  double worst_of(const std::string& name) const;
};

InvarianceReport verify_invariance(const Model& model, const std::vector<PointCloud>& clouds,
                                   const InvarianceOptions& options,
                                   const std::vector<std::string>& sources = {});

void write_residual_csv(std::ostream& out, const InvarianceReport& report);
void print_residual_table(std::ostream& out, const InvarianceReport& report);

}  // namespace prinv
