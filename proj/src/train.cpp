#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "prinv/error.hpp"
#include "prinv/optim.hpp"
#include "prinv/pipeline.hpp"

namespace prinv {

RunConfig RunConfig::from_items(const KeyValues& items) {
  RunConfig c;
  KeyValues model_items;
  for (const auto& [k, v] : items) {
    if (is_model_key(k)) {
      model_items.emplace_back(k, v);
      continue;
    }
    auto& t = c.train;
    auto& d = c.data;
    if (k == "epochs") t.epochs = parse_size(k, v);
    else if (k == "batch_size") t.batch_size = parse_size(k, v);
    else if (k == "lr") t.lr = parse_double(k, v);
    else if (k == "lr_decay_rate") t.lr_decay_rate = parse_double(k, v);
    else if (k == "lr_decay_step") t.lr_decay_step = parse_u64(k, v);
    else if (k == "lr_staircase") t.lr_staircase = parse_bool(k, v);
    else if (k == "augment") t.augment = parse_augment_mode(v);
    else if (k == "noise") t.noise = parse_double(k, v);
    else if (k == "eval_batch_size") t.eval_batch_size = parse_size(k, v);
    else if (k == "data") d.data = v;
    else if (k == "data_seed") d.data_seed = parse_u64(k, v);
    else if (k == "n_per_class") d.n_per_class = parse_size(k, v);
    else if (k == "points") d.points = parse_size(k, v);
    else if (k == "val_fraction") d.val_fraction = parse_double(k, v);
    else if (k == "test_fraction") d.test_fraction = parse_double(k, v);
    else if (k == "manifest") d.manifest = v;
    else if (k == "out_dir") c.out_dir = v;
    else throw ConfigError("unknown config key '" + k + "'");
  }
  c.model = ModelConfig::from_items(model_items);
  if (c.train.batch_size == 0 || c.train.eval_batch_size == 0) {
    throw ConfigError("batch sizes must be >= 1");
  }
  if (!(c.train.lr > 0)) throw ConfigError("lr must be > 0");
  if (c.train.lr_decay_step == 0) throw ConfigError("lr_decay_step must be >= 1");
  if (c.train.noise < 0) throw ConfigError("noise must be >= 0");
  return c;
}

KeyValues RunConfig::items() const {
  KeyValues out = model.items();
  const KeyValues rest{{"epochs", std::to_string(train.epochs)},
                       {"batch_size", std::to_string(train.batch_size)},
                       {"lr", format_double(train.lr)},
                       {"lr_decay_rate", format_double(train.lr_decay_rate)},
                       {"lr_decay_step", std::to_string(train.lr_decay_step)},
                       {"lr_staircase", format_bool(train.lr_staircase)},
                       {"augment", to_string(train.augment)},
                       {"noise", format_double(train.noise)},
                       {"eval_batch_size", std::to_string(train.eval_batch_size)},
                       {"data", data.data},
                       {"data_seed", std::to_string(data.data_seed)},
                       {"n_per_class", std::to_string(data.n_per_class)},
                       {"points", std::to_string(data.points)},
                       {"val_fraction", format_double(data.val_fraction)},
                       {"test_fraction", format_double(data.test_fraction)},
                       {"manifest", data.manifest},
                       {"out_dir", out_dir}};
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size()) throw DimensionError("accuracy: size mismatch");
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return double(hit) / double(truth.size());
}

double mean_iou(const std::vector<int>& predicted, const std::vector<int>& truth,
                std::size_t num_classes) {
  if (predicted.size() != truth.size()) throw DimensionError("mean_iou: size mismatch");
  std::vector<std::size_t> inter(num_classes, 0), uni(num_classes, 0), present(num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 0 || std::size_t(t) >= num_classes || p < 0 || std::size_t(p) >= num_classes) {
      throw ParameterError("mean_iou: label outside [0, " + std::to_string(num_classes) + ")");
    }
    present[t] = 1;
    if (t == p) {
      ++inter[t];
      ++uni[t];
    } else {
      ++uni[t];
      ++uni[p];
    }
  }
  double sum = 0.0;
  std::size_t classes = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (!present[c]) continue;
    sum += double(inter[c]) / double(uni[c]);
    ++classes;
  }
  return classes ? sum / double(classes) : 0.0;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto d = logits.data();
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (d[r * cols + c] > d[r * cols + best]) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

namespace {

std::vector<int> batch_labels(const std::vector<PointCloud>& clouds, const ModelConfig& config) {
  std::vector<int> labels;
  for (const auto& c : clouds) {
    if (config.task == Task::kClassify) {
      labels.push_back(c.label);
    } else {
      if (c.labels.size() != c.size()) {
        throw ParameterError("segmentation needs a part label for every point");
      }
      labels.insert(labels.end(), c.labels.begin(), c.labels.end());
    }
  }
  for (int l : labels) {
    if (l < 0 || std::size_t(l) >= config.num_classes) {
      throw ParameterError("label " + std::to_string(l) + " outside the model's " +
                           std::to_string(config.num_classes) + " classes");
    }
  }
  return labels;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

Metrics evaluate(const Model& model, const std::vector<PointCloud>& clouds, RotationMode rotation,
                 double noise, std::uint64_t seed, std::size_t batch_size) {
  Metrics m;
  if (clouds.empty()) return m;
  if (batch_size == 0) throw ConfigError("eval batch size must be >= 1");
  const auto& config = model.config();
  const Rng base(seed);
  std::vector<int> truth;
  double loss_sum = 0.0;
  NoGradScope untaped;
  for (std::size_t start = 0; start < clouds.size(); start += batch_size) {
    const std::size_t end = std::min(clouds.size(), start + batch_size);
    std::vector<PointCloud> batch;
    for (std::size_t i = start; i < end; ++i) {
      Rng rng = base.split(i);
      batch.push_back(rotate_and_jitter(clouds[i], rotation, noise, rng));
    }
    const auto labels = batch_labels(batch, config);
    Tensor logits = model.forward(batch);
    loss_sum += double(cross_entropy(logits, labels).item()) * double(labels.size());
    const auto pred = argmax_rows(logits);
    m.predictions.insert(m.predictions.end(), pred.begin(), pred.end());
    truth.insert(truth.end(), labels.begin(), labels.end());
  }
  m.count = clouds.size();
  m.accuracy = accuracy(m.predictions, truth);
  m.loss = loss_sum / double(truth.size());
  if (config.task == Task::kSegment) m.miou = mean_iou(m.predictions, truth, config.num_classes);
  return m;
}

std::string epoch_csv_line(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.6f,%.6f,%.6f,%.9g,%.3f", r.epoch, r.train_loss,
                r.train_accuracy, r.val_accuracy, r.val_miou, r.lr, r.seconds);
  return buf;
}

namespace {

double grad_norm(const Tensor& t) {
  if (!t.has_grad()) return 0.0;
  double s = 0.0;
  for (float g : t.grad()) s += double(g) * g;
  return std::sqrt(s);
}

[[noreturn]] void numerical_abort(const std::string& what, const ParamStore& store, double lr,
                                  std::size_t step) {
  std::string msg = what + " at step " + std::to_string(step) + " (lr " + format_double(lr) +
                    "); gradient norms:";
  for (const auto& e : store.entries()) {
    if (!e.learnable) continue;
    char buf[64];
    std::snprintf(buf, sizeof buf, " %.4g", grad_norm(e.tensor));
    msg += " " + e.name + "=" + buf;
  }
  throw NumericalError(msg);
}

}  // namespace

TrainResult train(const RunConfig& config, const Dataset& dataset, const TrainHooks& hooks) {
  const auto& tc = config.train;
  TrainResult result{Model(config.model), std::nullopt, {}, 0.0, 0};
  Model& model = result.final_model;
  std::vector<std::size_t> train_rows;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset.splits[i] == Split::kTrain) train_rows.push_back(i);
  }
  if (tc.epochs > 0 && train_rows.empty()) throw ConfigError("the dataset has no training split");
  const auto val = dataset.select(Split::kVal);
  const Rng base(config.model.seed);
  Rng shuffle_rng = base.split(101), augment_rng = base.split(102), dropout_rng = base.split(103);
  const LrSchedule schedule{tc.lr, tc.lr_decay_rate, tc.lr_decay_step, tc.lr_staircase};
  AdamState adam;
  const auto learnable = model.params().learnable();
  double best_score = -1.0;
  if (hooks.csv) *hooks.csv << kEpochCsvHeader << '\n';

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto order = train_rows;
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t hits = 0, seen = 0;
    double lr = schedule(result.steps * tc.batch_size);
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      if (hooks.max_steps && result.steps >= hooks.max_steps) break;
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      std::vector<PointCloud> batch;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(rotate_and_jitter(dataset.clouds[order[i]], tc.augment.train, 0.0, augment_rng));
      }
      const auto labels = batch_labels(batch, config.model);
      lr = schedule(result.steps * tc.batch_size);

      Tape tape;
      Tensor loss, logits;
      {
        TapeScope scope(tape);
        ForwardOptions fo;
        fo.mode = Mode::kTrain;
        fo.rng = &dropout_rng;
        logits = model.forward(batch, fo);
        loss = cross_entropy(logits, labels);
      }
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        numerical_abort("loss became " + format_double(loss_value), model.params(), lr, result.steps);
      }
      tape.backward(loss);
      for (const auto& p : learnable) {
        if (!std::isfinite(grad_norm(p))) {
          numerical_abort("non-finite gradient", model.params(), lr, result.steps);
        }
      }
      adam_step(learnable, adam, lr);
      model.params().zero_grad();
      if (result.steps == 0) result.initial_loss = loss_value;
      ++result.steps;

      const auto pred = argmax_rows(logits);
      for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
      loss_sum += loss_value * double(labels.size());
      seen += labels.size();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = seen ? loss_sum / double(seen) : 0.0;
    rec.train_accuracy = seen ? double(hits) / double(seen) : 0.0;
    rec.lr = lr;
    double score = rec.train_accuracy;
    if (!val.empty()) {
      const Metrics vm = evaluate(model, val, tc.augment.test, 0.0, config.model.seed + 7 + epoch,
                                  tc.eval_batch_size);
      rec.val_accuracy = vm.accuracy;
      rec.val_miou = vm.miou;
      score = config.model.task == Task::kSegment ? vm.miou : vm.accuracy;
      if (score > best_score) {
        best_score = score;
        result.best = model.to_checkpoint();
      }
    }
    rec.seconds = seconds_since(t0);
    result.epochs.push_back(rec);
    if (hooks.csv) *hooks.csv << epoch_csv_line(rec) << std::endl;
    if (hooks.log) {
      char buf[200];
      std::snprintf(buf, sizeof buf,
                    "epoch %zu  loss %.5f  train_acc %.4f  val_acc %.4f  val_miou %.4f  lr %.3g  %.1fs",
                    epoch, rec.train_loss, rec.train_accuracy, rec.val_accuracy, rec.val_miou,
                    rec.lr, rec.seconds);
      *hooks.log << buf << std::endl;
    }
    if (hooks.max_steps && result.steps >= hooks.max_steps) break;
  }
  return result;
}

namespace {

class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c == EOF) return !EOF;
    if (a_) a_->sputc(static_cast<char>(c));
    if (b_) b_->sputc(static_cast<char>(c));
    return c;
  }
  int sync() override {
    if (a_) a_->pubsync();
    if (b_) b_->pubsync();
    return 0;
  }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

}  // namespace

TrainResult train_to_directory(const RunConfig& config, const Dataset& dataset,
                               std::ostream* progress) {
  namespace fs = std::filesystem;
  const fs::path dir(config.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream run_log(dir / "run.log");
  std::ofstream csv(dir / "log.csv");
  if (!run_log || !csv) throw IoError("cannot write logs in " + dir.string());
  TeeBuf tee(run_log.rdbuf(), progress ? progress->rdbuf() : nullptr);
  std::ostream log(&tee);
  log << "# effective config\n" << config.to_text();
  log << "# dataset: " << dataset.size() << " clouds, " << dataset.class_names.size()
      << " classes, train " << dataset.count(Split::kTrain) << ", val "
      << dataset.count(Split::kVal) << ", test " << dataset.count(Split::kTest) << "\n";
  log << "# parameters: " << Model(config.model).params().learnable_count() << std::endl;
  std::size_t degenerate = 0;
  for (const auto& c : dataset.clouds) degenerate += pca_normalize(center_and_scale(c)).degenerate;
  if (degenerate) {
    log << "# warning: " << degenerate
        << " clouds have near-equal principal variances; their PCA frame is unstable" << std::endl;
  }
  TrainHooks hooks;
  hooks.log = &log;
  hooks.csv = &csv;
  TrainResult r = [&] {
    try {
      return train(config, dataset, hooks);
    } catch (const NumericalError& e) {
      log << "aborted: " << e.what() << std::endl;
      throw;
    }
  }();
  const Checkpoint final_ckpt = r.final_model.to_checkpoint();
  write_checkpoint(dir / "final.prinv", final_ckpt);
  write_checkpoint(dir / "best.prinv", r.best ? *r.best : final_ckpt);
  if (!r.epochs.empty()) {
    log << "final loss " << format_double(r.epochs.back().train_loss) << std::endl;
  }
  const auto test = dataset.select(Split::kTest);
  if (!test.empty()) {
    const Model scored = r.best ? Model::from_checkpoint(*r.best) : r.final_model;
    const Metrics tm = evaluate(scored, test, config.train.augment.test, config.train.noise,
                                config.model.seed + 99, config.train.eval_batch_size);
    log << "test accuracy " << format_double(tm.accuracy);
    if (config.model.task == Task::kSegment) log << "  mIoU " << format_double(tm.miou);
    log << std::endl;
  }
  return r;
}

}  // namespace prinv
