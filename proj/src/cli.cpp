#include "prinv/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "prinv/error.hpp"
#include "prinv/io.hpp"
#include "prinv/pipeline.hpp"

namespace prinv {

namespace {

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string data;
};

void add_config_flags(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.config_path, "key = value config file");
  cmd->add_option("--set", a.overrides, "override a config key (key=value), repeatable");
  cmd->add_option("--data", a.data, "dataset: 'synth' or a directory <root>/<class>/*.xyz|*.off");
}

KeyValues gather_items(const ConfigArgs& a) {
  KeyValues items;
  if (!a.config_path.empty()) items = parse_key_values(read_text_file(a.config_path));
  for (const auto& o : a.overrides) items.push_back(parse_assignment(o));
  if (!a.data.empty()) items.emplace_back("data", a.data);
  return items;
}

// Pipeline settings for commands whose model comes from a checkpoint. Model
// keys are validated but the checkpoint's values win.
RunConfig pipeline_config(const ConfigArgs& a) { return RunConfig::from_items(gather_items(a)); }

Model load_model(const std::string& path) {
  if (path.empty()) throw IoError("no checkpoint given (--checkpoint)");
  return Model::from_checkpoint(read_checkpoint(path));
}

std::vector<PointCloud> pick_split(const Dataset& d, const std::string& split,
                                   std::vector<std::string>* sources) {
  if (split != "all") parse_split(split);
  std::vector<PointCloud> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (split == "all" || to_string(d.splits[i]) == split) {
      out.push_back(d.clouds[i]);
      if (sources) sources->push_back(d.sources[i]);
    }
  }
  return out;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  return f;
}

int cmd_train(const ConfigArgs& a, const std::string& out_dir, std::ostream& out) {
  KeyValues items = gather_items(a);
  if (!out_dir.empty()) items.emplace_back("out_dir", out_dir);
  const RunConfig config = RunConfig::from_items(items);
  const Dataset dataset = load_dataset(config.data);
  const TrainResult r = train_to_directory(config, dataset, &out);
  out << "wrote " << (std::filesystem::path(config.out_dir) / "final.prinv").string() << " after "
      << r.steps << " steps\n";
  return kExitOk;
}

int cmd_eval(const ConfigArgs& a, const std::string& checkpoint, const std::string& split,
             const std::string& rotation, std::ostream& out) {
  const RunConfig config = pipeline_config(a);
  const Model model = load_model(checkpoint);
  const Dataset dataset = load_dataset(config.data);
  const auto clouds = pick_split(dataset, split, nullptr);
  if (clouds.empty()) throw IoError("split '" + split + "' is empty");
  const RotationMode mode = rotation.empty() ? config.train.augment.test : parse_rotation_mode(rotation);
  const Metrics m = evaluate(model, clouds, mode, config.train.noise, model.config().seed + 99,
                             config.train.eval_batch_size);
  char buf[200];
  std::snprintf(buf, sizeof buf, "shapes %zu  rotation %s  noise %g  loss %.6f  accuracy %.6f",
                m.count, to_string(mode).c_str(), config.train.noise, m.loss, m.accuracy);
  out << buf;
  if (model.config().task == Task::kSegment) {
    std::snprintf(buf, sizeof buf, "  mIoU %.6f", m.miou);
    out << buf;
  }
  out << '\n';
  return kExitOk;
}

int cmd_verify(const ConfigArgs& a, const std::string& checkpoint, const std::string& split,
               const InvarianceOptions& options, const std::string& csv_path, std::ostream& out) {
  const RunConfig config = pipeline_config(a);
  const Model model = load_model(checkpoint);
  const Dataset dataset = load_dataset(config.data);
  std::vector<std::string> sources;
  const auto clouds = pick_split(dataset, split, &sources);
  if (clouds.empty()) throw IoError("no shapes to verify in split '" + split + "'");
  const InvarianceReport report = verify_invariance(model, clouds, options, sources);
  print_residual_table(out, report);
  if (!csv_path.empty()) {
    auto f = open_out(csv_path);
    write_residual_csv(f, report);
  }
  if (report.checked == 0) {
    out << "every shape was filtered as degenerate\n";
    return kExitUsage;
  }
  return report.passed() ? kExitOk : kExitVerifyFailed;
}

int cmd_features(const std::string& checkpoint, const std::string& cloud_path, std::size_t points,
                 std::size_t stage, const std::string& geo_csv, const std::string& pose_csv,
                 std::ostream& out, std::ostream& err) {
  const Model model = load_model(checkpoint);
  Rng rng(model.config().seed);
  const PointCloud cloud = load_cloud(cloud_path, points, rng);
  if (pca_normalize(center_and_scale(cloud)).degenerate) {
    err << "warning: near-equal principal variances, the pose frame of this cloud is unstable\n";
  }
  ForwardTrace trace;
  ForwardOptions fo;
  fo.trace = &trace;
  Tensor logits;
  {
    NoGradScope untaped;
    logits = model.forward({cloud}, fo);
  }
  const ShapeGeometry& g = trace.geometry.front();
  char buf[64];
  if (!geo_csv.empty()) {
    const auto& level = g.levels.front();
    if (level.geo.empty()) throw ConfigError("this model does not compute geometric features");
    const std::size_t n = g.order.size(), w = level.geo.size() / n;
    std::vector<std::size_t> canonical(n);
    for (std::size_t r = 0; r < n; ++r) canonical[g.order[r]] = r;
    auto f = open_out(geo_csv);
    f << "point";
    for (std::size_t c = 0; c < w; ++c) f << ",g" << c;
    f << '\n';
    for (std::size_t i = 0; i < n; ++i) {
      f << i;
      for (std::size_t c = 0; c < w; ++c) {
        std::snprintf(buf, sizeof buf, ",%.7g", level.geo[canonical[i] * w + c]);
        f << buf;
      }
      f << '\n';
    }
  }
  if (stage == 0 || stage > trace.poses.size()) {
    if (!pose_csv.empty() || stage != 1) {
      throw ConfigError("stage " + std::to_string(stage) + " has no pose selector (model has " +
                        std::to_string(trace.poses.size()) + " selecting stages)");
    }
  } else {
    const PfeShapeTrace& pt = trace.poses[stage - 1].front();
    out << "stage " << stage << " poses " << pt.space.size() << " selected " << pt.selected << '\n';
    if (!pose_csv.empty()) {
      auto f = open_out(pose_csv);
      const std::size_t heads = pt.scores.empty() ? 0 : pt.scores.front().scores.size();
      f << "pose,selected,best_score,head";
      for (int e = 0; e < 9; ++e) f << ",t" << e / 3 << e % 3;
      for (std::size_t h = 0; h < heads; ++h) f << ",s" << h;
      f << '\n';
      for (std::size_t p = 0; p < pt.space.size(); ++p) {
        const auto& s = pt.scores[p];
        std::snprintf(buf, sizeof buf, "%.7g", s.best);
        f << p << ',' << (p == pt.selected ? 1 : 0) << ',' << buf << ',' << s.head;
        for (double v : pt.space.poses[p].transform.m) {
          std::snprintf(buf, sizeof buf, ",%.7g", v);
          f << buf;
        }
        for (float v : s.scores) {
          std::snprintf(buf, sizeof buf, ",%.7g", v);
          f << buf;
        }
        f << '\n';
      }
    }
  }
  const auto pred = argmax_rows(logits);
  if (model.config().task == Task::kClassify) out << "predicted class " << pred.front() << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rotation-invariant point cloud network: train, evaluate, verify, inspect"};
  app.name("prinv");
  app.require_subcommand(1);

  ConfigArgs train_args, eval_args, verify_args;
  std::string out_dir, checkpoint, split = "test", rotation, csv_path, cloud_path, geo_csv,
                                    pose_csv;
  InvarianceOptions inv;
  std::size_t points = kDefaultPointCount, stage = 1;

  auto* train = app.add_subcommand("train", "train a model; writes checkpoints and logs");
  add_config_flags(train, train_args);
  train->add_option("--out", out_dir, "output directory (overrides out_dir)");

  auto* eval = app.add_subcommand("eval", "accuracy (and mIoU) of a checkpoint on a split");
  add_config_flags(eval, eval_args);
  eval->add_option("--checkpoint", checkpoint, "PRINV1 checkpoint")->required();
  eval->add_option("--split", split, "train, val, test or all")->capture_default_str();
  eval->add_option("--rotation", rotation, "none, z or SO3 (default: test half of augment)");

  auto* verify = app.add_subcommand("verify-invariance",
                                    "check that outputs do not change under random rotations");
  add_config_flags(verify, verify_args);
  verify->add_option("--checkpoint", checkpoint, "PRINV1 checkpoint")->required();
  verify->add_option("--split", split, "train, val, test or all")->capture_default_str();
  verify->add_option("--rotations", inv.rotations, "rotations per shape")->capture_default_str();
  verify->add_option("--tolerance", inv.tolerance, "max abs residual")->capture_default_str();
  verify->add_option("--seed", inv.seed, "rotation seed")->capture_default_str();
  verify->add_option("--residual-csv", csv_path, "write per-shape residuals as CSV");
  verify->add_flag("--break-selector", inv.break_selector,
                   "debug: feed input-frame coordinates to the extractor");

  auto* features = app.add_subcommand("features", "dump geometric features and pose scores");
  features->add_option("--checkpoint", checkpoint, "PRINV1 checkpoint")->required();
  features->add_option("--cloud", cloud_path, ".xyz or .off file")->required();
  features->add_option("--points", points, "points sampled from .off meshes")->capture_default_str();
  features->add_option("--stage", stage, "stage whose pose scores are dumped")->capture_default_str();
  features->add_option("--geo-csv", geo_csv, "per-point geometric features");
  features->add_option("--dump-pose-scores", pose_csv, "per-pose selector scores");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    if (auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front()) {
      err << sub->help();
    } else {
      err << app.help();
    }
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(train_args, out_dir, out);
    if (*eval) return cmd_eval(eval_args, checkpoint, split, rotation, out);
    if (*verify) return cmd_verify(verify_args, checkpoint, split, inv, csv_path, out);
    if (*features) return cmd_features(checkpoint, cloud_path, points, stage, geo_csv, pose_csv, out, err);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace prinv
