#include "doctest.h"
#include "support.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "prinv/cli.hpp"
#include "prinv/pipeline.hpp"

using namespace prinv;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("prinv_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig small_model(RotationGroup group) {
  ModelConfig c;
  c.num_classes = 4;
  c.init_width = 8;
  c.stages = {8, 16};
  c.heads = 4;
  c.selector_hidden = 8;
  c.head_widths = {16};
  c.k_neighbors = 8;
  c.rotation_group = group;
  return c;
}

std::string save_model(const fs::path& dir, const ModelConfig& c) {
  const auto path = dir / "model.prinv";
  write_checkpoint(path, Model(c).to_checkpoint());
  return path.string();
}

const std::vector<std::string> kSmallData = {"--data", "synth", "--set", "n_per_class=3", "--set",
                                             "points=64"};

std::vector<std::string> with_data(std::vector<std::string> args) {
  args.insert(args.end(), kSmallData.begin(), kSmallData.end());
  return args;
}

std::vector<std::vector<double>> read_csv_numbers(const fs::path& path, std::string* header) {
  std::ifstream f(path);
  std::getline(f, *header);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<double> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

double max_csv_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  REQUIRE(a.size() == b.size());
  double d = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r) {
    REQUIRE(a[r].size() == b[r].size());
    for (std::size_t c = 0; c < a[r].size(); ++c) d = std::max(d, std::abs(a[r][c] - b[r][c]));
  }
  return d;
}

std::string final_loss_line(const fs::path& log) {
  std::ifstream f(log);
  std::string line;
  while (std::getline(f, line)) {
    if (line.rfind("final loss", 0) == 0) return line;
  }
  return {};
}

}  // namespace

TEST_CASE("usage errors and help") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"fly"}).code == kExitUsage);
  const Run help = cli({"--help"});
  CHECK(help.code == kExitOk);
  for (const char* sub : {"train", "eval", "verify-invariance", "features"}) {
    CHECK(help.out.find(sub) != std::string::npos);
  }
  const Run sub = cli({"verify-invariance", "--help"});
  CHECK(sub.code == kExitOk);
  CHECK(sub.out.find("--break-selector") != std::string::npos);
  CHECK(sub.out.find("--rotations") != std::string::npos);
  CHECK(cli({"eval"}).code == kExitUsage);
  CHECK(cli({"train", "--bogus"}).code == kExitUsage);
}

TEST_CASE("train rejects bad configuration before doing work") {
  const fs::path dir = scratch_dir("badcfg");
  CHECK(cli({"train", "--set", "epochz=1", "--out", dir.string()}).code == kExitUsage);
  CHECK(cli({"train", "--set", "epochs", "--out", dir.string()}).code == kExitUsage);
  CHECK(cli({"train", "--set", "stages=8,", "--out", dir.string()}).code == kExitUsage);
  CHECK(cli({"train", "--config", (dir / "missing.cfg").string()}).code == kExitUsage);
  CHECK_FALSE(fs::exists(dir / "final.prinv"));
  fs::remove_all(dir);
}

TEST_CASE("train from the base config, then eval and verify the checkpoint") {
  const fs::path dir = scratch_dir("train");
  const std::string cfg = std::string(PRINV_SOURCE_DIR) + "/configs/base.cfg";
  const std::vector<std::string> small = {
      "--set", "epochs=1",   "--set", "stages=8,16", "--set", "init_width=8",
      "--set", "heads=4",    "--set", "points=64",   "--set", "n_per_class=3",
      "--set", "k_neighbors=8", "--set", "rotation_group=A4"};
  auto args = std::vector<std::string>{"train", "--config", cfg, "--out", dir.string()};
  args.insert(args.end(), small.begin(), small.end());
  const Run first = cli(args);
  INFO(first.err);
  REQUIRE(first.code == kExitOk);
  for (const char* f : {"final.prinv", "best.prinv", "log.csv", "run.log"}) CHECK(fs::exists(dir / f));
  const std::string log = read_text_file((dir / "run.log").string());
  CHECK(log.find("heads = 4") != std::string::npos);
  CHECK(log.find("lr_decay_step = 200000") != std::string::npos);
  const std::string loss = final_loss_line(dir / "run.log");
  CHECK_FALSE(loss.empty());

  const fs::path again = scratch_dir("train_again");
  args[4] = again.string();
  REQUIRE(cli(args).code == kExitOk);
  CHECK(final_loss_line(again / "run.log") == loss);

  const std::string ckpt = (dir / "final.prinv").string();
  const Run eval = cli(with_data({"eval", "--checkpoint", ckpt, "--split", "all"}));
  INFO(eval.err);
  CHECK(eval.code == kExitOk);
  CHECK(eval.out.find("shapes 12") != std::string::npos);
  CHECK(eval.out.find("accuracy") != std::string::npos);

  const Run verify = cli(with_data({"verify-invariance", "--checkpoint", ckpt, "--split", "all",
                                    "--rotations", "3", "--residual-csv", (dir / "res.csv").string()}));
  INFO(verify.out << verify.err);
  CHECK(verify.code == kExitOk);
  CHECK(fs::exists(dir / "res.csv"));
  fs::remove_all(dir);
  fs::remove_all(again);
}

TEST_CASE("verify-invariance exit codes") {
  const fs::path dir = scratch_dir("verify");
  const std::string ckpt = save_model(dir, small_model(RotationGroup::kA4));
  const Run ok = cli(with_data({"verify-invariance", "--checkpoint", ckpt, "--rotations", "5"}));
  INFO(ok.out << ok.err);
  CHECK(ok.code == kExitOk);

  const Run broken = cli(with_data({"verify-invariance", "--checkpoint", ckpt, "--rotations", "5",
                                    "--break-selector", "--split", "all"}));
  INFO(broken.out);
  CHECK(broken.code == kExitVerifyFailed);

  CHECK(cli(with_data({"verify-invariance", "--checkpoint", (dir / "nope.prinv").string()})).code ==
        kExitUsage);
  fs::create_directories(dir / "empty");
  CHECK(cli({"verify-invariance", "--checkpoint", ckpt, "--data", (dir / "empty").string()}).code ==
        kExitUsage);
  fs::remove_all(dir);
}

TEST_CASE("feature dumps") {
  const fs::path dir = scratch_dir("features");
  ModelConfig mc = small_model(RotationGroup::kA5);
  const std::string ckpt = save_model(dir, mc);
  Rng rng(9);
  const PointCloud cloud = test::blob(rng, 96);
  PointCloud rotated = cloud;
  const Mat3 r = test::haar_rotation(rng);
  for (auto& p : rotated.points) p = p * r;
  for (const auto& [name, c] : {std::pair{"a.xyz", cloud}, std::pair{"b.xyz", rotated}}) {
    std::ofstream f(dir / name);
    write_xyz(f, c);
  }
  auto dump = [&](const std::string& tag) {
    return cli({"features", "--checkpoint", ckpt, "--cloud", (dir / (tag + ".xyz")).string(),
                "--geo-csv", (dir / (tag + "_geo.csv")).string(), "--dump-pose-scores",
                (dir / (tag + "_pose.csv")).string()});
  };
  const Run a = dump("a"), b = dump("b");
  INFO(a.err);
  REQUIRE(a.code == kExitOk);
  REQUIRE(b.code == kExitOk);
  CHECK(a.out.find("poses 120") != std::string::npos);

  std::string geo_header, pose_header, h2;
  const auto geo_a = read_csv_numbers(dir / "a_geo.csv", &geo_header);
  const auto geo_b = read_csv_numbers(dir / "b_geo.csv", &h2);
  CHECK(geo_a.size() == 96);
  CHECK(geo_a.front().size() == 98);
  CHECK(geo_header.rfind("point,g0,", 0) == 0);
  CHECK(max_csv_diff(geo_a, geo_b) < 1e-5);

  const auto pose_a = read_csv_numbers(dir / "a_pose.csv", &pose_header);
  const auto pose_b = read_csv_numbers(dir / "b_pose.csv", &h2);
  CHECK(pose_a.size() == 120);
  CHECK(pose_a.front().size() == 4 + 9 + mc.heads);
  // Transforms are relative to the PCA frame, whose axis signs depend on the
  // input orientation; the poses they produce and their scores do not.
  auto drop_transform = [](std::vector<std::vector<double>> rows) {
    for (auto& r : rows) r.erase(r.begin() + 4, r.begin() + 13);
    return rows;
  };
  CHECK(max_csv_diff(drop_transform(pose_a), drop_transform(pose_b)) < 1e-5);
  int selected = 0;
  for (const auto& row : pose_a) selected += int(row[1]);
  CHECK(selected == 1);

  CHECK(cli({"features", "--checkpoint", ckpt, "--cloud", (dir / "missing.xyz").string()}).code ==
        kExitUsage);
  CHECK(cli({"features", "--checkpoint", ckpt, "--cloud", (dir / "a.xyz").string(), "--stage", "9",
             "--dump-pose-scores", (dir / "x.csv").string()})
            .code == kExitUsage);
  fs::remove_all(dir);
}

TEST_CASE("a diverging run exits with the numerical code") {
  const fs::path dir = scratch_dir("nan");
  const Run r = cli(with_data({"train", "--out", dir.string(), "--set", "lr=1e30", "--set", "stages=8",
                               "--set", "init_width=8", "--set", "heads=4", "--set", "k_neighbors=8",
                               "--set", "rotation_group=A4", "--set", "epochs=3"}));
  CHECK(r.code == kExitNumerical);
  CHECK(read_text_file((dir / "run.log").string()).find("aborted") != std::string::npos);
  fs::remove_all(dir);
}
