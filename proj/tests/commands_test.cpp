#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hiermem/commands.hpp"
#include "hiermem/error.hpp"

using namespace hiermem;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "hiermem_commands_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig tiny() {
  RunConfig c;
  apply_overrides(c, {"data.image_size=8", "data.train_classes=8", "data.test_classes=6", "data.images_per_class=8",
                      "backbone.levels=2", "backbone.channels=3,4", "backbone.embed_dims=5,5",
                      "model.infer_hidden=10", "model.hyper_hidden=3", "train.episodes=12", "train.way=3",
                      "train.shot=2", "train.queries=2", "train.lz=2", "eval.tasks=10", "eval.way=3",
                      "eval.shot=2", "eval.queries=3"});
  return c;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(HIERMEM_CLI) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(RunConfig, EntriesRoundTrip) {
  RunConfig c = tiny();
  apply_overrides(c, {"train.objective=vsm", "train.lr=0.0123456789", "ablate.shifts=0,0.3",
                      "ablate.objectives=hvm,proto", "ablate.seeds=4,5", "data.phase_jitter=0.25"});
  std::string text;
  for (const auto& [k, v] : c.entries()) text += k + " = " + v + "\n";
  RunConfig back = parse_run_config(text);
  back.resolve();
  EXPECT_EQ(back.entries(), c.entries());
  EXPECT_EQ(back.train.lr, 0.0123456789);
  EXPECT_EQ(back.train.objective, Objective::kVsm);
  EXPECT_EQ(back.seeds, (std::vector<std::uint64_t>{4, 5}));
}

TEST(RunConfig, HeightFollowsImageSizeUnlessSet) {
  RunConfig c;
  apply_overrides(c, {"data.image_size=24"});
  EXPECT_EQ(c.model.backbone.height, 24u);
  EXPECT_EQ(c.model.backbone.width, 24u);
  RunConfig d;
  EXPECT_THROW(apply_overrides(d, {"data.image_size=24", "backbone.height=16", "backbone.levels=9",
                                   "backbone.channels=1,1,1,1,1,1,1,1,1", "backbone.embed_dims=1,1,1,1,1,1,1,1,1"}),
               ConfigError);
}

TEST(RunConfig, RejectsBadKeysAndValues) {
  RunConfig c;
  EXPECT_THROW(c.set("train.nope", "1"), ConfigError);
  EXPECT_THROW(c.set("nosection", "1"), ConfigError);
  EXPECT_THROW(c.set("train.lr", "fast"), ConfigError);
  EXPECT_THROW(c.set("train.episodes", "-3"), ConfigError);
  EXPECT_THROW(c.set("train.mask_own_classes", "maybe"), ConfigError);
  EXPECT_THROW(apply_overrides(c, {"train.lr"}), ConfigError);
  EXPECT_THROW(apply_overrides(c, {"eval.tasks=1"}), ConfigError);
  EXPECT_THROW(apply_overrides(c, {"ablate.shifts=0,1.5"}), ConfigError);
  EXPECT_THROW(parse_run_config("train.lr 0.1\n"), ConfigError);
  try {
    c.set("data.frobnicate", "2");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("data.frobnicate"), std::string::npos);
  }
}

TEST(RunConfig, MissingFileIsConfigError) {
  EXPECT_THROW(load_run_config("/nonexistent/hiermem.cfg"), ConfigError);
}

TEST(Commands, ReplayFromResolvedConfigIsByteIdentical) {
  const RunConfig c = tiny();
  const fs::path a = scratch("replay_a"), b = scratch("replay_b");
  run_train(c, a);
  run_eval(c, a / "model", a);
  RunConfig replay = load_run_config(a / "config.txt");
  replay.resolve();
  EXPECT_EQ(replay.entries(), c.entries());
  run_train(replay, b);
  run_eval(replay, b / "model", b);
  for (const char* f : {"config.txt", "train.log", "metrics.txt", "prototypes.txt", "model.bin", "model.memory.bin"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    EXPECT_FALSE(slurp(a / f).empty()) << f;
  }
}

TEST(Commands, MetricsMeanRecomputableFromTaskLines) {
  const RunConfig c = tiny();
  const fs::path d = scratch("metrics");
  run_train(c, d);
  const EvalResult r = run_eval(c, d / "model", d);
  std::ifstream in(d / "metrics.txt");
  std::string line;
  double sum_w = 0, sum_b = 0, mean_w = -1;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "task") {
      std::size_t i;
      double w, b;
      ls >> i >> w >> b;
      EXPECT_EQ(i, n);
      sum_w += w, sum_b += b, ++n;
    } else if (tag == "summary") {
      std::string which;
      double m;
      ls >> which >> m;
      if (which == "weighted") mean_w = m;
    }
  }
  ASSERT_EQ(n, c.eval.tasks);
  EXPECT_NEAR(sum_w / n, mean_w, 1e-12);
  EXPECT_NEAR(sum_w / n, r.weighted.mean, 1e-12);
  EXPECT_NEAR(sum_b / n, r.bagging.mean, 1e-12);
}

TEST(Commands, CheckpointShapeMismatchIsShapeError) {
  const RunConfig c = tiny();
  const fs::path d = scratch("mismatch");
  run_train(c, d);
  RunConfig wider = c;
  apply_overrides(wider, {"backbone.embed_dims=6,6"});
  EXPECT_THROW(run_eval(wider, d / "model", d / "out"), ShapeError);
  RunConfig deeper = c;
  apply_overrides(deeper, {"backbone.levels=3", "backbone.channels=3,4,4", "backbone.embed_dims=5,5,5"});
  EXPECT_THROW(run_eval(deeper, d / "model", d / "out"), ShapeError);
}

TEST(Commands, PeriodicCheckpoints) {
  RunConfig c = tiny();
  apply_overrides(c, {"run.checkpoint_every=5"});
  const fs::path d = scratch("ckpt");
  run_train(c, d);
  EXPECT_TRUE(fs::exists(d / "ckpt_5.bin"));
  EXPECT_TRUE(fs::exists(d / "ckpt_10.memory.bin"));
  EXPECT_FALSE(fs::exists(d / "ckpt_12.bin"));
}

TEST(Commands, AblationTableHasEveryCell) {
  RunConfig c = tiny();
  apply_overrides(c, {"ablate.shifts=0,1", "ablate.objectives=proto,hvm", "ablate.seeds=1,2", "train.episodes=4"});
  const fs::path d = scratch("ablate");
  const auto cells = run_ablate(c, d);
  ASSERT_EQ(cells.size(), 8u);
  const std::string table = slurp(d / "ablate.txt");
  EXPECT_NE(table.find("cell 2 1 hvm weighted"), std::string::npos);
  EXPECT_NE(table.find("avg 0 proto bagging"), std::string::npos);
  // A cell replays with the plain train + eval path.
  const RunConfig cell = cell_config(c, 2, Objective::kHvm, 1.0);
  const fs::path r = scratch("ablate_replay");
  run_train(cell, r);
  run_eval(cell, r / "model", r);
  EXPECT_EQ(slurp(r / "metrics.txt"), slurp(d / "seed2_hvm" / "shift_1" / "metrics.txt"));
}

TEST(Cli, ExitCodes) {
  const fs::path d = scratch("cli");
  const std::string small = "-s data.image_size=8 -s backbone.levels=2 -s backbone.channels=3,4 "
                            "-s backbone.embed_dims=5,5 -s data.images_per_class=20 -s train.episodes=3 "
                            "-s eval.tasks=4";
  EXPECT_EQ(cli(""), kExitConfig);
  EXPECT_EQ(cli("train"), kExitConfig);
  EXPECT_EQ(cli("train -o " + (d / "x").string() + " -s train.bogus=1"), kExitConfig);
  EXPECT_EQ(cli("train -o " + (d / "x").string() + " -c /nonexistent.cfg"), kExitConfig);
  EXPECT_EQ(cli("train -o " + (d / "run").string() + " " + small), kExitOk);
  EXPECT_EQ(cli("eval -r " + (d / "run").string()), kExitOk);
  EXPECT_EQ(cli("eval -r " + (d / "run").string() + " -n 1"), kExitConfig);
  EXPECT_EQ(cli("eval -r " + (d / "run").string() + " -s backbone.embed_dims=7,7"), kExitConfig);
  EXPECT_EQ(cli("train -o " + (d / "div").string() + " " + small + " -s train.lr=1e9 -s train.clip_norm=0"),
            kExitDiverged);
  EXPECT_TRUE(fs::exists(d / "div" / "model.bin"));
}
