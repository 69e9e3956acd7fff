#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "sylph/config.hpp"

using namespace sylph;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int status = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("sylph_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Outcome run_cli(const std::string& args, const fs::path& cwd, const std::string& env = "") {
  const auto err_file = cwd / "stderr.txt";
  const std::string cmd =
      "cd '" + cwd.string() + "' && " + env + " '" + SYLPH_CLI + "' " + args + " 2> '" + err_file.string() + "'";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return o;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) o.out += buf;
  const int raw = pclose(pipe);
  o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  o.err = slurp(err_file);
  return o;
}

const std::string kSmall =
    "--set dataset.n_classes=12 dataset.base_class_count=8 dataset.image_size=[48,48] dataset.glyph_size=[12,24] "
    "detector.channels=8 detector.gn_groups=2 hypernet.feature_channels=8 hypernet.code_channels=8 "
    "hypernet.gn_groups=2 train.pretrain.steps=40 train.pretrain.decay_steps=[] train.pretrain.batch=4 "
    "train.meta.steps=20 train.meta.decay_steps=[] eval.shots=5";

}  // namespace

// -------------------------------------------------------------- RunConfig

TEST(RunConfig, EmptyDocumentGivesDefaults) {
  EXPECT_EQ(parse_run_config(nlohmann::json::object()), RunConfig{});
  const RunConfig d;
  EXPECT_EQ(d.dataset.n_classes, 40);
  EXPECT_EQ(d.dataset.base_class_count, 30);
  EXPECT_EQ(d.train.pretrain.steps, 5000);
  EXPECT_EQ(d.train.meta.steps, 3000);
  EXPECT_EQ(d.eval.runs, 5u);
  EXPECT_EQ(d.eval.shots, 10u);
}

TEST(RunConfig, EchoedConfigParsesBackToItself) {
  RunConfig c;
  c.seed = 12;
  c.dataset.n_classes = 20;
  c.dataset.base_class_count = 15;
  c.hypernet.use_l2 = false;
  c.train.grad_clip_norm.reset();
  c.train.meta.decay_steps = {100};
  c.eval.seeds = {4, 5};
  c.paths.data = "/tmp/d";
  EXPECT_EQ(parse_run_config(to_json_config(c)), c);
  EXPECT_EQ(parse_run_config(to_json_config(RunConfig{})), RunConfig{});
}

TEST(RunConfig, EveryUnknownKeyReportedAtOnce) {
  const auto j = nlohmann::json::parse(
      R"({"bogus": 1, "dataset": {"colour": "red"}, "train": {"meta": {"shots": 3}}, "eval": {"iou": 0.5}})");
  try {
    parse_run_config(j);
    FAIL();
  } catch (const ConfigError& e) {
    const std::vector<std::string> expected{"unknown key bogus", "unknown key dataset.colour",
                                            "unknown key train.meta.shots", "unknown key eval.iou"};
    for (const auto& key : expected) {
      EXPECT_NE(std::find(e.problems().begin(), e.problems().end(), key), e.problems().end()) << key;
    }
    EXPECT_EQ(e.problems().size(), expected.size());
  }
}

TEST(RunConfig, TypeAndRangeProblemsCollectedTogether) {
  const auto j = nlohmann::json::parse(
      R"({"detector": {"channels": "wide"}, "eval": {"nms_iou": 1.5}, "train": {"pretrain": {"lr": -1}},
          "dataset": {"image_size": [96]}})");
  try {
    parse_run_config(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_GE(e.problems().size(), 4u);
    const std::string all = e.what();
    for (const char* key : {"detector.channels", "eval.nms_iou", "learning rates", "dataset.image_size"}) {
      EXPECT_NE(all.find(key), std::string::npos) << key;
    }
  }
}

TEST(RunConfig, HypernetworkWidthMustMatchDetector) {
  EXPECT_THROW(parse_run_config(nlohmann::json::parse(R"({"detector": {"channels": 32}})")), ConfigError);
  EXPECT_NO_THROW(parse_run_config(nlohmann::json::parse(
      R"({"detector": {"channels": 32, "gn_groups": 8},
          "hypernet": {"feature_channels": 32, "code_channels": 32, "gn_groups": 8}})")));
}

TEST(RunConfig, SeedEnvironmentOverride) {
  RunConfig c;
  c.seed = 3;
  ::setenv("SYLPH_SEED", "41", 1);
  apply_seed_env(c);
  EXPECT_EQ(c.seed, 41u);
  ::setenv("SYLPH_SEED", "forty", 1);
  EXPECT_THROW(apply_seed_env(c), std::invalid_argument);
  ::unsetenv("SYLPH_SEED");
  apply_seed_env(c);
  EXPECT_EQ(c.seed, 41u);
}

TEST(RunConfig, MalformedFileReportsPathAndOffset) {
  const auto dir = scratch("malformed");
  const auto path = (dir / "bad.json").string();
  std::ofstream(path) << "{\"seed\": 1,, }";
  try {
    load_run_config(path);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.path(), path);
    EXPECT_EQ(e.offset(), 11u);
  }
  EXPECT_THROW(load_run_config((dir / "absent.json").string()), std::runtime_error);
}

// --------------------------------------------------------------------- CLI

TEST(Cli, GradcheckAllPassesAndListsEveryOp) {
  const auto o = run_cli("gradcheck --op all", scratch("gc"));
  EXPECT_EQ(o.status, 0) << o.err;
  for (const char* op : {"conv2d", "group_norm", "roi_align", "detector_loss", "episode_loss"}) {
    EXPECT_NE(o.out.find(std::string(op) + " max_rel_error="), std::string::npos) << op;
  }
  EXPECT_EQ(o.out.find("FAIL"), std::string::npos);
}

TEST(Cli, UnknownGradcheckOpFails) {
  const auto o = run_cli("gradcheck --op softmax", scratch("gc_bad"));
  EXPECT_NE(o.status, 0);
  EXPECT_NE(nlohmann::json::parse(o.err).at("error").get<std::string>().find("softmax"), std::string::npos);
}

TEST(Cli, ConfigProblemsListedInOneLine) {
  const auto dir = scratch("cfg");
  std::ofstream(dir / "c.json") << R"({"dataset": {"bogus": 1}, "train": {"extra": 2}, "detector": {"channels": -4}})";
  const auto o = run_cli("gen-data --config c.json --out data", dir);
  EXPECT_EQ(o.status, 1);
  ASSERT_EQ(std::count(o.err.begin(), o.err.end(), '\n'), 1) << o.err;
  const auto j = nlohmann::json::parse(o.err);
  EXPECT_GE(j.at("problems").size(), 3u);
  EXPECT_FALSE(fs::exists(dir / "data"));
}

TEST(Cli, FlagBeatsFileBeatsDefault) {
  const auto dir = scratch("precedence");
  std::ofstream(dir / "c.json") << R"({"seed": 3, "dataset": {"n_classes": 12, "base_class_count": 8,
      "image_size": [48, 48], "glyph_size": [12, 24]}})";
  ASSERT_EQ(run_cli("gen-data --config c.json --seed 5 --set dataset.base_class_count=9 --out d", dir).status, 0);
  const auto echoed = nlohmann::json::parse(slurp(dir / "d" / "config.json"));
  EXPECT_EQ(echoed.at("seed"), 5);
  EXPECT_EQ(echoed.at("dataset").at("base_class_count"), 9);
  EXPECT_EQ(echoed.at("dataset").at("n_classes"), 12);
  EXPECT_EQ(echoed.at("dataset").at("tail_instances"), 10);
  ASSERT_EQ(run_cli("gen-data --config c.json --out e", dir, "SYLPH_SEED=8").status, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "e" / "config.json")).at("seed"), 8);
}

TEST(Cli, UsageErrorsExitWithTwo) {
  const auto dir = scratch("usage");
  const auto o = run_cli("pretrain", dir);
  EXPECT_EQ(o.status, 2);
  EXPECT_TRUE(nlohmann::json::parse(o.err).at("usage").get<bool>());
  EXPECT_EQ(run_cli("frobnicate", dir).status, 2);
}

TEST(Cli, FullPipelineAndMissingCodebook) {
  const auto dir = scratch("pipeline");
  ASSERT_EQ(run_cli("gen-data " + kSmall + " --out data", dir).status, 0);
  auto o = run_cli("pretrain " + kSmall + " --data data --out pre", dir);
  ASSERT_EQ(o.status, 0) << o.err;
  for (const char* p : {"pre/config.json", "pre/checkpoints/pretrain.bin", "pre/logs/pretrain.jsonl"})
    EXPECT_TRUE(fs::exists(dir / p)) << p;
  std::ifstream log(dir / "pre/logs/pretrain.jsonl");
  std::string first;
  std::getline(log, first);
  for (const char* key : {"step", "loss_total", "loss_cls", "loss_box", "loss_ctr", "grad_norm", "lr"})
    EXPECT_TRUE(nlohmann::json::parse(first).contains(key)) << key;

  o = run_cli("meta-train --from pre/checkpoints/pretrain.bin --recipe sylph --out meta", dir);
  ASSERT_EQ(o.status, 0) << o.err;
  o = run_cli("enroll --from meta/checkpoints/meta.bin --classes all --out codes.bin", dir);
  ASSERT_EQ(o.status, 0) << o.err;
  o = run_cli("eval --from meta/checkpoints/meta.bin --codes codes.bin --out report.json", dir);
  ASSERT_EQ(o.status, 0) << o.err;
  const auto rep = nlohmann::json::parse(slurp(dir / "report.json"));
  EXPECT_GT(rep.at("ap_novel").get<double>(), 0.0);
  EXPECT_EQ(rep.at("per_class_ap").size(), 12u);

  const auto before = slurp(dir / "meta/checkpoints/meta.bin");
  o = run_cli("eval --from meta/checkpoints/meta.bin --codes nowhere.bin --out r2.json", dir);
  EXPECT_NE(o.status, 0);
  EXPECT_NE(nlohmann::json::parse(o.err).at("error").get<std::string>().find("nowhere.bin"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "r2.json"));
  EXPECT_EQ(slurp(dir / "meta/checkpoints/meta.bin"), before);

  std::ofstream(dir / "sched.json") << R"({"initial": "base", "steps": [[8], [9, 10], [11]], "shots": 5})";
  o = run_cli("incremental --from meta/checkpoints/meta.bin --schedule sched.json --runs 2 --out inc.json", dir);
  ASSERT_EQ(o.status, 0) << o.err;
  const auto inc = nlohmann::json::parse(slurp(dir / "inc.json"));
  EXPECT_EQ(inc.at("runs").size(), 2u);
  EXPECT_EQ(inc.at("seed_stats").at("max_abs_forgetting").at("mean"), 0.0);

  std::ofstream(dir / "bad_sched.json") << R"({"steps": [[8], [40]]})";
  o = run_cli("incremental --from meta/checkpoints/meta.bin --schedule bad_sched.json --out x.json", dir);
  EXPECT_NE(o.status, 0);
  EXPECT_NE(o.err.find("unknown class 40"), std::string::npos);
}
