#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "loopeval/cli/cli.hpp"
#include "loopeval/eval/checkpoint.hpp"
#include "loopeval/features/chunk_io.hpp"
#include "test_data.hpp"

using namespace loopeval;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "loopeval");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// small shapes keep every subcommand quick
std::vector<std::string> synth_args(const fs::path& out, std::size_t pairs) {
  return {"synth", "--pairs", std::to_string(pairs), "--dim", "8", "--seq-len", "6", "--steps", "2", "--span", "3",
          "--oracle-samples", "2000", "--out", out.string()};
}

eval::AnyEvaluator constant_pairwise(std::size_t d_in, float value) {
  eval::PairwiseConfig c;
  c.d_in = d_in;
  c.pool_rank = 4;
  c.proj_dim = 4;
  c.gru_layers = 1;
  c.gru_hidden = 4;
  c.scorer_hidden = 4;
  c.dropout_rate = 0;
  eval::PairwiseEvaluator<float> m(c, 1);
  for (auto* p : m.parameters()) std::fill(p->values.begin(), p->values.end(), 0.f);
  for (auto* p : m.parameters())
    if (p->name == "scorer.fc2.bias") p->values[0] = value;
  return m;
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, cli::kUsage);
  EXPECT_EQ(run({"synth"}).code, cli::kUsage);
  EXPECT_EQ(run({"bogus"}).code, cli::kUsage);
  const auto dir = testdata::fresh_dir("cli_usage");
  auto a = synth_args(dir / "x", 10);
  a.push_back("--mode");
  a.push_back("sideways");
  const auto r = run(a);
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_NE(r.err.find("sideways"), std::string::npos);
  EXPECT_EQ(run({"--version"}).code, cli::kOk);
}

TEST(Cli, SynthWritesChunksAndManifest) {
  const auto dir = testdata::fresh_dir("cli_synth") / "data";
  const auto r = run(synth_args(dir, 2000));
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  const auto m = features::read_manifest(dir / "manifest.json");
  EXPECT_EQ(m.total_pairs, 2000u);
  EXPECT_EQ(m.chunk_files.size(), 20u);
  EXPECT_NE(r.out.find("wrote 20 chunks (2000 pairs)"), std::string::npos);
  EXPECT_NE(r.out.find("oracle accuracy"), std::string::npos);
  const auto rm = cli::read_run_manifest(dir);
  EXPECT_EQ(rm.subcommand, "synth");
  EXPECT_EQ(rm.tool_version, "0.3.0");
  EXPECT_EQ(rm.config["n_pairs"], 2000);
  EXPECT_TRUE(rm.config.contains("oracle_pairwise"));
}

TEST(Cli, SynthIsDeterministic) {
  const auto root = testdata::fresh_dir("cli_det");
  ASSERT_EQ(run(synth_args(root / "a", 150)).code, cli::kOk);
  ASSERT_EQ(run(synth_args(root / "b", 150)).code, cli::kOk);
  for (const auto& e : fs::directory_iterator(root / "a")) {
    const auto name = e.path().filename();
    if (name == cli::kRunManifestName) continue;
    EXPECT_EQ(slurp(e.path()), slurp(root / "b" / name)) << name;
  }
}

TEST(Cli, OutputRootFromEnvironment) {
  const auto root = testdata::fresh_dir("cli_env");
  ::setenv(cli::kOutputRootEnv, root.c_str(), 1);
  const auto r = run({"synth", "--pairs", "5", "--dim", "4", "--seq-len", "4", "--steps", "1", "--span", "2",
                      "--oracle-samples", "100"});
  ::unsetenv(cli::kOutputRootEnv);
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  std::size_t dirs = 0;
  for (const auto& e : fs::directory_iterator(root)) {
    ++dirs;
    EXPECT_EQ(e.path().filename().string().rfind("synth-", 0), 0u);
    EXPECT_TRUE(fs::exists(e.path() / "manifest.json"));
  }
  EXPECT_EQ(dirs, 1u);
}

TEST(Cli, MissingDataIsDataError) {
  const auto dir = testdata::fresh_dir("cli_missing");
  auto r = run({"probe", "--data", (dir / "nope").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, cli::kData);
  EXPECT_NE(r.err.find("nope"), std::string::npos);
  r = run({"train", "--train", (dir / "nope").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, cli::kData);
  r = run({"figures", "--run", (dir / "nope").string()});
  EXPECT_EQ(r.code, cli::kData);
  fs::create_directories(dir / "empty_run");
  r = run({"figures", "--run", (dir / "empty_run").string()});
  EXPECT_EQ(r.code, cli::kData);
  EXPECT_NE(r.err.find("metrics"), std::string::npos);
}

TEST(Cli, CorruptChunkIsDataError) {
  const auto dir = testdata::fresh_dir("cli_corrupt");
  ASSERT_EQ(run(synth_args(dir / "d", 30)).code, cli::kOk);
  const auto m = features::read_manifest(dir / "d" / "manifest.json");
  const auto chunk = dir / "d" / m.chunk_files.front();
  auto bytes = slurp(chunk);
  bytes.resize(bytes.size() / 2);
  std::ofstream(chunk, std::ios::binary) << bytes;
  const auto r = run({"shortcut", "--data", (dir / "d").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, cli::kData);
  EXPECT_NE(r.err.find("data error"), std::string::npos);
}

TEST(Cli, TrainEvalFiguresPipeline) {
  const auto root = testdata::fresh_dir("cli_pipe");
  auto sa = synth_args(root / "data", 120);
  sa.insert(sa.end(), {"--holdout", "0.25", "--mode", "absolute", "--delta", "0.3"});
  ASSERT_EQ(run(sa).code, cli::kOk);
  ASSERT_TRUE(fs::exists(root / "data" / "train" / "manifest.json"));
  ASSERT_TRUE(fs::exists(root / "data" / "eval" / "manifest.json"));

  const auto run_dir = root / "run";
  auto r = run({"train", "--train", (root / "data" / "train").string(), "--eval", (root / "data" / "eval").string(),
                "--arch", "linear", "--epochs", "2", "--batch", "8", "--warmup", "2", "--lr", "3e-3", "--out",
                run_dir.string()});
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("Deflated Train Acc"), std::string::npos);
  EXPECT_NE(r.out.find("Fixed-Order Eval Acc"), std::string::npos);
  for (const char* f : {"config.json", "metrics.csv", "epoch_001.json", "epoch_002.lsw", "run_manifest.json"})
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  const auto rm = cli::read_run_manifest(run_dir);
  EXPECT_EQ(rm.subcommand, "train");
  EXPECT_EQ(rm.inputs.size(), 2u);
  EXPECT_EQ(rm.config["architecture"], "linear");

  r = run({"eval", "--checkpoint", (run_dir / "epoch_002").string(), "--data", (root / "data" / "eval").string(),
           "--out", (root / "eval").string()});
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  for (const char* field : {"Test accuracy", "(", "/ 30)", "Average score", "Score std", "Score range", "Positive rate"})
    EXPECT_NE(r.out.find(field), std::string::npos) << field;
  const auto report = nlohmann::json::parse(slurp(root / "eval" / "eval_report.json"));
  EXPECT_EQ(report["architecture"], "linear");
  EXPECT_TRUE(fs::exists(root / "eval" / cli::kRunManifestName));

  // the .lsw suffix is accepted and stripped
  EXPECT_EQ(run({"eval", "--checkpoint", (run_dir / "epoch_001.lsw").string(), "--data",
                 (root / "data" / "eval").string(), "--out", (root / "eval1").string()})
                .code,
            cli::kOk);

  r = run({"probe", "--data", (root / "data" / "train").string(), "--out", run_dir.string()});
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_TRUE(fs::exists(run_dir / "probe_pairwise_diff_final_step.json"));

  r = run({"figures", "--run", run_dir.string()});
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  const auto f3 = slurp(run_dir / "figures" / "figure3_metric_inversion.csv");
  EXPECT_EQ(f3.substr(0, f3.find('\n')), "epoch,deflated_train_acc,fixed_order_eval_acc");
  EXPECT_EQ(std::count(f3.begin(), f3.end(), '\n'), 3);
  const auto f1 = slurp(run_dir / "figures" / "figure1_access_pattern.csv");
  EXPECT_EQ(f1.substr(0, f1.find('\n')), "access_pattern,method,accuracy");
  EXPECT_NE(f1.find("pairwise,linear_probe_final_step,"), std::string::npos);
  EXPECT_FALSE(fs::exists(run_dir / "figures" / "figure2_cross_epoch_flip.csv"));

  // flip test refuses a pointwise checkpoint
  r = run({"fliptest", "--checkpoint", (run_dir / "epoch_002").string(), "--data", (root / "data" / "eval").string(),
           "--out", (root / "flip").string()});
  EXPECT_EQ(r.code, cli::kUsage);
}

TEST(Cli, FlipTestFlagsConstantModel) {
  const auto root = testdata::fresh_dir("cli_flip");
  ASSERT_EQ(run(synth_args(root / "data", 40)).code, cli::kOk);
  eval::save_checkpoint(constant_pairwise(8, 13.f), root / "const", {{"epoch", 3}});
  const auto r = run({"fliptest", "--checkpoint", (root / "const").string(), "--data", (root / "data").string(),
                      "--out", (root / "flip").string()});
  EXPECT_EQ(r.code, cli::kDegenerate);
  EXPECT_NE(r.err.find("constant output"), std::string::npos);
  EXPECT_TRUE(fs::exists(root / "flip" / "fliptest_report.json"));
  EXPECT_TRUE(fs::exists(root / "flip" / cli::kRunManifestName));
  const auto csv = slurp(root / "flip" / "cross_epoch.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,fixed_order_acc,correlation,sign_flip_rate,mean_sum");
  EXPECT_EQ(csv.substr(csv.find('\n') + 1, 2), "3,");

  // checkpoint built for another hidden size
  eval::save_checkpoint(constant_pairwise(16, 1.f), root / "wide");
  EXPECT_EQ(run({"fliptest", "--checkpoint", (root / "wide").string(), "--data", (root / "data").string(), "--out",
                 (root / "flip2").string()})
                .code,
            cli::kData);
  EXPECT_EQ(run({"fliptest", "--checkpoint", (root / "absent").string(), "--data", (root / "data").string()}).code,
            cli::kData);
}

TEST(Cli, FiguresPickUpCrossEpochReport) {
  const auto root = testdata::fresh_dir("cli_fig2");
  ASSERT_EQ(run(synth_args(root / "data", 40)).code, cli::kOk);
  ASSERT_EQ(run({"train", "--train", (root / "data").string(), "--arch", "pairwise", "--pool-rank", "4",
                 "--proj-dim", "4", "--gru-layers", "1", "--gru-hidden", "4", "--scorer-hidden", "4", "--epochs", "2",
                 "--batch", "8", "--warmup", "1", "--out", (root / "run").string()})
                .code,
            cli::kOk);
  const auto r = run({"fliptest", "--checkpoint", (root / "run" / "epoch_001").string(),
                      (root / "run" / "epoch_002").string(), "--data", (root / "data").string(), "--out",
                      (root / "flip").string()});
  ASSERT_TRUE(r.code == cli::kOk || r.code == cli::kDegenerate) << r.err;
  EXPECT_NE(r.out.find("Epoch  Acc"), std::string::npos);
  ASSERT_EQ(run({"figures", "--run", (root / "run").string(), "--reports", (root / "flip").string()}).code, cli::kOk);
  const auto f2 = slurp(root / "run" / "figures" / "figure2_cross_epoch_flip.csv");
  EXPECT_EQ(f2.substr(0, f2.find('\n')), "epoch,correlation,sign_flip_rate,mean_sum");
  EXPECT_EQ(std::count(f2.begin(), f2.end(), '\n'), 3);
}
