// Drives the qtrack binary through a shell and checks exit codes and outputs.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "qtrack/data_pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const std::string& stdin_text = "") {
  std::string cmd = std::string(QTRACK_CLI_PATH) + " " + args + " 2>&1";
  fs::path input;
  if (!stdin_text.empty()) {
    input = fs::temp_directory_path() / ("qtrack_cli_stdin_" + std::to_string(::getpid()));
    std::ofstream(input) << stdin_text;
    cmd += " < " + input.string();
  }
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  if (!input.empty()) fs::remove(input);
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<qtrack::TrackingTriplet> load(const fs::path& p) {
  std::ifstream is(p);
  return qtrack::read_triplets(is);
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("qtrack_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" +
            std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  // Small synthetic corpus mined into splits.
  void make_data(std::size_t sessions = 300) {
    ASSERT_EQ(run("gen-synthetic --sessions " + std::to_string(sessions) + " --out-dir " + p("syn")).code, 0);
    const auto r = run("build-data --logs " + p("syn/logs.tsv") + " --min-count 1 --out " + p("data"));
    ASSERT_EQ(r.code, 0) << r.out;
  }

  fs::path dir_;
};

TEST_F(CliTest, HelpExitsZeroAndListsDefaults) {
  const auto top = run("--help");
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"gen-synthetic", "build-data", "train", "eval", "baseline-slot", "serve", "track", "ablate"}) {
    EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
    const auto r = run(std::string(sub) + " --help");
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("--seed"), std::string::npos) << sub;
  }
  const auto train = run("train --help");
  EXPECT_NE(train.out.find("[0.001]"), std::string::npos);
  EXPECT_NE(train.out.find("[0.95]"), std::string::npos);
  EXPECT_NE(train.out.find("[256]"), std::string::npos);
  const auto build = run("build-data --help");
  EXPECT_NE(build.out.find("[30]"), std::string::npos);
  EXPECT_NE(build.out.find("[0.9,0.05,0.05]"), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("no-such-command").code, 2);
  EXPECT_EQ(run("train --bogus").code, 2);
  EXPECT_EQ(run("train --train x").code, 2);
  EXPECT_EQ(run("build-data --logs " + p("missing.tsv")).code, 2);
  EXPECT_EQ(run("eval --data " + p("missing.jsonl") + " --predictions x").code, 2);
  EXPECT_EQ(run("train --train a --val b --enhance-add-only --enhance-concat-only").code, 2);
  EXPECT_EQ(run("train --train a --val b --activation sigmoid").code, 2);
}

TEST_F(CliTest, SplitsMustSumToOne) {
  std::ofstream(p("logs.tsv")) << "u\t100\tred shoes\nu\t200\tblue shoes\n";
  const auto bad = run("build-data --logs " + p("logs.tsv") + " --splits 0.5,0.2,0.2 --out " + p("o"));
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.out.find("--splits"), std::string::npos);
  EXPECT_EQ(run("build-data --logs " + p("logs.tsv") + " --splits 0.5,0.5 --out " + p("o")).code, 2);
  EXPECT_EQ(run("build-data --logs " + p("logs.tsv") + " --splits a,b,c --out " + p("o")).code, 2);
  EXPECT_EQ(run("build-data --logs " + p("logs.tsv") + " --splits 0.8,0.1,0.1 --min-count 1 --out " + p("o")).code,
            0);
}

TEST_F(CliTest, EmptyLogWritesEmptySplitsWithWarning) {
  std::ofstream(p("empty.tsv")).flush();
  const auto r = run("build-data --logs " + p("empty.tsv") + " --out " + p("out"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("warning"), std::string::npos);
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl"}) {
    ASSERT_TRUE(fs::exists(dir_ / "out" / f)) << f;
    EXPECT_EQ(fs::file_size(dir_ / "out" / f), 0u) << f;
  }
  const auto stats = nlohmann::json::parse(slurp(dir_ / "out" / "stats.json"));
  EXPECT_EQ(stats["triplets"], 0);
}

TEST_F(CliTest, BuildDataRecordsRejects) {
  std::ofstream(p("logs.tsv")) << "u\t100\tred shoes\n"
                                  "u\t160\tred shoes !!\n"
                                  "u\tnot-a-time\tblue\n"
                                  "v\t100\tnike shoes\n"
                                  "v\t130\tthe\n";
  const auto r = run("build-data --logs " + p("logs.tsv") + " --min-count 1 --out " + p("o"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto stats = nlohmann::json::parse(slurp(dir_ / "o" / "stats.json"));
  EXPECT_EQ(stats["records"], 4);
  EXPECT_EQ(stats["rejects"]["BAD_RECORD"], 1);
  EXPECT_EQ(stats["rejects"]["MEANINGLESS_Q2"], 1);
  EXPECT_EQ(stats["triplets"], 0);
}

TEST_F(CliTest, SyntheticRoundTripRecoversGold) {
  make_data(400);
  auto gold = load(dir_ / "syn" / "gold.jsonl");
  std::vector<qtrack::TrackingTriplet> mined;
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl"}) {
    for (auto& t : load(dir_ / "data" / f)) mined.push_back(std::move(t));
  }
  // Mined splits hold distinct pairs with counts; expand both sides to multisets.
  const auto key = [](const qtrack::TrackingTriplet& t) {
    return nlohmann::json{t.q1, t.q2, t.q3, t.labels}.dump();
  };
  std::map<std::string, std::size_t> want, got;
  for (const auto& t : gold) want[key(t)] += t.count;
  for (const auto& t : mined) got[key(t)] += t.count;
  EXPECT_EQ(want, got);
}

TEST_F(CliTest, EvalPerfectPredictionsScoresHundred) {
  make_data();
  const auto test = load(dir_ / "data" / "test.jsonl");
  ASSERT_FALSE(test.empty());
  {
    std::ofstream os(p("pred.jsonl"));
    for (std::size_t i = 0; i < test.size(); ++i) {
      // Mix both accepted line shapes.
      if (i % 2) {
        os << nlohmann::json(test[i].labels).dump() << '\n';
      } else {
        os << nlohmann::json{{"labels", test[i].labels}}.dump() << '\n';
      }
    }
  }
  const auto r = run("eval --data " + p("data/test.jsonl") + " --predictions " + p("pred.jsonl") + " --report " +
                     p("report.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("EM 100.00  F1 100.00"), std::string::npos) << r.out;
  EXPECT_EQ(slurp(dir_ / "report.csv"), "variant,em,f1\npredictions,100,100\n");
}

TEST_F(CliTest, EvalRejectsBothSources) {
  make_data();
  EXPECT_EQ(run("eval --data " + p("data/test.jsonl") + " --checkpoint a --predictions b").code, 2);
  EXPECT_EQ(run("eval --data " + p("data/test.jsonl")).code, 2);
  EXPECT_EQ(run("eval --data " + p("data/test.jsonl") + " --checkpoint " + p("nowhere")).code, 2);
}

TEST_F(CliTest, MisalignedPredictionsAreRuntimeError) {
  make_data();
  std::ofstream(p("pred.jsonl")) << "[1]\n";
  EXPECT_EQ(run("eval --data " + p("data/test.jsonl") + " --predictions " + p("pred.jsonl")).code, 3);
}

TEST_F(CliTest, BaselineSlotReports) {
  make_data();
  const auto r = run("baseline-slot --data " + p("data/test.jsonl") + " --kb " + p("syn/kb.tsv") + " --report " +
                     p("b.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("slot-baseline: EM"), std::string::npos);
  EXPECT_EQ(slurp(dir_ / "b.csv").rfind("variant,em,f1\nslot-baseline,", 0), 0u);
}

TEST_F(CliTest, TrainEvalTrackAndAblate) {
  make_data();
  const std::string small = " --heads 2 --head-dim 4 --embed-dim 8 --batch-size 32 --epochs 2";
  const auto tr = run("train --train " + p("data/train.jsonl") + " --val " + p("data/val.jsonl") + " --out " +
                      p("ck") + small);
  ASSERT_EQ(tr.code, 0) << tr.out;
  EXPECT_TRUE(fs::exists(dir_ / "ck" / "config.json"));
  EXPECT_TRUE(fs::exists(dir_ / "ck" / "weights.bin"));
  std::ifstream log(dir_ / "ck" / "train_log.jsonl");
  std::size_t epochs = 0;
  for (std::string line; std::getline(log, line);) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["epoch"], ++epochs);
  }
  EXPECT_GE(epochs, 1u);

  // Evaluating the same checkpoint twice is deterministic.
  const auto a = run("eval --data " + p("data/test.jsonl") + " --checkpoint " + p("ck") + " --samples " + p("s.jsonl"));
  const auto b = run("eval --data " + p("data/test.jsonl") + " --checkpoint " + p("ck"));
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(a.out.rfind("model: EM", 0), 0u);

  const auto tk = run("track --checkpoint " + p("ck") + " --no-prompt",
                      "sport shoes\n\n:override 0 drop\n:history\n:bogus\n:quit\nnever reached\n");
  ASSERT_EQ(tk.code, 0) << tk.out;
  EXPECT_NE(tk.out.find("internal query: sport shoes"), std::string::npos) << tk.out;
  EXPECT_NE(tk.out.find("1. sport shoes -> shoes (overridden)"), std::string::npos) << tk.out;
  EXPECT_NE(tk.out.find("unknown command :bogus"), std::string::npos) << tk.out;
  EXPECT_EQ(tk.out.find("never"), std::string::npos) << tk.out;

  const auto ab = run("ablate --train " + p("data/train.jsonl") + " --val " + p("data/val.jsonl") + " --test " +
                      p("data/test.jsonl") + " --seeds 1 --epochs 1 --heads 2 --head-dim 4 --embed-dim 8 --csv " +
                      p("ab.csv") + " --markdown " + p("ab.md"));
  ASSERT_EQ(ab.code, 0) << ab.out;
  const auto csv = slurp(dir_ / "ab.csv");
  for (const char* v : {"full", "random_embed_init", "no_self_attention", "single_head", "enhance_concat",
                        "enhance_add"}) {
    EXPECT_NE(csv.find(std::string("\n") + v + ","), std::string::npos) << v;
  }
}

TEST_F(CliTest, TrackWithoutCheckpointIsUsageError) {
  EXPECT_EQ(run("track --checkpoint " + p("none"), "x\n").code, 2);
}

}  // namespace
