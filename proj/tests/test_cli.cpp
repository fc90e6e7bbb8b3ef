#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cli.hpp"

namespace fs = std::filesystem;
using namespace dffl;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "dffl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    std::random_device rd;
    dir_ = fs::temp_directory_path() / ("dffl-cli-" + std::to_string(rd()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }
  fs::path dir_;
};

const std::vector<std::string> fast = {"--rounds", "3", "--epochs", "3"};

std::vector<std::string> with_fast(std::vector<std::string> a) {
  a.insert(a.end(), fast.begin(), fast.end());
  return a;
}

}  // namespace

TEST_F(CliTest, CompareIsReproducible) {
  auto a = run(with_fast({"compare", "--scenario", "s1_small", "--seed", "3", "--out", path("a")}));
  auto b = run(with_fast({"compare", "--scenario", "s1_small", "--seed", "3", "--out", path("b")}));
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(a.out, b.out);
  auto csv = slurp(dir_ / "a" / "comparison.csv");
  ASSERT_FALSE(csv.empty());
  EXPECT_EQ(csv, slurp(dir_ / "b" / "comparison.csv"));
  EXPECT_NE(a.out.find("dynamic"), std::string::npos);
  EXPECT_NE(a.out.find("baseline"), std::string::npos);
}

TEST_F(CliTest, ManifestReplaysTheRun) {
  auto first = run({"sim", "--scenario", "s4_small", "--seed", "7", "--mode", "baseline", "--rounds", "2", "--epochs",
                    "2", "--out", path("a")});
  ASSERT_EQ(first.code, 0) << first.err;
  auto manifest = Json::parse(slurp(dir_ / "a" / "manifest.json"));
  EXPECT_EQ(manifest.at("command"), "sim");
  EXPECT_EQ(manifest.at("mode"), "baseline");
  EXPECT_EQ(manifest.at("seed"), 7u);
  EXPECT_EQ(manifest.at("scenario").at("rounds"), 2);

  auto again = run({"sim", "--manifest", path("a/manifest.json"), "--out", path("b")});
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_EQ(slurp(dir_ / "a" / "ledger.csv"), slurp(dir_ / "b" / "ledger.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "manifest.json"), slurp(dir_ / "b" / "manifest.json"));

  auto wrong = run({"compare", "--manifest", path("a/manifest.json"), "--out", path("c")});
  EXPECT_EQ(wrong.code, cli::config);
}

TEST_F(CliTest, ScenarioFileByPath) {
  auto file = std::string(DFFL_SCENARIO_DIR) + "/s1_small.json";
  auto a = run(with_fast({"sim", "--scenario", file, "--out", path("file")}));
  auto b = run(with_fast({"sim", "--scenario", "s1_small", "--out", path("builtin")}));
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(dir_ / "file" / "ledger.csv"), slurp(dir_ / "builtin" / "ledger.csv"));
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run({"sim", "--rounds", "0", "--out", path("x")}).code, cli::config);
  EXPECT_EQ(run({"sim", "--bogus"}).code, cli::usage);
  EXPECT_EQ(run({}).code, cli::usage);
  EXPECT_EQ(run({"sim", "--seed", "abc"}).code, cli::usage);
  EXPECT_EQ(run({"sim", "--scenario", "nope", "--out", path("x")}).code, cli::config);
  EXPECT_EQ(run({"sim", "--mode", "sideways", "--out", path("x")}).code, cli::config);
  EXPECT_EQ(run({"sim", "--payload", "huge", "--out", path("x")}).code, cli::config);
  EXPECT_EQ(run({"sim", "--scenario", path("missing.json"), "--out", path("x")}).code, cli::io);
  EXPECT_EQ(run({"report", path("missing.csv")}).code, cli::io);
  EXPECT_EQ(run({"serve", "--listen", "nohost", "--out", path("x")}).code, cli::config);

  std::ofstream(path("bad.json")) << "{not json";
  EXPECT_EQ(run({"sim", "--manifest", path("bad.json"), "--out", path("x")}).code, cli::config);

  auto help = run({"--help"});
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("suite"), std::string::npos);
}

TEST_F(CliTest, OutputConfinedToDirectory) {
  auto before = fs::current_path();
  auto r = run(with_fast({"compare", "--scenario", "s2_small", "--out", path("only")}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(fs::current_path(), before);
  std::vector<std::string> top;
  for (const auto& e : fs::directory_iterator(dir_)) top.push_back(e.path().filename().string());
  EXPECT_EQ(top, std::vector<std::string>{"only"});
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir_ / "only")) files.push_back(e.path().filename().string());
  std::sort(files.begin(), files.end());
  EXPECT_EQ(files, (std::vector<std::string>{"comparison.csv", "manifest.json"}));
}

TEST_F(CliTest, OutputDirFromEnvironment) {
  ::setenv("DFFL_OUTPUT_DIR", path("env").c_str(), 1);
  auto r = run({"sim", "--scenario", "s1_small", "--rounds", "1", "--epochs", "1"});
  ::unsetenv("DFFL_OUTPUT_DIR");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "env" / "ledger.csv"));
}

TEST_F(CliTest, SuiteThenReport) {
  auto r = run({"suite", "--rounds", "2", "--epochs", "1", "--jobs", "2", "--out", path("suite")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t dirs = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "suite")) {
    if (e.is_directory()) {
      ++dirs;
      EXPECT_EQ(std::distance(fs::directory_iterator(e.path()), fs::directory_iterator{}), 2);
    }
  }
  EXPECT_EQ(dirs, 18u);
  auto summary = slurp(dir_ / "suite" / "suite_summary.csv");
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 19);

  auto rep = run({"report", path("suite")});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(std::count(rep.out.begin(), rep.out.end(), '\n'), 18 * 3);

  auto single = run({"report", path("suite/s1_small/seed_1.csv")});
  ASSERT_EQ(single.code, 0) << single.err;
  EXPECT_NE(single.out.find("s1_small"), std::string::npos);

  ASSERT_EQ(run({"suite", "--rounds", "2", "--epochs", "1", "--out", path("serial")}).code, 0);
  EXPECT_EQ(summary, slurp(dir_ / "serial" / "suite_summary.csv"));
}
