#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "birqa/cli.hpp"
#include "temp_dir.hpp"

namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "birqa");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = birqa::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    data_ = (*dir_ / "data").string();
    const auto g = run({"--seed", "3", "gen-data", "--out", data_, "--num-refs", "10", "--size", "16",
                        "--severities", "2"});
    ASSERT_EQ(g.code, 0) << g.err;
    ckpt_ = (*dir_ / "m.ckpt").string();
    const auto t = run({"--seed", "5", "train", "--manifest", data_ + "/train.csv", "--out", ckpt_,
                        "--epochs", "1", "--batch-size", "4", "--channels", "8", "--head-width", "4"});
    ASSERT_EQ(t.code, 0) << t.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string first_pair(std::string* dist) {
    const auto m = birqa::load_manifest(data_ + "/test.csv");
    *dist = m.resolve(m.rows[0].dist_path).string();
    return m.resolve(m.rows[0].ref_path).string();
  }

  static TempDir* dir_;
  static std::string data_, ckpt_;
};
TempDir* Cli::dir_ = nullptr;
std::string Cli::data_, Cli::ckpt_;

TEST(CliArgs, ExitCodes) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"score", "a.png"}).code, 2);
  const auto r = run({"score", "missing_ref.png", "missing_dist.png", "--model", "missing.ckpt"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(CliArgs, BadAttackBudgetIsUsageError) {
  TempDir t("cli_args");
  const auto r = run({"attack", "--manifest", "x.csv", "--model", "x.ckpt", "--out-dir",
                      (t / "o").string(), "--eps", "-1"});
  EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, GenDataWritesSplits) {
  for (const char* f : {"train.csv", "val.csv", "test.csv"}) {
    EXPECT_TRUE(fs::exists(fs::path(data_) / f)) << f;
  }
  const auto all = birqa::load_manifest(data_ + "/train.csv").size() +
                   birqa::load_manifest(data_ + "/val.csv").size() +
                   birqa::load_manifest(data_ + "/test.csv").size();
  EXPECT_GT(all, 10u);
}

TEST_F(Cli, ScoreIsDeterministic) {
  std::string dist;
  const std::string ref = first_pair(&dist);
  const auto a = run({"score", ref, dist, "--model", ckpt_});
  const auto b = run({"score", ref, dist, "--model", ckpt_});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_TRUE(std::isfinite(std::stod(a.out)));
}

TEST_F(Cli, ScoreDumpsFeatures) {
  std::string dist;
  const std::string ref = first_pair(&dist);
  TempDir t("cli_dump");
  const auto r = run({"score", ref, dist, "--model", ckpt_, "--dump-features", t.path().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_FALSE(fs::is_empty(t.path()));
}

TEST_F(Cli, PrintParams) {
  std::string dist;
  const std::string ref = first_pair(&dist);
  const auto r = run({"--print-params", "score", ref, dist, "--model", ckpt_});
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("total"), std::string::npos) << r.out;
}

TEST_F(Cli, EvalWithPerfectPredictions) {
  const auto m = birqa::load_manifest(data_ + "/test.csv");
  std::vector<double> mos;
  for (const auto& r : m.rows) mos.push_back(r.mos);
  TempDir t("cli_eval");
  birqa::cli::detail::write_predictions(t / "p.csv", mos);
  const auto r = run({"eval", "--manifest", data_ + "/test.csv", "--pred", (t / "p.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("clean          1.0000   1.0000"), std::string::npos) << r.out;

  const auto both = run({"eval", "--manifest", data_ + "/test.csv", "--pred", (t / "p.csv").string(),
                         "--model", ckpt_});
  EXPECT_EQ(both.code, 2);

  const auto cmp = run({"--seed", "1", "eval", "--manifest", data_ + "/test.csv", "--pred",
                        (t / "p.csv").string(), "--compare", (t / "p.csv").string(), "--resamples", "50"});
  ASSERT_EQ(cmp.code, 0) << cmp.err;
  EXPECT_NE(cmp.out.find("median 0.000000  95% CI [0.000000, 0.000000]  significant no"),
            std::string::npos)
      << cmp.out;
}

TEST_F(Cli, EvalModelWithAttackAndSavedPredictions) {
  TempDir t("cli_eval_model");
  const auto r = run({"--seed", "2", "eval", "--manifest", data_ + "/test.csv", "--model", ckpt_,
                      "--eps-list", "2", "--save-pred", (t / "p.csv").string(), "--out",
                      (t / "r.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("eps=2  /255"), std::string::npos) << r.out;
  EXPECT_EQ(birqa::cli::detail::read_predictions(t / "p.csv").size(),
            birqa::load_manifest(data_ + "/test.csv").size());
  EXPECT_TRUE(fs::exists(t / "r.csv"));
}

TEST_F(Cli, TrainIsByteReproducible) {
  TempDir t("cli_train");
  const std::vector<std::string> base = {"--seed", "5", "--threads", "1", "train", "--manifest",
                                         data_ + "/train.csv", "--epochs", "1", "--batch-size", "4",
                                         "--channels", "8", "--head-width", "4", "--out"};
  auto a = base, b = base;
  a.push_back((t / "a.ckpt").string());
  b.push_back((t / "b.ckpt").string());
  ASSERT_EQ(run(a).code, 0);
  ASSERT_EQ(run(b).code, 0);
  EXPECT_EQ(slurp(t / "a.ckpt"), slurp(t / "b.ckpt"));
  EXPECT_EQ(slurp(t / "a.ckpt"), slurp(ckpt_));
}

TEST_F(Cli, TrainHistoryAndGnuplot) {
  TempDir t("cli_hist");
  const auto r = run({"train", "--manifest", data_ + "/train.csv", "--val", data_ + "/val.csv",
                      "--epochs", "2", "--batch-size", "4", "--channels", "8", "--head-width", "4",
                      "--out", (t / "m.ckpt").string(), "--history", (t / "h.csv").string(),
                      "--gnuplot"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string h = slurp(t / "h.csv");
  EXPECT_EQ(h.rfind("epoch,loss,srocc\n", 0), 0u);
  EXPECT_EQ(std::count(h.begin(), h.end(), '\n'), 3);
  EXPECT_TRUE(fs::exists(t / "h.gp"));
}

TEST_F(Cli, AatCertificatesFeedBoundReport) {
  TempDir t("cli_aat");
  const auto r = run({"--seed", "4", "aat", "--manifest", data_ + "/train.csv", "--model", ckpt_,
                      "--out", (t / "a.ckpt").string(), "--iterations", "3", "--lr", "1e-3", "--band", "4", "--steps",
                      "2", "--certs", (t / "c.csv").string(), "--history", (t / "h.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("certificates hold 3/3"), std::string::npos) << r.out;

  const auto b = run({"bound-report", "--certs", (t / "c.csv").string(), "--out",
                      (t / "b.csv").string(), "--gnuplot"});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_NE(b.out.find("rows 3, violations 0"), std::string::npos) << b.out;
  std::ifstream in(t / "b.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,bound,E,holds");
  int rows = 0;
  while (std::getline(in, line)) {
    double step, bound, e;
    int holds;
    ASSERT_EQ(std::sscanf(line.c_str(), "%lf,%lf,%lf,%d", &step, &bound, &e, &holds), 4);
    EXPECT_LE(e, bound);
    EXPECT_EQ(holds, 1);
    ++rows;
  }
  EXPECT_EQ(rows, 3);
  EXPECT_TRUE(fs::exists(t / "b.gp"));
}

TEST_F(Cli, BoundReportRejectsWrongHeader) {
  TempDir t("cli_bound");
  std::ofstream(t / "c.csv") << "nope\n";
  const auto r = run({"bound-report", "--certs", (t / "c.csv").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("expected header"), std::string::npos);
}

TEST_F(Cli, AttackWritesManifestWithinBudget) {
  TempDir t("cli_attack");
  const auto r = run({"--seed", "6", "attack", "--manifest", data_ + "/test.csv", "--model", ckpt_,
                      "--out-dir", (t / "adv").string(), "--eps", "4", "--steps", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto adv = birqa::load_manifest(t / "adv" / "manifest.csv");
  EXPECT_EQ(adv.size(), birqa::load_manifest(data_ + "/test.csv").size());
  std::ifstream in(t / "adv" / "attack.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "pair_id,score_before,score_after,linf");
  while (std::getline(in, line)) {
    const double linf = std::stod(line.substr(line.rfind(',') + 1));
    EXPECT_LE(linf, 4.0 / 255.0 + 1e-12);
  }
}

TEST_F(Cli, BenchPrintsTimingRows) {
  const auto r = run({"bench", "--sizes", "32x24,64x48", "--reps", "1", "--channels", "8",
                      "--head-width", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("width,height,pixels,feature_ms,forward_ms,total_ms,ns_per_pixel\n", 0), 0u);
  EXPECT_NE(r.out.find("\n64,48,3072,"), std::string::npos);
  EXPECT_EQ(run({"bench", "--sizes", "8x8"}).code, 2);
}

TEST_F(Cli, SweepSubsets) {
  TempDir t("cli_sweep");
  const auto r = run({"sweep", "--manifest", data_ + "/train.csv", "--val", data_ + "/val.csv",
                      "--subsets", "1000,1111", "--epochs", "1", "--channels", "8", "--head-width",
                      "4", "--out", (t / "s.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 3);
  EXPECT_EQ(run({"sweep", "--manifest", "a", "--val", "b", "--subsets", "0000", "--out", "x"}).code, 2);
}

TEST_F(Cli, ConfigFlagsAndFile) {
  TempDir t("cli_cfg");
  std::ofstream(t / "net.cfg") << "channels=8\nhead_width=4\nenable_scgb=0\n";
  const auto r = run({"--print-params", "train", "--manifest", data_ + "/train.csv", "--epochs", "1",
                      "--config", (t / "net.cfg").string(), "--no-rah", "--out",
                      (t / "m.ckpt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = birqa::load_model(t / "m.ckpt");
  EXPECT_FALSE(m.config().enable_scgb);
  EXPECT_FALSE(m.config().enable_rah);
  EXPECT_EQ(m.config().channels, 8);

  std::ofstream(t / "bad.cfg") << "channels=abc\n";
  const auto bad = run({"train", "--manifest", data_ + "/train.csv", "--config",
                        (t / "bad.cfg").string(), "--out", (t / "x.ckpt").string()});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("config"), std::string::npos) << bad.err;
}

TEST(CliHelpers, PredictionsRoundTripAndEpsList) {
  TempDir t("cli_helpers");
  const std::vector<double> v = {0.1, 2.5, -3.25};
  birqa::cli::detail::write_predictions(t / "p.csv", v);
  EXPECT_EQ(birqa::cli::detail::read_predictions(t / "p.csv"), v);
  const auto eps = birqa::cli::detail::parse_eps_list("2,4,8");
  ASSERT_EQ(eps.size(), 3u);
  EXPECT_DOUBLE_EQ(eps[2], 8.0 / 255.0);
}

}  // namespace
