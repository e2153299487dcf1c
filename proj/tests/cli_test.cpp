#include "psgd/experiment/commands.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using namespace psgd::experiment;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("psgd_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string write(const std::string& name, const std::string& text) {
    const auto p = root_ / name;
    std::ofstream(p, std::ios::binary) << text;
    return p.string();
  }

  CommandOptions options(const std::string& out) {
    CommandOptions o;
    o.out_dir = (root_ / out).string();
    o.out = &out_;
    o.err = &err_;
    return o;
  }

  std::string read(const std::string& out, const std::string& file) { return read_file((root_ / out / file).string()); }

  fs::path root_;
  std::ostringstream out_;
  std::ostringstream err_;
};

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(field);
      field.clear();
    } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      row.push_back(field);
      field.clear();
      rows.push_back(row);
      row.clear();
      ++i;
    } else {
      field += c;
    }
  }
  return rows;
}

std::string column(const std::vector<std::vector<std::string>>& rows, std::size_t r, const std::string& name) {
  const auto& h = rows.front();
  const auto it = std::find(h.begin(), h.end(), name);
  if (it == h.end()) throw std::runtime_error("no column " + name);
  return rows.at(r).at(static_cast<std::size_t>(it - h.begin()));
}

const char* kVanilla = R"(name: vanilla
seed: 4
problem:
  kind: quadratic
  dim: 15
  condition: 10
optimizer:
  steps: 500
  gamma_base: 1.0
)";

const char* kNoisy = R"(name: noisy
seed: 9
problem:
  kind: quadratic
  dim: 10
  condition: 5
  noise: {kind: additive, sigma2: 0.5}
optimizer:
  steps: 300
  epsilon: 0.2
  alpha: theoretical
mask:
  kind: alternating
  keep: 0.6
perturbation:
  kind: extragradient
  eta_over_L: 0.3
)";

const char* kClassifier = R"(name: classifier
seed: 2
problem:
  kind: classification
  samples: 300
  batch_size: 16
model:
  hidden: [12]
optimizer:
  scheme: ats
  steps: 200
  gamma_base: 0.1
  exact_gradients: false
)";

}  // namespace

TEST_F(CliTest, VanillaQuadraticConverges) {
  ASSERT_EQ(cmd_train(write("c.yaml", kVanilla), options("run")), kOk) << err_.str();
  const auto rows = parse_csv(read("run", "summary.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_LT(std::stod(column(rows, 1, "final_grad_norm")), 1e-8);
  EXPECT_EQ(column(rows, 1, "status"), "ok");
  EXPECT_EQ(column(rows, 1, "seed"), "4");
}

TEST_F(CliTest, SameConfigGivesIdenticalTrajectory) {
  const auto path = write("c.yaml", kNoisy);
  ASSERT_EQ(cmd_train(path, options("a")), kOk) << err_.str();
  ASSERT_EQ(cmd_train(path, options("b")), kOk) << err_.str();
  EXPECT_EQ(read("a", "trajectory.jsonl"), read("b", "trajectory.jsonl"));
  EXPECT_EQ(read("a", "summary.csv"), read("b", "summary.csv"));
  EXPECT_EQ(read("a", "manifest.json"), read("b", "manifest.json"));
}

TEST_F(CliTest, ManifestRerunIsByteIdentical) {
  for (const char* text : {kVanilla, kNoisy, kClassifier}) {
    ASSERT_EQ(cmd_train(write("c.yaml", text), options("first")), kOk) << err_.str();
    const auto manifest = (root_ / "first" / "manifest.json").string();
    ASSERT_EQ(cmd_train(manifest, options("again")), kOk) << err_.str();
    EXPECT_EQ(read("first", "trajectory.jsonl"), read("again", "trajectory.jsonl"));
    EXPECT_EQ(read("first", "manifest.json"), read("again", "manifest.json"));
  }
}

TEST_F(CliTest, TrajectoryLinesCarryHashAndSeed) {
  ASSERT_EQ(cmd_train(write("c.yaml", kNoisy), options("run")), kOk);
  const auto manifest = Json::parse(read("run", "manifest.json"));
  std::istringstream lines(read("run", "trajectory.jsonl"));
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line); ++n) {
    const auto j = Json::parse(line);
    EXPECT_EQ(j["config_hash"], manifest["config_hash"]);
    EXPECT_EQ(j["seed"], 9);
    EXPECT_EQ(j["t"], n);
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
    EXPECT_EQ(keys.size(), 26u);
    EXPECT_EQ(keys.front(), "config_hash");
  }
  EXPECT_EQ(n, 300u);
  EXPECT_EQ(manifest["outputs"].size(), 2u);
  EXPECT_EQ(manifest["outputs"][0]["sha256"], sha256_hex(read("run", "trajectory.jsonl")));
}

TEST_F(CliTest, MissingRequiredKeyExitsTwoWithKeyName) {
  const auto path = write("c.yaml", "name: x\nseed: 1\nproblem:\n  kind: quadratic\noptimizer:\n  steps: 3\n  gamma_base: 0.1\n");
  EXPECT_EQ(cmd_train(path, options("run")), kUsage);
  EXPECT_NE(err_.str().find("problem.dim"), std::string::npos) << err_.str();
  EXPECT_NE(err_.str().find("line"), std::string::npos);
}

TEST_F(CliTest, UnknownKeyIsRejectedWithLine) {
  const auto path = write("c.yaml", std::string(kVanilla) + "mask:\n  kind: dropout\n  keeep: 0.4\n");
  EXPECT_EQ(cmd_train(path, options("run")), kUsage);
  EXPECT_NE(err_.str().find("mask.keeep"), std::string::npos) << err_.str();
  EXPECT_NE(err_.str().find("line 12"), std::string::npos) << err_.str();
}

TEST_F(CliTest, InvalidValuesExitTwo) {
  EXPECT_EQ(cmd_train(write("a.yaml", std::string(kVanilla) + "mask:\n  kind: sometimes\n"), options("a")), kUsage);
  EXPECT_EQ(cmd_train(write("b.yaml", "name: x\nseed: -1\n"), options("b")), kUsage);
  EXPECT_EQ(cmd_train(write("c.yaml", "name: [x\n"), options("c")), kUsage);
  EXPECT_EQ(cmd_train((root_ / "missing.yaml").string(), options("d")), kUsage);
  EXPECT_EQ(cmd_train(write("e.yaml", std::string(kVanilla) + "perturbation:\n  kind: extragradient\n"), options("e")),
            kUsage);
}

TEST_F(CliTest, UnknownSuiteExitsTwo) {
  EXPECT_EQ(cmd_verify("no-such-suite", options("v")), kUsage);
  EXPECT_NE(err_.str().find("lemma1"), std::string::npos);
}

TEST_F(CliTest, VerifyReportsEachProperty) {
  EXPECT_EQ(cmd_verify("collapse", options("v")), kOk);
  EXPECT_NE(out_.str().find("PASS collapse"), std::string::npos);
  EXPECT_NE(out_.str().find("<= 1e-12"), std::string::npos);
}

TEST_F(CliTest, SeedOverrideChangesHashAndRun) {
  const auto path = write("c.yaml", kNoisy);
  ASSERT_EQ(cmd_train(path, options("a")), kOk);
  auto o = options("b");
  o.seed = 77;
  ASSERT_EQ(cmd_train(path, o), kOk);
  const auto a = Json::parse(read("a", "manifest.json"));
  const auto b = Json::parse(read("b", "manifest.json"));
  EXPECT_NE(a["config_hash"], b["config_hash"]);
  EXPECT_EQ(b["seed"], 77);
  EXPECT_NE(read("a", "trajectory.jsonl"), read("b", "trajectory.jsonl"));
}

TEST_F(CliTest, OutputRootFromEnvironment) {
  const auto path = write("c.yaml", kVanilla);
  ::setenv(kOutputRootEnv, (root_ / "env-root").string().c_str(), 1);
  CommandOptions o;
  o.out = &out_;
  o.err = &err_;
  ASSERT_EQ(cmd_train(path, o), kOk);
  ::unsetenv(kOutputRootEnv);
  const auto rc = resolve(parse_config_text(kVanilla));
  EXPECT_TRUE(fs::exists(root_ / "env-root" / "train" / ("vanilla-" + rc.hash.substr(0, 12)) / "manifest.json"));
}

TEST_F(CliTest, CanonicalConfigIgnoresFormatting) {
  const auto a = resolve(parse_config_text(kVanilla));
  const auto b = resolve(parse_config_text(
      "optimizer: {gamma_base: 1, steps: 500}\nproblem: {dim: 15, kind: quadratic, condition: 10.0}\nseed: 4\nname: vanilla\n"));
  EXPECT_EQ(a.hash, b.hash);
  EXPECT_EQ(canonical_yaml(parse_config_text(a.canonical)), a.canonical);
}

TEST_F(CliTest, CsvQuotingFollowsRfc4180) {
  std::ostringstream s;
  CsvWriter csv(s);
  csv.row({"plain", "a,b", "say \"hi\"", "two\nlines", ""});
  EXPECT_EQ(s.str(), "plain,\"a,b\",\"say \"\"hi\"\"\",\"two\nlines\",\r\n");
  const auto rows = parse_csv(s.str());
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0][2], "say \"hi\"");
  EXPECT_EQ(rows[0][3], "two\nlines");
}

TEST_F(CliTest, AtsSummaryHasPhaseRowsAndCoreLoss) {
  ASSERT_EQ(cmd_train(write("c.yaml", kClassifier), options("run")), kOk) << err_.str();
  const auto rows = parse_csv(read("run", "summary.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(column(rows, 1, "scope"), "all");
  EXPECT_EQ(column(rows, 2, "scope"), "core");
  EXPECT_EQ(column(rows, 3, "scope"), "full");
  EXPECT_EQ(column(rows, 2, "steps"), "100");
  EXPECT_FALSE(column(rows, 1, "validation_loss").empty());
  EXPECT_FALSE(column(rows, 1, "core_validation_loss").empty());
}

TEST_F(CliTest, NumericAbortExitsThreeWithFlaggedArtifacts) {
  const auto path = write("c.yaml", R"(name: diverge
seed: 1
problem:
  kind: quadratic
  dim: 5
  condition: 2
optimizer:
  steps: 2000
  gamma_base: 10
)");
  EXPECT_EQ(cmd_train(path, options("run")), kAborted);
  const auto manifest = Json::parse(read("run", "manifest.json"));
  EXPECT_EQ(manifest["status"], "aborted");
  EXPECT_FALSE(manifest["detail"].is_null());
  const auto rows = parse_csv(read("run", "summary.csv"));
  EXPECT_EQ(column(rows, 1, "status"), "aborted");
  const auto steps = std::stoi(column(rows, 1, "steps"));
  EXPECT_GT(steps, 0);
  EXPECT_LT(steps, 2000);
}

TEST_F(CliTest, SingleCellSweepMatchesTrain) {
  ASSERT_EQ(cmd_train(write("c.yaml", kNoisy), options("train")), kOk) << err_.str();
  const auto sweep = std::string(kNoisy) + "sweep:\n  grid:\n    optimizer.steps: [300]\n  seeds: [9]\n";
  ASSERT_EQ(cmd_sweep(write("s.yaml", sweep), options("sweep")), kOk) << err_.str();
  const auto t = parse_csv(read("train", "summary.csv"));
  const auto s = parse_csv(read("sweep", "sweep.csv"));
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(column(s, 1, "config_hash"), column(t, 1, "config_hash"));
  for (const char* col : {"steps", "mean_scaled_masked_sq", "mean_grad_sq", "max_q", "final_loss", "final_grad_norm"}) {
    EXPECT_EQ(column(s, 1, col), column(t, 1, col)) << col;
  }
}

TEST_F(CliTest, SweepRowsFollowGridThenSeedOrder) {
  const auto sweep = std::string(kClassifier) + "sweep:\n  grid:\n    core.ratio: [0.5, 0.25, 0.125]\n  seeds: [5, 3]\n  threads: 3\n";
  ASSERT_EQ(cmd_sweep(write("s.yaml", sweep), options("sweep")), kOk) << err_.str();
  const auto rows = parse_csv(read("sweep", "sweep.csv"));
  ASSERT_EQ(rows.size(), 7u);
  const std::vector<std::pair<std::string, std::string>> expect{{"0.5", "5"},   {"0.5", "3"},   {"0.25", "5"},
                                                                {"0.25", "3"},  {"0.125", "5"}, {"0.125", "3"}};
  for (std::size_t i = 0; i < expect.size(); ++i) {
    EXPECT_EQ(column(rows, i + 1, "core.ratio"), expect[i].first);
    EXPECT_EQ(column(rows, i + 1, "seed"), expect[i].second);
    EXPECT_EQ(column(rows, i + 1, "status"), "ok");
  }
  // Re-running with one thread gives the same file.
  const auto serial = std::string(kClassifier) + "sweep:\n  grid:\n    core.ratio: [0.5, 0.25, 0.125]\n  seeds: [5, 3]\n  threads: 1\n";
  ASSERT_EQ(cmd_sweep(write("s1.yaml", serial), options("serial")), kOk);
  const auto again = parse_csv(read("serial", "sweep.csv"));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(column(rows, i, "config_hash"), column(again, i, "config_hash"));
    EXPECT_EQ(column(rows, i, "validation_loss"), column(again, i, "validation_loss"));
  }
}

TEST_F(CliTest, EpsilonSweepStaysWithinIterationBound) {
  const auto sweep = R"(name: eps
seed: 1
problem:
  kind: quadratic
  dim: 20
  condition: 10
  noise: {kind: additive, sigma2: 1.0}
optimizer:
  steps: 5000
  epsilon: 0.1
  alpha: theoretical
  evaluate_loss: false
mask:
  kind: alternating
  keep: 0.7
sweep:
  grid:
    optimizer.epsilon: [0.4, 0.2, 0.1]
  seeds: [1, 2, 3]
)";
  ASSERT_EQ(cmd_sweep(write("s.yaml", sweep), options("sweep")), kOk) << err_.str();
  const auto rows = parse_csv(read("sweep", "sweep.csv"));
  ASSERT_EQ(rows.size(), 10u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(column(rows, i, "within_bound"), "true") << "row " << i;
    EXPECT_LE(std::stol(column(rows, i, "steps_to_threshold")), std::stol(column(rows, i, "theorem_bound_T")));
  }
}

TEST_F(CliTest, FailedSweepCellExitsOne) {
  const auto sweep = std::string(kVanilla) + "sweep:\n  grid:\n    optimizer.alpha_constant: [1.0, 2.0]\n  seeds: [1]\n";
  EXPECT_EQ(cmd_sweep(write("s.yaml", sweep), options("sweep")), kFailed);
  const auto rows = parse_csv(read("sweep", "sweep.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(column(rows, 1, "status"), "ok");
  EXPECT_EQ(column(rows, 2, "status").rfind("failed", 0), 0u);
}

TEST_F(CliTest, MeasureDropoutSeriesAreWellFormed) {
  const auto cfg = R"(name: m
seed: 3
problem:
  kind: classification
  samples: 400
  batch_size: 16
model:
  hidden: [16]
optimizer:
  steps: 200
  gamma_base: 0.1
  exact_gradients: false
  evaluate_loss: false
measure:
  scenario: dropout
  keep: 0.5
)";
  ASSERT_EQ(cmd_measure(write("m.yaml", cfg), options("m")), kOk) << err_.str();
  const auto summary = parse_csv(read("m", "measure_summary.csv"));
  ASSERT_EQ(summary.size(), 3u);
  for (std::size_t r = 1; r <= 2; ++r) {
    for (const char* col : {"median_c_sim", "median_c_align", "median_overlap"}) {
      const auto v = column(summary, r, col);
      ASSERT_FALSE(v.empty()) << col;
      EXPECT_TRUE(std::isfinite(std::stod(v))) << col;
    }
  }
  const auto plain = parse_csv(read("m", "measure_no_dropout.csv"));
  EXPECT_EQ(plain.size(), 201u);
  std::size_t with_align = 0;
  for (std::size_t i = 1; i < plain.size(); ++i) with_align += !column(plain, i, "c_align").empty();
  EXPECT_GT(with_align, 190u);
}

TEST_F(CliTest, MeasureAtsLowersCoreOverlap) {
  const auto cfg = R"(name: m
seed: 29
problem:
  kind: classification
  samples: 600
  batch_size: 32
model:
  hidden: [32]
optimizer:
  steps: 1000
  gamma_base: 0.1
  exact_gradients: false
  evaluate_loss: false
measure:
  scenario: ats
  exact: true
)";
  ASSERT_EQ(cmd_measure(write("m.yaml", cfg), options("m")), kOk) << err_.str();
  const auto summary = parse_csv(read("m", "measure_summary.csv"));
  ASSERT_EQ(column(summary, 1, "arm"), "ats");
  ASSERT_EQ(column(summary, 2, "arm"), "standard");
  EXPECT_EQ(column(summary, 1, "tail_from"), "800");
  EXPECT_LT(std::stod(column(summary, 1, "median_overlap")), std::stod(column(summary, 2, "median_overlap")));
}
