// Runs the ecdlm binary end to end. ECDLM_CLI is set by CMake.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ecdlm_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(ECDLM_CLI) + " " + args + " >" + (log / "stdout.txt").string() + " 2>" +
                          (log / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Json read_json(const fs::path& p) { return Json::parse(slurp(p)); }

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// Small model so a training run takes well under a second.
const char* kTinyTrainConfig = R"({
  "seed": 5,
  "model": {"n_layers": 1, "hidden_dim": 16, "n_heads": 2, "n_experts": 4, "expert_ffn_dim": 8,
            "shared_ffn_dim": 16, "vocab_size": 12, "max_seq_len": 16,
            "routing": {"policy": "%POLICY%", "ec_k": 2, "tc": {"k": 2, "capacity_factor": null,
                        "balance": "aux_loss", "aux_alpha": 0.01, "bias_update_rate": 0.001}}},
  "train": {"batch_size": 4, "total_steps": 12, "eval_interval": 6, "eval_samples_per_bin": 4,
            "n_train_sequences": 16, "n_eval_sequences": 4, "seq_len": 16, "learning_rate": %LR%}
})";

std::string tiny_config(const std::string& policy, const std::string& lr = "0.003") {
  std::string s = kTinyTrainConfig;
  s.replace(s.find("%POLICY%"), 8, policy);
  s.replace(s.find("%LR%"), 4, lr);
  return s;
}

}  // namespace

TEST(Cli, VersionAndHelp) {
  const auto dir = scratch("version");
  EXPECT_EQ(run("--version", dir), 0);
  EXPECT_NE(slurp(dir / "stdout.txt").find("checkpoint format"), std::string::npos);
  EXPECT_EQ(run("--help", dir), 0);
}

TEST(Cli, UsageErrorsExitTwo) {
  const auto dir = scratch("usage");
  EXPECT_EQ(run("", dir), 2);
  EXPECT_EQ(run("route --figure2a --out " + dir.string(), dir), 2);  // no --policy
  EXPECT_EQ(run("route --figure2a --policy ec --out " + dir.string(), dir), 2);  // no --c
  EXPECT_EQ(run("route --figure2a --policy xx", dir), 2);
  EXPECT_EQ(run("schedule-check --kinds , --out " + dir.string(), dir), 2);
  EXPECT_EQ(run("schedule-check --kinds spline --out " + dir.string(), dir), 2);
  EXPECT_EQ(run("simulate --bogus 1", dir), 2);
  EXPECT_EQ(run("analyze --out " + dir.string(), dir), 2);
}

TEST(Cli, RouteFigureExample) {
  const auto dir = scratch("route");
  ASSERT_EQ(run("route --figure2a --policy ec --c 2 --out " + (dir / "ec").string(), dir), 0);
  EXPECT_EQ(read_json(dir / "ec" / "assignment.json")["loads"], Json::array({2, 2, 2}));
  ASSERT_EQ(run("route --figure2a --policy tc --k 1 --out " + (dir / "tc").string(), dir), 0);
  EXPECT_EQ(read_json(dir / "tc" / "assignment.json")["loads"], Json::array({1, 4, 1}));
  const std::string stats = slurp(dir / "tc" / "load_stats.csv");
  EXPECT_NE(stats.find("1;4;1"), std::string::npos);
  const Json m = read_json(dir / "tc" / "manifest.json");
  EXPECT_EQ(m["subcommand"], "route");
  EXPECT_EQ(m["route"]["policy"], "tc");
  EXPECT_TRUE(m.contains("version"));
}

TEST(Cli, RouteMalformedScoresNamesLine) {
  const auto dir = scratch("route_bad");
  write_text(dir / "scores.csv", "e0,e1\n0.1,0.2\n0.3,oops\n");
  EXPECT_EQ(run("route --policy tc --k 1 --scores " + (dir / "scores.csv").string() + " --out " +
                    (dir / "o").string(),
                dir),
            4);
  EXPECT_NE(slurp(dir / "stderr.txt").find("scores.csv:3"), std::string::npos);
}

TEST(Cli, UnknownConfigKeyIsConfigError) {
  const auto dir = scratch("config");
  write_text(dir / "c.json", R"({"route": {"policy": "ec", "c": 2, "figure2a": true, "colour": 1}})");
  EXPECT_EQ(run("--config " + (dir / "c.json").string() + " route --out " + (dir / "o").string(), dir), 3);
  write_text(dir / "broken.json", "{not json");
  EXPECT_EQ(run("--config " + (dir / "broken.json").string() + " route --out " + (dir / "o").string(), dir), 4);
}

TEST(Cli, ScheduleCheckNarrowRange) {
  const auto dir = scratch("schedule");
  ASSERT_EQ(run("schedule-check --k-min 2 --k-max 14 --baseline 8 --out " + dir.string(), dir), 0);
  std::istringstream csv(slurp(dir / "flops.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "kind,expected_s,expected_k,delta");
  int rows = 0;
  while (std::getline(csv, line)) {
    const auto first = line.find(',');
    const auto second = line.find(',', first + 1);
    const double ek = std::stod(line.substr(second + 1, line.find(',', second + 1) - second - 1));
    EXPECT_NEAR(ek, 8.0, 0.02) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 7);
}

TEST(Cli, TrainIsDeterministicAndResumes) {
  const auto dir = scratch("train");
  write_text(dir / "c.json", tiny_config("ec"));
  const std::string cfg = "--config " + (dir / "c.json").string();
  ASSERT_EQ(run(cfg + " train --out " + (dir / "a").string(), dir), 0);
  ASSERT_EQ(run(cfg + " train --out " + (dir / "b").string(), dir), 0);
  EXPECT_EQ(slurp(dir / "a" / "trace.csv"), slurp(dir / "b" / "trace.csv"));
  EXPECT_EQ(slurp(dir / "a" / "drops.csv"), slurp(dir / "b" / "drops.csv"));
  EXPECT_EQ(slurp(dir / "a" / "checkpoint.bin"), slurp(dir / "b" / "checkpoint.bin"));

  // Re-running from the written manifest reproduces the run.
  ASSERT_EQ(run("--config " + (dir / "a" / "manifest.json").string() + " train --out " + (dir / "m").string(),
                dir),
            0);
  EXPECT_EQ(slurp(dir / "a" / "trace.csv"), slurp(dir / "m" / "trace.csv"));

  // 6 steps, then resume to 12: final checkpoint matches the straight run.
  ASSERT_EQ(run(cfg + " train --steps 6 --out " + (dir / "half").string(), dir), 0);
  ASSERT_EQ(run("train --resume " + (dir / "half" / "checkpoint.bin").string() + " --steps 12 --out " +
                    (dir / "rest").string(),
                dir),
            0);
  const Json summary = read_json(dir / "rest" / "summary.json");
  EXPECT_EQ(summary["start_step"], 6);
  EXPECT_EQ(summary["final_step"], 12);
  EXPECT_EQ(summary["checksum"], read_json(dir / "a" / "summary.json")["checksum"]);
}

TEST(Cli, TrainDivergenceExitsFive) {
  const auto dir = scratch("diverge");
  write_text(dir / "c.json", tiny_config("ec", "1e300"));
  EXPECT_EQ(run("--config " + (dir / "c.json").string() + " train --out " + (dir / "o").string(), dir), 5);
  EXPECT_NE(slurp(dir / "stderr.txt").find("error"), std::string::npos);
}

TEST(Cli, RetrofitZeroStepsKeepsWeights) {
  const auto dir = scratch("retrofit");
  write_text(dir / "tc.json", tiny_config("tc"));
  ASSERT_EQ(run("--config " + (dir / "tc.json").string() + " train --out " + (dir / "tc").string(), dir), 0);
  const std::string ckpt = (dir / "tc" / "checkpoint.bin").string();
  ASSERT_EQ(run("retrofit --checkpoint " + ckpt + " --out " + (dir / "r0").string(), dir), 0);
  const Json r = read_json(dir / "r0" / "retrofit.json");
  EXPECT_EQ(r["checksum_before"], r["checksum_after_retrofit"]);

  ASSERT_EQ(run("retrofit --checkpoint " + ckpt + " --schedule linear --k-min 1 --k-max 3 --finetune-steps 4 --out " +
                    (dir / "dyn").string(),
                dir),
            0);
  // dynamic capacity shows up as different realized k across bins
  std::istringstream trace(slurp(dir / "dyn" / "trace.csv"));
  std::string line;
  std::getline(trace, line);
  std::set<std::string> ks;
  while (std::getline(trace, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    ks.insert(f.at(4));
  }
  EXPECT_GT(ks.size(), 1u);

  // an EC checkpoint cannot be retrofitted
  write_text(dir / "ec.json", tiny_config("ec"));
  ASSERT_EQ(run("--config " + (dir / "ec.json").string() + " train --steps 1 --out " + (dir / "ec").string(), dir),
            0);
  EXPECT_EQ(run("retrofit --checkpoint " + (dir / "ec" / "checkpoint.bin").string() + " --out " +
                    (dir / "bad").string(),
                dir),
            3);
}

TEST(Cli, AnalyzeIdenticalTracesGiveUnitRatio) {
  const auto dir = scratch("analyze");
  std::ostringstream csv;
  csv << "step,bin,mean_loss,token_count\n";
  for (int s = 0; s <= 64; ++s) {
    for (int b = 0; b < 2; ++b) csv << s << ',' << b << ',' << 3.0 * std::exp(-0.01 * (b + 1) * s) << ",10\n";
  }
  write_text(dir / "t.csv", csv.str());
  const std::string t = (dir / "t.csv").string();
  ASSERT_EQ(run("analyze --trace " + t + " --trace " + t + " --stage-start 4 --out " + (dir / "o").string(), dir), 0);
  std::istringstream ratio(slurp(dir / "o" / "ratio.csv"));
  std::string line;
  std::getline(ratio, line);
  int rows = 0;
  while (std::getline(ratio, line)) {
    // bins 2 and 3 have no records
    const std::string expected = line[0] < '2' ? "1" : "NA";
    EXPECT_EQ(line.substr(line.rfind(',') + 1), expected) << line;
    ++rows;
  }
  EXPECT_GT(rows, 0);
  EXPECT_TRUE(fs::exists(dir / "o" / "convergence.csv"));
  EXPECT_TRUE(fs::exists(dir / "o" / "trace1_loss_bin0.dat"));

  write_text(dir / "bad.csv", "step,bin,mean_loss,token_count\n0,0,1.0,3\n4,zero,1.0,3\n");
  EXPECT_EQ(run("analyze --trace " + (dir / "bad.csv").string() + " --out " + (dir / "b").string(), dir), 4);
  EXPECT_NE(slurp(dir / "stderr.txt").find("bad.csv:3"), std::string::npos);
}

TEST(Cli, SimulateRepeatable) {
  const auto dir = scratch("simulate");
  const std::string args = "--seed 9 simulate --steps 4 --tokens 512 --out ";
  ASSERT_EQ(run(args + (dir / "a").string(), dir), 0);
  ASSERT_EQ(run(args + (dir / "b").string(), dir), 0);
  EXPECT_EQ(slurp(dir / "a" / "sim.csv"), slurp(dir / "b" / "sim.csv"));
  EXPECT_EQ(slurp(dir / "a" / "ordering.json"), slurp(dir / "b" / "ordering.json"));
  const Json o = read_json(dir / "a" / "ordering.json");
  EXPECT_TRUE(o["ec_first"].get<bool>());
  EXPECT_TRUE(o["cf_monotone"].get<bool>());
  EXPECT_EQ(slurp(dir / "a" / "sim.csv").rfind("policy,mean_step_time,throughput,load_std,drop_ratio\n\"ec", 0), 0u);
  EXPECT_EQ(run("simulate --experts 10 --devices 4 --out " + (dir / "c").string(), dir), 2);
}
