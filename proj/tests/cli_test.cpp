#include <cstdlib>
#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "test_util.hpp"

// Spawns the installed binary; TSPF_CLI_PATH is injected by the build.

namespace {

namespace fs = std::filesystem;

struct CliResult {
  int exit_code;
  std::string out;
  std::string err;
};

CliResult run_cli(tspf::testutil::TempDir& tmp, const std::string& args,
                  const std::string& env_prefix = "") {
  static int counter = 0;
  const std::string out_file = tmp.file("stdout_" + std::to_string(counter));
  const std::string err_file = tmp.file("stderr_" + std::to_string(counter));
  ++counter;
  std::string cmd = env_prefix + " \"" + TSPF_CLI_PATH + "\" " + args + " > \"" + out_file +
                    "\" 2> \"" + err_file + "\"";
  const int rc = std::system(cmd.c_str());
  return {rc, tspf::testutil::read_text(out_file), tspf::testutil::read_text(err_file)};
}

const char* kTinyIni = R"([experiment]
n = 80
d = 3
c = 5
rct_fraction = 0.2
replications = 2
seed = 5

[train]
r = 4
r_u = 2
hidden_phi = 4
hidden_h = 4
hidden_g = 6
hidden_u = 2
hidden_q = 3
epochs_stage1 = 2
epochs_stage2 = 2
batch_size = 16
sinkhorn_iters = 5
q_inner_steps = 2
)";

const char* kNoBaselines = "\n[experiment]\nbaselines = false\n";

TEST(CliTest, requires_a_subcommand) {
  tspf::testutil::TempDir tmp("cli_nosub");
  EXPECT_NE(run_cli(tmp, "").exit_code, 0);
  EXPECT_NE(run_cli(tmp, "frobnicate").exit_code, 0);
}

TEST(CliTest, run_trains_and_reports) {
  tspf::testutil::TempDir tmp("cli_run");
  const std::string ini = tmp.file("exp.ini");
  tspf::testutil::write_text(ini, kTinyIni);
  const std::string out = tmp.file("results");

  CliResult r = run_cli(tmp, "run --config \"" + ini + "\" --out \"" + out + "\" --workers 2");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.out.find("method"), std::string::npos);
  EXPECT_NE(r.out.find("tspf"), std::string::npos);
  EXPECT_NE(r.out.find("t_learner"), std::string::npos);
  EXPECT_NE(r.out.find("(2/2 replications"), std::string::npos);
  EXPECT_TRUE(fs::exists(out + "/metrics.json"));
  EXPECT_TRUE(fs::exists(out + "/table.txt"));
  EXPECT_TRUE(fs::exists(out + "/rep_1/checkpoint_tspf.json"));

  // report re-renders the same table from the results directory.
  CliResult rep = run_cli(tmp, "report \"" + out + "\"");
  ASSERT_EQ(rep.exit_code, 0) << rep.err;
  EXPECT_NE(rep.out.find("tspf"), std::string::npos);
}

TEST(CliTest, seed_flag_overrides_the_config) {
  tspf::testutil::TempDir tmp("cli_seed");
  const std::string ini = tmp.file("exp.ini");
  tspf::testutil::write_text(ini, std::string(kTinyIni) + kNoBaselines);

  auto metrics = [&](const std::string& tag, const std::string& extra) {
    const std::string out = tmp.file(tag);
    CliResult r = run_cli(tmp, "run --config \"" + ini + "\" --out \"" + out + "\" " + extra);
    EXPECT_EQ(r.exit_code, 0) << r.err;
    return tspf::testutil::read_text(out + "/metrics.json");
  };
  const std::string a = metrics("a", "--seed 42");
  const std::string b = metrics("b", "--seed 42");
  const std::string c = metrics("c", "--seed 43");
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(CliTest, synth_writes_a_bundle) {
  tspf::testutil::TempDir tmp("cli_synth");
  const std::string ini = tmp.file("exp.ini");
  tspf::testutil::write_text(ini, kTinyIni);
  const std::string out = tmp.file("bundle");

  CliResult r = run_cli(tmp, "synth --config \"" + ini + "\" --out \"" + out + "\"");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.out.find("bundle written"), std::string::npos);
  for (const char* name :
       {"obs_train.csv", "rct_train.csv", "validation.csv", "test.csv", "synthesis.json"})
    EXPECT_TRUE(fs::exists(fs::path(out) / name)) << name;
}

TEST(CliTest, tune_scores_a_grid) {
  tspf::testutil::TempDir tmp("cli_tune");
  const std::string ini = tmp.file("exp.ini");
  tspf::testutil::write_text(
      ini, std::string(kTinyIni) + kNoBaselines + "[tune]\ngrid = 1e-3\nmode = full\n");
  const std::string out = tmp.file("tuned");

  CliResult r = run_cli(tmp, "tune --config \"" + ini + "\" --out \"" + out + "\"");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.out.find("best: lambda1=0.001"), std::string::npos);
  EXPECT_NE(r.out.find("1 candidates scored"), std::string::npos);
  EXPECT_TRUE(fs::exists(out + "/tune.json"));
}

TEST(CliTest, out_root_env_var_hosts_default_results) {
  tspf::testutil::TempDir tmp("cli_root");
  const std::string ini = tmp.file("exp.ini");
  tspf::testutil::write_text(ini, std::string(kTinyIni) + kNoBaselines);
  const std::string root = tmp.file("root");

  CliResult r = run_cli(tmp, "run --config \"" + ini + "\"", "TSPF_OUT_ROOT=\"" + root + "\"");
  ASSERT_EQ(r.exit_code, 0) << r.err;
  bool found = false;
  ASSERT_TRUE(fs::exists(root));
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.path().filename().string().rfind("run-", 0) == 0)
      found = fs::exists(entry.path() / "metrics.json");
  }
  EXPECT_TRUE(found);
}

TEST(CliTest, errors_go_to_stderr_with_nonzero_exit) {
  tspf::testutil::TempDir tmp("cli_err");
  CliResult missing = run_cli(tmp, "run --config /nonexistent/exp.ini");
  EXPECT_NE(missing.exit_code, 0);
  EXPECT_NE(missing.err.find("error:"), std::string::npos);
  EXPECT_NE(missing.err.find("/nonexistent/exp.ini"), std::string::npos);

  const std::string bad = tmp.file("bad.ini");
  tspf::testutil::write_text(bad, "[experiment]\nwhat = 3\n");
  CliResult unknown = run_cli(tmp, "run --config \"" + bad + "\"");
  EXPECT_NE(unknown.exit_code, 0);
  EXPECT_NE(unknown.err.find("unknown key"), std::string::npos);

  CliResult no_dir = run_cli(tmp, "report");
  EXPECT_NE(no_dir.exit_code, 0);
  EXPECT_NE(no_dir.err.find("error:"), std::string::npos);

  CliResult no_cfg = run_cli(tmp, "run");
  EXPECT_NE(no_cfg.exit_code, 0);
}

}  // namespace
