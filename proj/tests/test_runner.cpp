#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dartsplus/runner.hpp"

using namespace dartsplus;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dartsplus_runner_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

ExperimentConfig tiny(CommandKind cmd, const fs::path& out, std::vector<std::pair<std::string, std::string>> extra = {}) {
  std::vector<std::pair<std::string, std::string>> ov{{"net.layers", "3"},   {"net.channels", "2"},
                                                      {"task.samples", "64"}, {"task.test_samples", "32"},
                                                      {"batch_size", "16"},   {"max_epochs", "2"},
                                                      {"eval.epochs", "1"},   {"eval.batch_size", "16"},
                                                      {"out", out.string()}};
  ov.insert(ov.end(), extra.begin(), extra.end());
  return resolve_config(cmd, {}, ov);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DARTSPLUS_CLI) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Runner, InjectedStopGivesOneRow) {
  const auto out = scratch("inject");
  const auto res = run_command(tiny(CommandKind::kSearch, out, {{"stop.primary", "injected"}, {"stop.inject_epoch", "1"}}));
  const auto rows = lines(slurp(out / "metrics.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], kMetricsHeader);
  EXPECT_EQ(rows[1].back(), '1');
  ASSERT_TRUE(res.stop.has_value());
  EXPECT_EQ(res.stop->criterion, Criterion::kInjected);
  EXPECT_EQ(res.stop->triggers.size(), 3u);
  const auto alphas = lines(slurp(out / "alphas.csv"));
  EXPECT_EQ(alphas.size(), 1u + 2 * 14);
}

TEST(Runner, BudgetStopLeavesFlagClear) {
  const auto out = scratch("budget");
  run_command(tiny(CommandKind::kSearch, out, {{"stop.primary", "never"}}));
  const auto rows = lines(slurp(out / "metrics.csv"));
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i].back(), '0');
  const auto stop = stop_report_from_json(nlohmann::json::parse(slurp(out / "stop_report.json")));
  EXPECT_EQ(stop.criterion, Criterion::kBudget);
}

TEST(Runner, SameSeedSameCsv) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  run_command(tiny(CommandKind::kSearch, a, {{"stop.primary", "never"}, {"seed", "5"}}));
  run_command(tiny(CommandKind::kSearch, b, {{"stop.primary", "never"}, {"seed", "5"}}));
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "alphas.csv"), slurp(b / "alphas.csv"));
  EXPECT_EQ(slurp(a / "genotype.json"), slurp(b / "genotype.json"));
}

TEST(Runner, ResultJsonRoundTrip) {
  const auto out = scratch("result");
  const auto res = run_command(tiny(CommandKind::kSearch, out, {{"eval.after_search", "true"}}));
  const auto j = nlohmann::json::parse(slurp(out / "result.json"));
  const RunResult back = run_result_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.genotype, res.genotype);
  EXPECT_EQ(back.config, res.config);
  EXPECT_TRUE(back.summary.contains("eval"));
  EXPECT_EQ(slurp(out / "genotype.dot"), export_dot(*res.genotype));
  EXPECT_EQ(genotype_from_json(nlohmann::json::parse(slurp(out / "genotype.json"))), *res.genotype);
  auto bad = j;
  bad["schema_version"] = 99;
  EXPECT_THROW(run_result_from_json(bad), std::runtime_error);
}

TEST(Runner, EvalGenotypeFromSearchOutput) {
  const auto s = scratch("eval_src"), e = scratch("eval_dst");
  run_command(tiny(CommandKind::kSearch, s));
  const auto res = run_command(tiny(CommandKind::kEvalGenotype, e, {{"eval.genotype", (s / "genotype.json").string()}}));
  const auto j = nlohmann::json::parse(slurp(e / "eval.json"));
  EXPECT_EQ(j["epochs"], 1);
  EXPECT_EQ(j["test_accuracy"], res.summary["test_accuracy"]);
}

TEST(Runner, LemmaCommands) {
  const auto a = scratch("sigma0"), b = scratch("grid"), c = scratch("ltrain");
  const auto s0 = run_command(tiny(CommandKind::kLemmaSigma0, a));
  EXPECT_EQ(lines(slurp(a / "sigma0.csv")).size(), 6u);
  EXPECT_EQ(s0.summary["sigma0"].size(), 5u);
  const auto g = run_command(tiny(CommandKind::kLemmaGrid, b));
  EXPECT_EQ(g.summary["cells"], 30);
  EXPECT_EQ(g.summary["phase_agreement"], 30);
  const auto t = run_command(tiny(CommandKind::kLemmaTrain, c, {{"lemma.epochs", "3"}}));
  EXPECT_EQ(lines(slurp(c / "lemma_trajectory.csv")).size(), 5u);
  EXPECT_TRUE(t.summary.contains("eta_rel_error"));
}

TEST(Runner, MakeStopperOrdersPrimaryFirst) {
  StopConfig sc;
  sc.primary = "criterion2";
  EXPECT_EQ(make_stopper(sc)->name(), "primary(criterion2,criterion1)");
  sc.primary = "never";
  EXPECT_EQ(make_stopper(sc)->name(), "primary(never,criterion1,criterion2)");
}

TEST(Cli, ExitCodes) {
  const auto out = scratch("cli");
  EXPECT_EQ(run_cli("--version"), 0);
  EXPECT_EQ(run_cli("--list-keys"), 0);
  EXPECT_EQ(run_cli("search criterion2.window=0 --out " + out.string()), 2);
  EXPECT_EQ(run_cli("search no.such.key=1 --out " + out.string()), 2);
  EXPECT_EQ(run_cli("lemma-sigma0 --out " + out.string()), 0);
  EXPECT_TRUE(fs::exists(out / "sigma0.csv"));
  EXPECT_NE(run_cli("frobnicate"), 0);
}

TEST(Cli, SearchDeterministicAcrossProcesses) {
  const auto a = scratch("cli_a"), b = scratch("cli_b");
  const std::string args =
      "net.layers=3 net.channels=2 task.samples=64 batch_size=16 max_epochs=2 stop.primary=never --seed 3 --out ";
  ASSERT_EQ(run_cli("search " + args + a.string()), 0);
  ASSERT_EQ(run_cli("search " + args + b.string()), 0);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
}
