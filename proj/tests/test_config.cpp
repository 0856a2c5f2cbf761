#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dartsplus/config.hpp"

using namespace dartsplus;

namespace {

using Entries = std::vector<std::pair<std::string, std::string>>;

std::string temp_file(const std::string& name, const std::string& text) {
  const auto p = std::filesystem::temp_directory_path() / ("dartsplus_cfg_" + name);
  std::ofstream(p) << text;
  return p.string();
}

}  // namespace

TEST(Config, EmptyFileGivesDefaults) {
  const auto c = load_config(CommandKind::kSearch, temp_file("empty.txt", ""), {});
  EXPECT_EQ(c.search.max_epochs, 60u);
  EXPECT_EQ(c.search.batch_size, 64u);
  EXPECT_EQ(c.stop.primary, "criterion1");
  EXPECT_EQ(c.stop.criterion1_threshold, 2u);
  EXPECT_EQ(c.stop.criterion2_window, 10u);
  EXPECT_DOUBLE_EQ(c.search.alpha_opt.lr, 3e-4);
  EXPECT_DOUBLE_EQ(c.search.weight_opt.lr, 0.025);
  EXPECT_EQ(c.search.net.cell.num_nodes, 7u);
}

TEST(Config, OverrideWinsOverFile) {
  const auto path = temp_file("ov.txt", "# comment\nmax_epochs = 12\nbatch_size=16  # trailing\nseed = 4\n");
  const auto c = load_config(CommandKind::kSearch, path, {"max_epochs=30"});
  EXPECT_EQ(c.search.max_epochs, 30u);
  EXPECT_EQ(c.search.batch_size, 16u);
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.search.seed, 4u);
  EXPECT_EQ(c.eval.seed, 4u);
  EXPECT_EQ(c.lemma.seed, 4u);
}

TEST(Config, RejectsBadValues) {
  try {
    resolve_config(CommandKind::kSearch, {}, {{"criterion2.window", "0"}});
    FAIL() << "window=0 accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "criterion2.window");
  }
  try {
    resolve_config(CommandKind::kSearch, {{"net.widht", "4"}}, {});
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "net.widht");
  }
  EXPECT_THROW(resolve_config(CommandKind::kSearch, {}, {{"alpha.lr", "abc"}}), ConfigError);
  EXPECT_THROW(resolve_config(CommandKind::kSearch, {}, {{"weight.momentum", "1.5"}}), ConfigError);
  EXPECT_THROW(resolve_config(CommandKind::kSearch, {}, {{"stop.primary", "sometimes"}}), ConfigError);
  EXPECT_THROW(resolve_config(CommandKind::kSearch, {}, {{"emit.dot", "maybe"}}), ConfigError);
  EXPECT_THROW(resolve_config(CommandKind::kSearch, {}, {{"lemma.sigma_grid", "0.2,1.3"}}), ConfigError);
  EXPECT_THROW(parse_override("noequals"), ConfigError);
  EXPECT_THROW(parse_kv_text("a = 1\nbroken line\n"), ConfigError);
}

TEST(Config, LemmaPairsDerived) {
  const auto c = resolve_config(CommandKind::kLemmaTrain, {{"lemma.sigma_t", "0.2"}, {"lemma.mu_v", "1"}}, {});
  EXPECT_NEAR(0.5 * c.lemma.mu_t * c.lemma.mu_t + 0.04, 1.0, 1e-12);
  EXPECT_NEAR(c.lemma.sigma_v, std::sqrt(0.5), 1e-12);
  EXPECT_THROW(resolve_config(CommandKind::kLemmaTrain, {{"lemma.sigma_t", "0.2"}, {"lemma.mu_t", "1"}}, {}),
               ConfigError);
}

TEST(Config, EvalGenotypeNeedsFile) {
  EXPECT_THROW(resolve_config(CommandKind::kEvalGenotype, {}, {}), ConfigError);
  EXPECT_THROW(resolve_config(CommandKind::kEvalGenotype, {}, {{"eval.genotype", "/nonexistent/g.json"}}),
               ConfigError);
  const auto path = temp_file("g.json", "{}");
  EXPECT_NO_THROW(resolve_config(CommandKind::kEvalGenotype, {}, {{"eval.genotype", path}}));
}

TEST(Config, EchoRoundTrips) {
  const auto c = resolve_config(CommandKind::kSearch, {},
                                {{"alpha.lr", "0.003"}, {"task.noise", "2"}, {"lemma.r_grid", "0.5,3"}, {"seed", "9"}});
  const auto echo = config_echo(c);
  EXPECT_EQ(echo.at("alpha.lr"), "0.003");
  EXPECT_EQ(echo.at("lemma.r_grid"), "0.5,3");
  EXPECT_EQ(echo.size(), config_keys().size());
  const auto back = resolve_config(CommandKind::kSearch, parse_kv_text(config_echo_text(c)), {});
  EXPECT_EQ(config_echo(back), echo);
}

TEST(Config, NetAndClassesPropagate) {
  const auto c = resolve_config(CommandKind::kSearch, {}, {{"net.layers", "5"}, {"task.num_classes", "3"}});
  EXPECT_EQ(c.eval.net.layers, 5u);
  EXPECT_EQ(c.search.net.num_classes, 3u);
  EXPECT_EQ(c.eval.net.num_classes, 3u);
}

TEST(Config, CommandNames) {
  for (auto k : {CommandKind::kSearch, CommandKind::kEvalGenotype, CommandKind::kLemmaTrain, CommandKind::kLemmaSigma0,
                 CommandKind::kLemmaGrid})
    EXPECT_EQ(command_from_name(command_name(k)), k);
  EXPECT_THROW(command_from_name("train"), std::exception);
}
