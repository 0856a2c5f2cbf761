#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dartsplus/config.hpp"
#include "dartsplus/runner.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "key = value config file")->check(CLI::ExistingFile);
  sub->add_option("--seed", args.seed, "seed for data, init and ordering");
  sub->add_option("--out", args.out, "output directory");
  sub->add_option("overrides", args.overrides, "dotted key=value overrides");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DARTS+ search engine and overfitting-model lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", dartsplus::kEngineVersion);
  bool list_keys = false;
  app.add_flag("--list-keys", list_keys, "print every config key with its default and exit");

  CommonArgs args;
  std::vector<std::pair<CLI::App*, dartsplus::CommandKind>> subs = {
      {app.add_subcommand("search", "bi-level architecture search on the toy task"), dartsplus::CommandKind::kSearch},
      {app.add_subcommand("eval-genotype", "train a genotype from scratch and report test accuracy"),
       dartsplus::CommandKind::kEvalGenotype},
      {app.add_subcommand("lemma-train", "train the two-layer overfitting model"), dartsplus::CommandKind::kLemmaTrain},
      {app.add_subcommand("lemma-sigma0", "sigma0(r) over lemma.r_grid"), dartsplus::CommandKind::kLemmaSigma0},
      {app.add_subcommand("lemma-grid", "sign of dL_val/dalpha0 over an (r, sigma_v) grid"),
       dartsplus::CommandKind::kLemmaGrid},
  };
  for (auto& [sub, kind] : subs) add_common(sub, args);
  // --list-keys needs no subcommand
  for (int i = 1; i < argc; ++i)
    if (std::string(argv[i]) == "--list-keys") {
      const auto echo = dartsplus::config_echo(dartsplus::ExperimentConfig{});
      for (const auto& [k, v] : echo) std::cout << k << " = " << v << "\n";
      return 0;
    }

  CLI11_PARSE(app, argc, argv);

  try {
    dartsplus::CommandKind kind = dartsplus::CommandKind::kSearch;
    for (auto& [sub, k] : subs)
      if (sub->parsed()) kind = k;
    std::vector<std::string> overrides = args.overrides;
    if (args.seed) overrides.push_back("seed=" + std::to_string(*args.seed));
    if (!args.out.empty()) overrides.push_back("out=" + args.out);
    std::optional<std::string> path;
    if (!args.config_path.empty()) path = args.config_path;
    const auto cfg = dartsplus::load_config(kind, path, overrides);
    const auto res = dartsplus::run_command(cfg);
    std::cout << res.artifacts.at("result") << "\n";
    return 0;
  } catch (const dartsplus::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
