#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dartsplus/bilevel.hpp"
#include "dartsplus/dataset.hpp"
#include "dartsplus/eval.hpp"
#include "dartsplus/lemma.hpp"
#include "dartsplus/stopping.hpp"

namespace dartsplus {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::invalid_argument(key.empty() ? what : key + ": " + what), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

enum class CommandKind { kSearch, kEvalGenotype, kLemmaTrain, kLemmaSigma0, kLemmaGrid };

inline std::string command_name(CommandKind k) {
  switch (k) {
    case CommandKind::kSearch: return "search";
    case CommandKind::kEvalGenotype: return "eval-genotype";
    case CommandKind::kLemmaTrain: return "lemma-train";
    case CommandKind::kLemmaSigma0: return "lemma-sigma0";
    case CommandKind::kLemmaGrid: return "lemma-grid";
  }
  return "?";
}

inline CommandKind command_from_name(const std::string& s) {
  for (CommandKind k : {CommandKind::kSearch, CommandKind::kEvalGenotype, CommandKind::kLemmaTrain,
                        CommandKind::kLemmaSigma0, CommandKind::kLemmaGrid})
    if (command_name(k) == s) return k;
  throw ConfigError("command", "unknown command '" + s + "'");
}

struct StopConfig {
  std::string primary = "criterion1";  // criterion1 | criterion2 | never | injected
  std::size_t criterion1_threshold = 2;
  std::size_t criterion2_window = 10;
  RankingScope criterion2_scope = RankingScope::kAllEdges;
  std::size_t inject_epoch = 1;
};

struct ExperimentConfig {
  CommandKind command = CommandKind::kSearch;
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  SearchConfig search{};
  ToyTaskConfig task{};
  StopConfig stop{};
  EvalConfig eval{};
  std::string genotype_path;    // eval-genotype input
  bool eval_after_search = false;
  lemma::LemmaConfig lemma{};
  double lemma_alpha0 = 0.5;    // alpha0 for sigma0 / grid
  std::vector<double> r_grid{0.5, 1.0, 2.0, 4.0, 8.0};
  std::vector<double> sigma_grid{0.1, 0.25, 0.4, 0.55, 0.7, 0.85};
  bool emit_alphas = true;
  bool emit_dot = true;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest %g form that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[64];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    if (!std::isfinite(d)) throw std::invalid_argument("non-finite");
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError(key, "integer out of range: '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(key, trim(item)));
  if (out.empty()) throw ConfigError(key, "expected a comma-separated list of numbers");
  return out;
}

inline std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
  return s;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

// Every recognized key. Lemma mu/sigma pairs are resolved afterwards so either
// side of the normalization can be given.
inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    auto dbl = [&](const std::string& key, std::function<double&(ExperimentConfig&)> ref, double lo, double hi,
                   bool lo_open = false) {
      f[key] = {[=](ExperimentConfig& c, const std::string& v) {
                  const double d = parse_double(key, v);
                  if (d < lo || d > hi || (lo_open && d == lo))
                    throw ConfigError(key, "value " + v + " outside " + (lo_open ? "(" : "[") + fmt_double(lo) +
                                               ", " + fmt_double(hi) + "]");
                  ref(c) = d;
                },
                [=](const ExperimentConfig& c) { return fmt_double(ref(const_cast<ExperimentConfig&>(c))); }};
    };
    auto sz = [&](const std::string& key, std::function<std::size_t&(ExperimentConfig&)> ref, std::size_t min_value) {
      f[key] = {[=](ExperimentConfig& c, const std::string& v) {
                  const auto n = parse_u64(key, v);
                  if (n < min_value) throw ConfigError(key, "must be >= " + std::to_string(min_value));
                  ref(c) = static_cast<std::size_t>(n);
                },
                [=](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); }};
    };
    auto flag = [&](const std::string& key, std::function<bool&(ExperimentConfig&)> ref) {
      f[key] = {[=](ExperimentConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); },
                [=](const ExperimentConfig& c) {
                  return std::string(ref(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
                }};
    };
    constexpr double inf = std::numeric_limits<double>::infinity();

    f["seed"] = {[](ExperimentConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
                 [](const ExperimentConfig& c) { return std::to_string(c.seed); }};
    f["out"] = {[](ExperimentConfig& c, const std::string& v) {
                  if (v.empty()) throw ConfigError("out", "must not be empty");
                  c.out_dir = v;
                },
                [](const ExperimentConfig& c) { return c.out_dir; }};

    sz("max_epochs", [](ExperimentConfig& c) -> std::size_t& { return c.search.max_epochs; }, 1);
    sz("batch_size", [](ExperimentConfig& c) -> std::size_t& { return c.search.batch_size; }, 1);
    dbl("weight.lr", [](ExperimentConfig& c) -> double& { return c.search.weight_opt.lr; }, 0, inf);
    dbl("weight.lr_min", [](ExperimentConfig& c) -> double& { return c.search.weight_lr_min; }, 0, inf);
    dbl("weight.momentum", [](ExperimentConfig& c) -> double& { return c.search.weight_opt.momentum; }, 0, 1);
    dbl("weight.decay", [](ExperimentConfig& c) -> double& { return c.search.weight_opt.weight_decay; }, 0, inf);
    dbl("alpha.lr", [](ExperimentConfig& c) -> double& { return c.search.alpha_opt.lr; }, 0, inf);
    dbl("alpha.beta1", [](ExperimentConfig& c) -> double& { return c.search.alpha_opt.beta1; }, 0, 1);
    dbl("alpha.beta2", [](ExperimentConfig& c) -> double& { return c.search.alpha_opt.beta2; }, 0, 1);
    dbl("alpha.decay", [](ExperimentConfig& c) -> double& { return c.search.alpha_opt.weight_decay; }, 0, inf);
    dbl("alpha.init_scale", [](ExperimentConfig& c) -> double& { return c.search.alpha_init_scale; }, 0, inf);
    dbl("split.train", [](ExperimentConfig& c) -> double& { return c.search.train_fraction; }, 0, 1, true);
    dbl("split.val", [](ExperimentConfig& c) -> double& { return c.search.val_fraction; }, 0, 1, true);

    sz("net.channels", [](ExperimentConfig& c) -> std::size_t& { return c.search.net.channels; }, 1);
    sz("net.layers", [](ExperimentConfig& c) -> std::size_t& { return c.search.net.layers; }, 1);
    sz("net.nodes", [](ExperimentConfig& c) -> std::size_t& { return c.search.net.cell.num_nodes; }, 4);
    sz("net.stem_multiplier", [](ExperimentConfig& c) -> std::size_t& { return c.search.net.stem_multiplier; }, 1);

    sz("task.samples", [](ExperimentConfig& c) -> std::size_t& { return c.task.samples; }, 2);
    sz("task.test_samples", [](ExperimentConfig& c) -> std::size_t& { return c.task.test_samples; }, 1);
    sz("task.image_size", [](ExperimentConfig& c) -> std::size_t& { return c.task.image_size; }, 3);
    sz("task.num_classes", [](ExperimentConfig& c) -> std::size_t& { return c.task.num_classes; }, 2);
    dbl("task.noise", [](ExperimentConfig& c) -> double& { return c.task.noise; }, 0, inf);
    dbl("task.amplitude", [](ExperimentConfig& c) -> double& { return c.task.amplitude; }, 0, inf);

    f["stop.primary"] = {[](ExperimentConfig& c, const std::string& v) {
                           if (v != "criterion1" && v != "criterion2" && v != "never" && v != "injected")
                             throw ConfigError("stop.primary", "expected criterion1|criterion2|never|injected, got '" + v + "'");
                           c.stop.primary = v;
                         },
                         [](const ExperimentConfig& c) { return c.stop.primary; }};
    sz("stop.inject_epoch", [](ExperimentConfig& c) -> std::size_t& { return c.stop.inject_epoch; }, 1);
    sz("criterion1.threshold", [](ExperimentConfig& c) -> std::size_t& { return c.stop.criterion1_threshold; }, 1);
    sz("criterion2.window", [](ExperimentConfig& c) -> std::size_t& { return c.stop.criterion2_window; }, 1);
    f["criterion2.scope"] = {[](ExperimentConfig& c, const std::string& v) {
                               if (v == "all")
                                 c.stop.criterion2_scope = RankingScope::kAllEdges;
                               else if (v == "retained")
                                 c.stop.criterion2_scope = RankingScope::kRetainedEdges;
                               else
                                 throw ConfigError("criterion2.scope", "expected all|retained, got '" + v + "'");
                             },
                             [](const ExperimentConfig& c) {
                               return std::string(c.stop.criterion2_scope == RankingScope::kAllEdges ? "all" : "retained");
                             }};

    sz("eval.epochs", [](ExperimentConfig& c) -> std::size_t& { return c.eval.epochs; }, 0);
    sz("eval.batch_size", [](ExperimentConfig& c) -> std::size_t& { return c.eval.batch_size; }, 1);
    dbl("eval.lr", [](ExperimentConfig& c) -> double& { return c.eval.opt.lr; }, 0, inf);
    dbl("eval.momentum", [](ExperimentConfig& c) -> double& { return c.eval.opt.momentum; }, 0, 1);
    dbl("eval.decay", [](ExperimentConfig& c) -> double& { return c.eval.opt.weight_decay; }, 0, inf);
    f["eval.genotype"] = {[](ExperimentConfig& c, const std::string& v) { c.genotype_path = v; },
                          [](const ExperimentConfig& c) { return c.genotype_path; }};
    flag("eval.after_search", [](ExperimentConfig& c) -> bool& { return c.eval_after_search; });

    dbl("lemma.mu_t", [](ExperimentConfig& c) -> double& { return c.lemma.mu_t; }, 0, std::sqrt(2.0));
    dbl("lemma.sigma_t", [](ExperimentConfig& c) -> double& { return c.lemma.sigma_t; }, 0, 1);
    dbl("lemma.mu_v", [](ExperimentConfig& c) -> double& { return c.lemma.mu_v; }, 0, std::sqrt(2.0));
    dbl("lemma.sigma_v", [](ExperimentConfig& c) -> double& { return c.lemma.sigma_v; }, 0, 1);
    dbl("lemma.r", [](ExperimentConfig& c) -> double& { return c.lemma.r; }, 0, inf, true);
    sz("lemma.n_train", [](ExperimentConfig& c) -> std::size_t& { return c.lemma.n_train; }, 2);
    sz("lemma.n_val", [](ExperimentConfig& c) -> std::size_t& { return c.lemma.n_val; }, 2);
    sz("lemma.epochs", [](ExperimentConfig& c) -> std::size_t& { return c.lemma.epochs; }, 1);
    sz("lemma.batch_size", [](ExperimentConfig& c) -> std::size_t& { return c.lemma.batch_size; }, 1);
    dbl("lemma.lr_w", [](ExperimentConfig& c) -> double& { return c.lemma.lr_w; }, 0, inf);
    dbl("lemma.lr_alpha", [](ExperimentConfig& c) -> double& { return c.lemma.lr_alpha; }, 0, inf);
    dbl("lemma.alpha0", [](ExperimentConfig& c) -> double& { return c.lemma_alpha0; }, 0, 1, true);
    dbl("lemma.alpha0_init", [](ExperimentConfig& c) -> double& { return c.lemma.alpha0_init; }, 0, 1, true);
    flag("lemma.train_alpha", [](ExperimentConfig& c) -> bool& { return c.lemma.train_alpha; });
    f["lemma.r_grid"] = {[](ExperimentConfig& c, const std::string& v) { c.r_grid = parse_list("lemma.r_grid", v); },
                         [](const ExperimentConfig& c) { return fmt_list(c.r_grid); }};
    f["lemma.sigma_grid"] = {
        [](ExperimentConfig& c, const std::string& v) { c.sigma_grid = parse_list("lemma.sigma_grid", v); },
        [](const ExperimentConfig& c) { return fmt_list(c.sigma_grid); }};

    flag("emit.alphas", [](ExperimentConfig& c) -> bool& { return c.emit_alphas; });
    flag("emit.dot", [](ExperimentConfig& c) -> bool& { return c.emit_dot; });
    return f;
  }();
  return table;
}

}  // namespace config_detail

// key=value pairs in file order; '#' starts a comment.
inline std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text,
                                                                      const std::string& origin = "config") {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("", origin + ":" + std::to_string(lineno) + ": expected key = value");
    out.emplace_back(config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
  }
  return out;
}

inline std::pair<std::string, std::string> parse_override(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("", "override '" + arg + "' is not key=value");
  return {config_detail::trim(arg.substr(0, eq)), config_detail::trim(arg.substr(eq + 1))};
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : config_detail::fields()) keys.push_back(k);
  return keys;
}

// Defaults, then file entries, then overrides (later wins). Unknown keys are
// rejected.
inline ExperimentConfig resolve_config(CommandKind command, const std::vector<std::pair<std::string, std::string>>& file_entries,
                                       const std::vector<std::pair<std::string, std::string>>& overrides) {
  ExperimentConfig c;
  c.command = command;
  std::map<std::string, std::string> given;
  for (const auto* list : {&file_entries, &overrides})
    for (const auto& [k, v] : *list) {
      const auto& table = config_detail::fields();
      auto it = table.find(k);
      if (it == table.end()) throw ConfigError(k, "unknown key");
      it->second.set(c, v);
      given[k] = v;
    }

  // either side of each normalized (mu, sigma) pair may be given
  auto pair_up = [&](const char* mu_key, const char* sigma_key, double& mu, double& sigma) {
    const bool has_mu = given.count(mu_key) > 0, has_sigma = given.count(sigma_key) > 0;
    if (has_mu && !has_sigma)
      sigma = lemma::normalized_sigma(mu);
    else if (!has_mu && has_sigma)
      mu = lemma::normalized_mu(sigma);
    else if (has_mu && has_sigma && std::abs(0.5 * mu * mu + sigma * sigma - 1.0) > 1e-9)
      throw ConfigError(mu_key, "mu^2/2 + sigma^2 must equal 1 (give only one of " + std::string(mu_key) + ", " +
                                    sigma_key + " to derive the other)");
  };
  pair_up("lemma.mu_t", "lemma.sigma_t", c.lemma.mu_t, c.lemma.sigma_t);
  pair_up("lemma.mu_v", "lemma.sigma_v", c.lemma.mu_v, c.lemma.sigma_v);

  c.search.seed = c.seed;
  c.eval.seed = c.seed;
  c.lemma.seed = c.seed;
  c.eval.net = c.search.net;
  c.search.net.num_classes = c.task.num_classes;
  c.eval.net.num_classes = c.task.num_classes;

  try {
    c.search.validate();
    c.eval.validate();
    if (command == CommandKind::kLemmaTrain) c.lemma.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError("", e.what());
  }
  for (double r : c.r_grid)
    if (!(r > 0)) throw ConfigError("lemma.r_grid", "values must be positive");
  for (double s : c.sigma_grid)
    if (!(s >= 0 && s <= 1)) throw ConfigError("lemma.sigma_grid", "values must lie in [0, 1]");
  if (command == CommandKind::kEvalGenotype) {
    if (c.genotype_path.empty()) throw ConfigError("eval.genotype", "required for eval-genotype");
    if (!std::filesystem::exists(c.genotype_path))
      throw ConfigError("eval.genotype", "file not found: " + c.genotype_path);
  }
  return c;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("", "cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ExperimentConfig load_config(CommandKind command, const std::optional<std::string>& path,
                                    const std::vector<std::string>& overrides) {
  std::vector<std::pair<std::string, std::string>> file_entries;
  if (path) file_entries = parse_kv_text(read_text_file(*path), *path);
  std::vector<std::pair<std::string, std::string>> ov;
  for (const auto& o : overrides) ov.push_back(parse_override(o));
  return resolve_config(command, file_entries, ov);
}

// Every key with its resolved value, sorted; parses back to the same config.
inline std::map<std::string, std::string> config_echo(const ExperimentConfig& c) {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : config_detail::fields()) out[k] = f.get(c);
  return out;
}

inline std::string config_echo_text(const ExperimentConfig& c) {
  std::string s = "# command: " + command_name(c.command) + "\n";
  for (const auto& [k, v] : config_echo(c)) s += k + " = " + v + "\n";
  return s;
}

}  // namespace dartsplus
