#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dartsplus/bilevel.hpp"
#include "dartsplus/config.hpp"
#include "dartsplus/dataset.hpp"
#include "dartsplus/eval.hpp"
#include "dartsplus/genotype.hpp"
#include "dartsplus/lemma.hpp"
#include "dartsplus/stopping.hpp"

namespace dartsplus {

inline constexpr const char* kEngineVersion = "0.1.0";
inline constexpr int kResultSchemaVersion = 1;
inline constexpr const char* kMetricsHeader =
    "epoch,train_loss,train_acc,val_loss,val_acc,skip_count_normal,skip_count_reduction,stop_flag";

enum class LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

// DARTSPLUS_LOG = quiet | info | debug (default info).
inline LogLevel log_level() {
  const char* v = std::getenv("DARTSPLUS_LOG");
  if (!v) return LogLevel::kInfo;
  const std::string s(v);
  if (s == "quiet" || s == "0") return LogLevel::kQuiet;
  if (s == "debug" || s == "2") return LogLevel::kDebug;
  return LogLevel::kInfo;
}

inline void log_line(LogLevel level, const std::string& msg) {
  if (static_cast<int>(log_level()) >= static_cast<int>(level)) std::cerr << msg << "\n";
}

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::optional<Criterion> criterion_from_name(const std::string& s) {
  for (Criterion c : {Criterion::kSkipCount, Criterion::kRankStable, Criterion::kBudget, Criterion::kInjected})
    if (criterion_name(c) == s) return c;
  return std::nullopt;
}

inline nlohmann::json stop_report_to_json(const StopReport& r) {
  nlohmann::json j;
  j["criterion"] = r.criterion ? std::string(criterion_name(*r.criterion)) : std::string();
  j["epoch"] = r.epoch;
  j["evidence"] = r.evidence;
  j["stopper"] = r.stopper;
  nlohmann::json t = nlohmann::json::array();
  for (const auto& tr : r.triggers) {
    nlohmann::json e;
    e["stopper"] = tr.stopper;
    e["epoch"] = tr.epoch ? nlohmann::json(*tr.epoch) : nlohmann::json(nullptr);
    e["evidence"] = tr.evidence;
    t.push_back(e);
  }
  j["triggers"] = t;
  return j;
}

inline StopReport stop_report_from_json(const nlohmann::json& j) {
  StopReport r;
  r.criterion = criterion_from_name(j.at("criterion").get<std::string>());
  r.epoch = j.at("epoch").get<std::size_t>();
  r.evidence = j.at("evidence").get<std::string>();
  r.stopper = j.at("stopper").get<std::string>();
  for (const auto& e : j.at("triggers")) {
    TriggerRecord tr;
    tr.stopper = e.at("stopper").get<std::string>();
    if (!e.at("epoch").is_null()) tr.epoch = e.at("epoch").get<std::size_t>();
    tr.evidence = e.at("evidence").get<std::string>();
    r.triggers.push_back(tr);
  }
  return r;
}

struct RunResult {
  int schema_version = kResultSchemaVersion;
  std::string engine_version = kEngineVersion;
  std::string command;
  std::map<std::string, std::string> config;     // full resolved config echo
  std::map<std::string, std::string> artifacts;  // name -> path
  std::optional<Genotype> genotype;
  std::optional<StopReport> stop;
  nlohmann::json summary = nlohmann::json::object();  // command-specific numbers
  double wall_seconds = 0.0;
};

inline nlohmann::json to_json(const RunResult& r) {
  nlohmann::json j;
  j["schema_version"] = r.schema_version;
  j["engine_version"] = r.engine_version;
  j["command"] = r.command;
  j["config"] = r.config;
  j["artifacts"] = r.artifacts;
  j["genotype"] = r.genotype ? to_json(*r.genotype) : nlohmann::json(nullptr);
  j["stop_report"] = r.stop ? stop_report_to_json(*r.stop) : nlohmann::json(nullptr);
  j["summary"] = r.summary;
  j["wall_seconds"] = r.wall_seconds;
  return j;
}

inline RunResult run_result_from_json(const nlohmann::json& j) {
  RunResult r;
  r.schema_version = j.at("schema_version").get<int>();
  if (r.schema_version != kResultSchemaVersion)
    throw std::runtime_error("result.json: unsupported schema_version " + std::to_string(r.schema_version));
  r.engine_version = j.at("engine_version").get<std::string>();
  r.command = j.at("command").get<std::string>();
  r.config = j.at("config").get<std::map<std::string, std::string>>();
  r.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
  if (!j.at("genotype").is_null()) r.genotype = genotype_from_json(j.at("genotype"));
  if (!j.at("stop_report").is_null()) r.stop = stop_report_from_json(j.at("stop_report"));
  r.summary = j.at("summary");
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

namespace runner_detail {

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + p.string());
}

inline std::string metrics_csv(const std::vector<EpochRecord>& records, bool criterion_fired) {
  std::string s = std::string(kMetricsHeader) + "\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const bool flag = criterion_fired && i + 1 == records.size();
    s += std::to_string(r.epoch) + "," + fmt17(r.train_loss) + "," + fmt17(r.train_acc) + "," + fmt17(r.val_loss) +
         "," + fmt17(r.val_acc) + "," + std::to_string(r.skip_normal) + "," + std::to_string(r.skip_reduction) + "," +
         (flag ? "1" : "0") + "\n";
  }
  return s;
}

// One row per (epoch, cell kind, edge) with one column per candidate op.
inline std::string alphas_csv(const std::vector<EpochRecord>& records, const ArchParams& arch) {
  std::string s = "epoch,cell,edge,from,to";
  for (OpKind k : arch.candidates) s += "," + std::string(op_name(k));
  s += "\n";
  const auto edges = arch.spec.edges();
  const std::size_t kc = arch.candidates.size();
  for (const auto& r : records)
    for (CellKind kind : {CellKind::kNormal, CellKind::kReduction}) {
      const auto& a = kind == CellKind::kNormal ? r.alpha_normal : r.alpha_reduction;
      for (std::size_t e = 0; e < edges.size(); ++e) {
        s += std::to_string(r.epoch) + "," + std::string(cell_kind_name(kind)) + "," + std::to_string(e) + "," +
             std::to_string(edges[e].from) + "," + std::to_string(edges[e].to);
        for (std::size_t c = 0; c < kc; ++c) s += "," + fmt17(a[e * kc + c]);
        s += "\n";
      }
    }
  return s;
}

inline std::unique_ptr<Stopper> make_member(const std::string& name, const StopConfig& sc) {
  if (name == "criterion1") return std::make_unique<SkipCountStopper>(sc.criterion1_threshold);
  if (name == "criterion2") return std::make_unique<RankStableStopper>(sc.criterion2_window, RankingOptions{sc.criterion2_scope, {}});
  if (name == "injected") return std::make_unique<InjectedStopper>(sc.inject_epoch);
  return std::make_unique<NeverStopper>();
}

}  // namespace runner_detail

// The configured primary stopper followed by both criteria as observers, so
// the report carries every criterion's would-have-stopped epoch.
inline std::unique_ptr<ComposedStopper> make_stopper(const StopConfig& sc) {
  std::vector<std::unique_ptr<Stopper>> members;
  members.push_back(runner_detail::make_member(sc.primary, sc));
  for (const char* other : {"criterion1", "criterion2"})
    if (sc.primary != other) members.push_back(runner_detail::make_member(other, sc));
  return compose_stoppers(std::move(members), ComposeMode::kPrimary);
}

inline nlohmann::json eval_report_json(const EvalReport& r) {
  return {{"test_accuracy", r.test_accuracy},
          {"test_loss", r.test_loss},
          {"final_train_accuracy", r.final_train_accuracy},
          {"epochs", r.epochs},
          {"params", r.params}};
}

inline RunResult run_command(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  RunResult res;
  res.command = command_name(cfg.command);
  res.config = config_echo(cfg);
  auto emit = [&](const std::string& name, const std::string& file, const std::string& text) {
    runner_detail::write_file(out / file, text);
    res.artifacts[name] = (out / file).string();
  };
  emit("config", "config.txt", config_echo_text(cfg));

  switch (cfg.command) {
    case CommandKind::kSearch: {
      const ImageDataset data = make_toy_dataset(cfg.task, cfg.seed);
      auto stopper = make_stopper(cfg.stop);
      const SearchOutcome so = run_search(cfg.search, data, *stopper, [&](const EpochRecord& r) {
        log_line(LogLevel::kInfo, "epoch " + std::to_string(r.epoch) + " train_acc " + fmt17(r.train_acc) +
                                      " val_acc " + fmt17(r.val_acc) + " skip_normal " + std::to_string(r.skip_normal));
      });
      const bool fired = so.stop.criterion && *so.stop.criterion != Criterion::kBudget;
      emit("metrics", "metrics.csv", runner_detail::metrics_csv(so.records, fired));
      if (cfg.emit_alphas) emit("alphas", "alphas.csv", runner_detail::alphas_csv(so.records, so.arch));
      emit("genotype", "genotype.json", to_json(so.genotype).dump(2) + "\n");
      if (cfg.emit_dot) emit("dot", "genotype.dot", export_dot(so.genotype));
      emit("stop_report", "stop_report.json", stop_report_to_json(so.stop).dump(2) + "\n");
      res.genotype = so.genotype;
      res.stop = so.stop;
      res.summary["epochs_run"] = so.records.size();
      res.summary["final_val_acc"] = so.records.back().val_acc;
      res.summary["final_train_acc"] = so.records.back().train_acc;
      if (cfg.eval_after_search) {
        const ImageDataset test = make_toy_test_set(cfg.task, cfg.seed);
        res.summary["eval"] = eval_report_json(eval_genotype(so.genotype, data, test, cfg.eval));
      }
      break;
    }
    case CommandKind::kEvalGenotype: {
      const Genotype geno = genotype_from_json(nlohmann::json::parse(read_text_file(cfg.genotype_path)));
      const ImageDataset train = make_toy_dataset(cfg.task, cfg.seed);
      const ImageDataset test = make_toy_test_set(cfg.task, cfg.seed);
      const EvalReport rep = eval_genotype(geno, train, test, cfg.eval);
      emit("eval", "eval.json", eval_report_json(rep).dump(2) + "\n");
      res.genotype = geno;
      res.summary = eval_report_json(rep);
      break;
    }
    case CommandKind::kLemmaTrain: {
      const auto traj = lemma::train_lemma_bilevel(cfg.lemma);
      std::string csv = "epoch,alpha0,W00,W01,W10,W11,w_r0,w_r1,train_loss,val_loss\n";
      for (const auto& s : traj.snapshots) {
        csv += std::to_string(s.epoch) + "," + fmt17(s.alpha0);
        for (double w : s.W) csv += "," + fmt17(w);
        csv += "," + fmt17(s.w_r[0]) + "," + fmt17(s.w_r[1]) + "," + fmt17(s.train_loss) + "," + fmt17(s.val_loss) + "\n";
      }
      emit("trajectory", "lemma_trajectory.csv", csv);
      const auto held_out = lemma::gen_mixture(cfg.lemma.mu_t, cfg.lemma.sigma_t, 10000, Rng(cfg.seed).fork(0x401d).next_u64());
      const auto fit = lemma::fit_fixed_point(traj.model, cfg.lemma.mu_t, held_out);
      res.summary = {{"cos_w_r_e", fit.cos_w_r_e},       {"eta_hat", fit.eta_hat},
                     {"eta_expected", fit.eta_expected}, {"eta_rel_error", fit.eta_rel_error},
                     {"residual_rel", fit.residual_rel}, {"final_alpha0", traj.model.alpha0}};
      break;
    }
    case CommandKind::kLemmaSigma0: {
      std::string csv = "r,sigma0,g_at_root\n";
      nlohmann::json rows = nlohmann::json::array();
      for (double r : cfg.r_grid) {
        const auto s = lemma::sigma0_of_r(r, cfg.lemma_alpha0, cfg.lemma.mu_t);
        csv += fmt17(r) + "," + fmt17(s.sigma0) + "," + fmt17(s.g_at_root) + "\n";
        rows.push_back({{"r", r}, {"sigma0", s.sigma0}});
      }
      emit("sigma0", "sigma0.csv", csv);
      res.summary["sigma0"] = rows;
      break;
    }
    case CommandKind::kLemmaGrid: {
      const auto cells = lemma::lemma_grid(cfg.r_grid, cfg.sigma_grid, cfg.lemma_alpha0, cfg.lemma.mu_t);
      std::string csv = "r,sigma_v,g,grad_alpha0,sigma0,skip_preferred\n";
      std::size_t agree = 0;
      for (const auto& c : cells) {
        const bool skip_preferred = c.grad_alpha0 < 0.0;
        if (skip_preferred == (c.sigma_v > c.sigma0)) ++agree;
        csv += fmt17(c.r) + "," + fmt17(c.sigma_v) + "," + fmt17(c.g) + "," + fmt17(c.grad_alpha0) + "," +
               fmt17(c.sigma0) + "," + (skip_preferred ? "1" : "0") + "\n";
      }
      emit("grid", "lemma_grid.csv", csv);
      res.summary["cells"] = cells.size();
      res.summary["phase_agreement"] = agree;
      break;
    }
  }
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.artifacts["result"] = (out / "result.json").string();
  runner_detail::write_file(out / "result.json", to_json(res).dump(2) + "\n");
  return res;
}

}  // namespace dartsplus
