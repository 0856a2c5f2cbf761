#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dartsplus/genotype.hpp"
#include "dartsplus/search_space.hpp"

namespace dartsplus {

// Per-edge ordering of the ranked (by default: learnable) candidates by
// descending alpha. Equal alphas keep canonical op order.
struct EdgeRanking {
  CellKind kind;
  std::size_t edge;
  std::vector<OpKind> order;

  friend bool operator==(const EdgeRanking&, const EdgeRanking&) = default;
};

struct RankingSnapshot {
  std::size_t epoch = 0;
  std::vector<EdgeRanking> edges;

  bool same_ranking(const RankingSnapshot& other) const { return edges == other.edges; }
};

enum class RankingScope { kAllEdges, kRetainedEdges };

struct RankingOptions {
  RankingScope scope = RankingScope::kAllEdges;
  // Empty: use is_learnable().
  std::vector<OpKind> ranked_ops;
};

inline RankingSnapshot make_ranking_snapshot(const ArchParams& arch, std::size_t epoch,
                                             const RankingOptions& opt = {},
                                             const Genotype* retained = nullptr) {
  std::vector<std::size_t> slots;
  for (std::size_t c = 0; c < arch.candidates.size(); ++c) {
    const OpKind op = arch.candidates[c];
    const bool ranked = opt.ranked_ops.empty()
                            ? is_learnable(op)
                            : std::find(opt.ranked_ops.begin(), opt.ranked_ops.end(), op) != opt.ranked_ops.end();
    if (ranked) slots.push_back(c);
  }
  if (opt.scope == RankingScope::kRetainedEdges && !retained)
    throw std::invalid_argument("make_ranking_snapshot: retained-edge scope needs a genotype");
  RankingSnapshot snap;
  snap.epoch = epoch;
  for (CellKind kind : {CellKind::kNormal, CellKind::kReduction}) {
    std::vector<bool> keep(arch.spec.num_edges(), opt.scope == RankingScope::kAllEdges);
    if (opt.scope == RankingScope::kRetainedEdges)
      for (const Gene& g : retained->cell(kind)) keep[arch.spec.edge_index(g.source, g.node)] = true;
    for (std::size_t e = 0; e < keep.size(); ++e) {
      if (!keep[e]) continue;
      auto order = slots;
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return arch.at(kind, e, a) > arch.at(kind, e, b); });
      EdgeRanking r{kind, e, {}};
      for (std::size_t c : order) r.order.push_back(arch.candidates[c]);
      snap.edges.push_back(std::move(r));
    }
  }
  return snap;
}

enum class Verdict { kContinue, kStop };
enum class Criterion { kSkipCount, kRankStable, kBudget, kInjected };

inline std::string_view criterion_name(Criterion c) {
  switch (c) {
    case Criterion::kSkipCount: return "skip_count";
    case Criterion::kRankStable: return "rank_stable";
    case Criterion::kBudget: return "budget";
    case Criterion::kInjected: return "injected";
  }
  return "unknown";
}

class StopDecision {
 public:
  static StopDecision proceed() { return StopDecision(); }
  static StopDecision stop(Criterion c, std::size_t epoch, std::string evidence) {
    StopDecision d;
    d.verdict_ = Verdict::kStop;
    d.criterion_ = c;
    d.epoch_ = epoch;
    d.evidence_ = std::move(evidence);
    return d;
  }

  Verdict verdict() const { return verdict_; }
  bool stops() const { return verdict_ == Verdict::kStop; }
  std::optional<Criterion> criterion() const { return criterion_; }
  std::optional<std::size_t> epoch() const { return epoch_; }
  const std::string& evidence() const { return evidence_; }

 private:
  Verdict verdict_ = Verdict::kContinue;
  std::optional<Criterion> criterion_;
  std::optional<std::size_t> epoch_;
  std::string evidence_;
};

// Stops once the normal cell keeps `threshold` or more skip-connects.
inline StopDecision criterion1(const Genotype& g, std::size_t epoch, std::size_t threshold = 2) {
  const std::size_t n = count_skip_connects(g, CellKind::kNormal);
  if (n < threshold) return StopDecision::proceed();
  return StopDecision::stop(Criterion::kSkipCount, epoch,
                            std::to_string(n) + " skip-connects in normal cell (threshold " +
                                std::to_string(threshold) + ")");
}

// Stops when the last `window` snapshots rank every edge identically.
inline StopDecision criterion2(std::span<const RankingSnapshot> history, std::size_t window = 10) {
  if (window == 0) throw std::invalid_argument("criterion2: window must be >= 1");
  if (history.size() < window) return StopDecision::proceed();
  const auto& last = history.back();
  for (std::size_t i = history.size() - window; i + 1 < history.size(); ++i)
    if (!history[i].same_ranking(last)) return StopDecision::proceed();
  const auto& first = history[history.size() - window];
  return StopDecision::stop(Criterion::kRankStable, last.epoch,
                            "ranking unchanged over epochs " + std::to_string(first.epoch) + ".." +
                                std::to_string(last.epoch) + " (window " + std::to_string(window) + ")");
}

// What a stopper sees after each search epoch.
struct EpochObservation {
  std::size_t epoch;
  const ArchParams& arch;
  const Genotype& genotype;
};

class Stopper {
 public:
  virtual ~Stopper() = default;
  virtual StopDecision observe(const EpochObservation& obs) = 0;
  virtual std::string name() const = 0;
};

class NeverStopper : public Stopper {
 public:
  StopDecision observe(const EpochObservation&) override { return StopDecision::proceed(); }
  std::string name() const override { return "never"; }
};

// Test hook: stops at a fixed epoch.
class InjectedStopper : public Stopper {
 public:
  explicit InjectedStopper(std::size_t at_epoch) : at_(at_epoch) {}
  StopDecision observe(const EpochObservation& obs) override {
    if (obs.epoch < at_) return StopDecision::proceed();
    return StopDecision::stop(Criterion::kInjected, obs.epoch, "injected stop at epoch " + std::to_string(at_));
  }
  std::string name() const override { return "injected"; }

 private:
  std::size_t at_;
};

class SkipCountStopper : public Stopper {
 public:
  explicit SkipCountStopper(std::size_t threshold = 2) : threshold_(threshold) {}
  StopDecision observe(const EpochObservation& obs) override {
    return criterion1(obs.genotype, obs.epoch, threshold_);
  }
  std::string name() const override { return "criterion1"; }

 private:
  std::size_t threshold_;
};

class RankStableStopper : public Stopper {
 public:
  explicit RankStableStopper(std::size_t window = 10, RankingOptions opt = {})
      : window_(window), opt_(std::move(opt)) {
    if (window_ == 0) throw std::invalid_argument("criterion2: window must be >= 1");
  }
  StopDecision observe(const EpochObservation& obs) override {
    history_.push_back(make_ranking_snapshot(obs.arch, obs.epoch, opt_, &obs.genotype));
    return criterion2(history_, window_);
  }
  std::string name() const override { return "criterion2"; }
  const std::vector<RankingSnapshot>& history() const { return history_; }

 private:
  std::size_t window_;
  RankingOptions opt_;
  std::vector<RankingSnapshot> history_;
};

struct TriggerRecord {
  std::string stopper;
  std::optional<std::size_t> epoch;  // first epoch it asked to stop
  std::string evidence;
};

enum class ComposeMode {
  kPrimary,  // stop when the first stopper fires
  kAny,      // stop when any stopper fires
};

// Runs several stoppers side by side and remembers when each one first fired.
class ComposedStopper : public Stopper {
 public:
  ComposedStopper(std::vector<std::unique_ptr<Stopper>> members, ComposeMode mode = ComposeMode::kPrimary)
      : members_(std::move(members)), mode_(mode) {
    if (members_.empty()) throw std::invalid_argument("compose_stoppers: no stoppers");
    for (const auto& m : members_) triggers_.push_back({m->name(), std::nullopt, {}});
  }

  StopDecision observe(const EpochObservation& obs) override {
    StopDecision result = StopDecision::proceed();
    for (std::size_t i = 0; i < members_.size(); ++i) {
      StopDecision d = members_[i]->observe(obs);
      if (d.stops() && !triggers_[i].epoch) {
        triggers_[i].epoch = d.epoch();
        triggers_[i].evidence = d.evidence();
      }
      const bool decisive = mode_ == ComposeMode::kAny || i == 0;
      if (d.stops() && decisive && !result.stops()) result = d;
    }
    return result;
  }

  std::string name() const override {
    std::string n = mode_ == ComposeMode::kAny ? "any(" : "primary(";
    for (std::size_t i = 0; i < members_.size(); ++i) n += (i ? "," : "") + members_[i]->name();
    return n + ")";
  }

  const std::vector<TriggerRecord>& triggers() const { return triggers_; }

 private:
  std::vector<std::unique_ptr<Stopper>> members_;
  ComposeMode mode_;
  std::vector<TriggerRecord> triggers_;
};

inline std::unique_ptr<ComposedStopper> compose_stoppers(std::vector<std::unique_ptr<Stopper>> members,
                                                         ComposeMode mode = ComposeMode::kPrimary) {
  return std::make_unique<ComposedStopper>(std::move(members), mode);
}

}  // namespace dartsplus
