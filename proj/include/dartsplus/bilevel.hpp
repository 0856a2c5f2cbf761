#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "dartsplus/dataset.hpp"
#include "dartsplus/genotype.hpp"
#include "dartsplus/optim.hpp"
#include "dartsplus/search_space.hpp"
#include "dartsplus/stopping.hpp"

namespace dartsplus {

struct SearchConfig {
  std::size_t max_epochs = 60;
  std::size_t batch_size = 64;
  SgdOptions weight_opt{};      // lr 0.025, momentum 0.9, wd 3e-4
  double weight_lr_min = 0.0;   // cosine floor
  AdamOptions alpha_opt{};      // lr 3e-4, betas (0.5, 0.999), wd 1e-3
  double alpha_init_scale = 1e-3;
  double train_fraction = 0.5;
  double val_fraction = 0.5;
  std::uint64_t seed = 0;
  SupernetConfig net{};

  void validate() const {
    if (max_epochs < 1) throw std::invalid_argument("SearchConfig: max_epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("SearchConfig: batch_size must be >= 1");
    if (!(train_fraction > 0 && train_fraction < 1 && val_fraction > 0 && val_fraction < 1) ||
        train_fraction + val_fraction > 1.0 + 1e-12)
      throw std::invalid_argument("SearchConfig: split fractions must lie in (0,1) and sum to at most 1");
    net.validate();
  }
};

struct StepResult {
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  Genotype genotype;
  std::vector<double> alpha_normal;
  std::vector<double> alpha_reduction;
  std::size_t skip_normal = 0;
  std::size_t skip_reduction = 0;
  double wall_seconds = 0.0;
};

struct StopReport {
  std::optional<Criterion> criterion;  // unset: ran to max_epochs without a stopper verdict
  std::size_t epoch = 0;
  std::string evidence;
  std::string stopper;
  std::vector<TriggerRecord> triggers;
};

struct SearchOutcome {
  std::vector<EpochRecord> records;
  Genotype genotype;
  ArchParams arch;
  StopReport stop;
};

namespace detail {

inline std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t classes = logits.dim(1);
  auto v = logits.data();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < classes; ++k)
      if (v[b * classes + k] > v[b * classes + best]) best = k;
    if (static_cast<int>(best) == labels[b]) ++correct;
  }
  return correct;
}

inline void set_arch_trainable(ArchParams& arch, bool on) {
  arch.normal.set_requires_grad(on);
  arch.reduction.set_requires_grad(on);
}

}  // namespace detail

// One Adam step on d L_val / d alpha with the weights held fixed
// (first-order approximation of the inner optimum).
inline StepResult alpha_step(Supernet& net, ArchParams& arch, const Tensor& x, std::span<const int> y, Adam& adam) {
  net.set_weights_trainable(false);
  detail::set_arch_trainable(arch, true);
  adam.zero_grad();
  Graph g;
  Tensor logits = net.forward(g, x, arch, ops::NormMode::kTrainFrozen);
  Tensor loss = ops::cross_entropy(g, logits, y);
  if (!loss.all_finite()) throw NonFiniteError("alpha_step: validation loss is not finite");
  g.backward(loss);
  adam.step();
  adam.zero_grad();
  net.set_weights_trainable(true);
  return {loss.item(), detail::count_correct(logits, y), y.size()};
}

// One SGD step on d L_train / d w with alpha held fixed.
inline StepResult weight_step(Supernet& net, ArchParams& arch, const Tensor& x, std::span<const int> y,
                              SgdMomentum& sgd) {
  net.set_weights_trainable(true);
  detail::set_arch_trainable(arch, false);
  sgd.zero_grad();
  Graph g;
  Tensor logits = net.forward(g, x, arch, ops::NormMode::kTrain);
  Tensor loss = ops::cross_entropy(g, logits, y);
  if (!loss.all_finite()) throw NonFiniteError("weight_step: training loss is not finite");
  g.backward(loss);
  sgd.step();
  sgd.zero_grad();
  detail::set_arch_trainable(arch, true);
  return {loss.item(), detail::count_correct(logits, y), y.size()};
}

using EpochCallback = std::function<void(const EpochRecord&)>;

// Alternating bi-level search. Each epoch walks the shuffled train and val
// halves in lockstep: one alpha step on a val batch, then one weight step on a
// train batch. After every epoch the genotype is derived and the stopper is
// consulted.
inline SearchOutcome run_search(const SearchConfig& cfg, const ImageDataset& data, Stopper& stopper,
                                const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.channels != cfg.net.in_channels || data.num_classes != cfg.net.num_classes)
    throw std::invalid_argument("run_search: dataset does not match the supernet input/classes");
  Rng rng(cfg.seed);
  const DataSplit split = split_data(data, cfg.train_fraction, cfg.val_fraction, rng.next_u64());
  const std::size_t steps = std::min(split.train.size(), split.val.size()) / cfg.batch_size;
  if (steps == 0)
    throw std::invalid_argument("run_search: dataset too small for one batch of " + std::to_string(cfg.batch_size));

  Rng init_rng = rng.fork(1);
  Supernet net(cfg.net, init_rng);
  ArchParams arch = net.make_arch(init_rng, cfg.alpha_init_scale);
  SgdMomentum sgd(net.parameters(), cfg.weight_opt);
  Adam adam(arch.tensors(), cfg.alpha_opt);
  Rng order_rng = rng.fork(2);

  SearchOutcome out;
  auto train_idx = split.train;
  auto val_idx = split.val;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr(cfg.weight_opt.lr, cfg.weight_lr_min, epoch - 1, cfg.max_epochs);
    sgd.set_lr(lr);
    order_rng.shuffle(train_idx.begin(), train_idx.end());
    order_rng.shuffle(val_idx.begin(), val_idx.end());
    StepResult tr, va;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::span<const std::size_t> vb(val_idx.data() + s * cfg.batch_size, cfg.batch_size);
      const std::span<const std::size_t> tb(train_idx.data() + s * cfg.batch_size, cfg.batch_size);
      try {
        auto [xv, yv] = data.batch(vb);
        const StepResult a = alpha_step(net, arch, xv, yv, adam);
        auto [xt, yt] = data.batch(tb);
        const StepResult w = weight_step(net, arch, xt, yt, sgd);
        va.loss += a.loss * static_cast<double>(a.count);
        va.correct += a.correct;
        va.count += a.count;
        tr.loss += w.loss * static_cast<double>(w.count);
        tr.correct += w.correct;
        tr.count += w.count;
      } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(s) + ")");
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = tr.loss / static_cast<double>(tr.count);
    rec.train_acc = static_cast<double>(tr.correct) / static_cast<double>(tr.count);
    rec.val_loss = va.loss / static_cast<double>(va.count);
    rec.val_acc = static_cast<double>(va.correct) / static_cast<double>(va.count);
    rec.genotype = discretize(arch);
    rec.alpha_normal.assign(arch.normal.data().begin(), arch.normal.data().end());
    rec.alpha_reduction.assign(arch.reduction.data().begin(), arch.reduction.data().end());
    rec.skip_normal = count_skip_connects(rec.genotype, CellKind::kNormal);
    rec.skip_reduction = count_skip_connects(rec.genotype, CellKind::kReduction);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const StopDecision d = stopper.observe({epoch, arch, rec.genotype});
    out.records.push_back(rec);
    if (on_epoch) on_epoch(out.records.back());
    if (d.stops()) {
      out.stop.criterion = d.criterion();
      out.stop.epoch = epoch;
      out.stop.evidence = d.evidence();
      break;
    }
  }
  if (!out.stop.criterion) {
    out.stop.criterion = Criterion::kBudget;
    out.stop.epoch = out.records.back().epoch;
    out.stop.evidence = "reached max_epochs=" + std::to_string(cfg.max_epochs);
  }
  out.stop.stopper = stopper.name();
  if (auto* composed = dynamic_cast<ComposedStopper*>(&stopper)) out.stop.triggers = composed->triggers();
  out.genotype = out.records.back().genotype;
  out.arch = std::move(arch);
  return out;
}

}  // namespace dartsplus
