#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dartsplus/bilevel.hpp"
#include "dartsplus/dataset.hpp"
#include "dartsplus/genotype.hpp"
#include "dartsplus/optim.hpp"
#include "dartsplus/search_space.hpp"

namespace dartsplus {

// A cell with exactly the genotype's chosen op on each retained edge.
class DiscreteCell {
 public:
  DiscreteCell(const Genotype& geno, CellKind kind, bool reduction_prev, std::size_t c_prev_prev,
               std::size_t c_prev, std::size_t c, Rng& rng)
      : kind_(kind), channels_(c), num_intermediate_(geno.num_nodes - 3), genes_(geno.cell(kind)) {
    pre0_ = std::make_unique<nn::ReluConvBn>(c_prev_prev, c, 1, reduction_prev ? 2 : 1, 0, rng);
    pre1_ = std::make_unique<nn::ReluConvBn>(c_prev, c, 1, 1, 0, rng);
    for (const Gene& gene : genes_) {
      const std::size_t stride = (kind == CellKind::kReduction && gene.source < 2) ? 2 : 1;
      ops_.push_back(nn::make_operation(gene.op, c, stride, rng));
    }
  }

  Tensor forward(Graph& g, const Tensor& s0, const Tensor& s1, ops::NormMode mode) {
    std::vector<Tensor> states{pre0_->forward(g, s0, mode), pre1_->forward(g, s1, mode)};
    for (std::size_t node = 2; node < 2 + num_intermediate_; ++node) {
      Tensor acc;
      for (std::size_t k = 0; k < genes_.size(); ++k) {
        if (genes_[k].node != node) continue;
        Tensor h = ops_[k]->forward(g, states[genes_[k].source], mode);
        acc = acc.defined() ? ops::add(g, acc, h) : h;
      }
      if (!acc.defined()) throw GenotypeError("DiscreteCell: node " + std::to_string(node) + " has no inputs");
      states.push_back(acc);
    }
    return ops::concat_channels(g, std::vector<Tensor>(states.begin() + 2, states.end()));
  }

  void collect_params(std::vector<Tensor>& out) const {
    pre0_->collect_params(out);
    pre1_->collect_params(out);
    for (const auto& op : ops_) op->collect_params(out);
  }

  CellKind kind() const { return kind_; }
  std::size_t out_channels() const { return channels_ * num_intermediate_; }

 private:
  CellKind kind_;
  std::size_t channels_;
  std::size_t num_intermediate_;
  std::vector<Gene> genes_;
  std::unique_ptr<nn::ReluConvBn> pre0_, pre1_;
  std::vector<std::unique_ptr<nn::Operation>> ops_;
};

// Same macro-skeleton as the supernet with each mixed cell replaced by its
// discrete counterpart.
class GenotypeNet {
 public:
  GenotypeNet(const Genotype& geno, const SupernetConfig& cfg, Rng& rng) {
    validate(geno);
    cfg.validate();
    const std::size_t c_stem = cfg.stem_multiplier * cfg.channels;
    stem_weight_ = nn::kaiming({c_stem, cfg.in_channels, 3, 3}, cfg.in_channels * 9, rng);
    stem_bn_ = std::make_unique<nn::BatchNorm>(c_stem);
    std::size_t c_pp = c_stem, c_p = c_stem, c = cfg.channels;
    bool reduction_prev = false;
    for (CellKind kind : stage_pattern(cfg.layers)) {
      if (kind == CellKind::kReduction) c *= 2;
      cells_.push_back(std::make_unique<DiscreteCell>(geno, kind, reduction_prev, c_pp, c_p, c, rng));
      reduction_prev = kind == CellKind::kReduction;
      c_pp = c_p;
      c_p = cells_.back()->out_channels();
    }
    classifier_ = std::make_unique<nn::Linear>(c_p, cfg.num_classes, rng);
    for (auto& p : parameters()) p.set_requires_grad(true);
  }

  Tensor forward(Graph& g, const Tensor& batch, ops::NormMode mode) {
    Tensor stem = stem_bn_->forward(g, ops::conv2d(g, batch, stem_weight_, {1, 1, 1}), mode);
    Tensor s0 = stem, s1 = stem;
    for (auto& cell : cells_) {
      Tensor next = cell->forward(g, s0, s1, mode);
      s0 = s1;
      s1 = next;
    }
    return classifier_->forward(g, ops::global_avg_pool(g, s1));
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out{stem_weight_};
    stem_bn_->collect_params(out);
    for (const auto& cell : cells_) cell->collect_params(out);
    classifier_->collect_params(out);
    return out;
  }

 private:
  Tensor stem_weight_;
  std::unique_ptr<nn::BatchNorm> stem_bn_;
  std::vector<std::unique_ptr<DiscreteCell>> cells_;
  std::unique_ptr<nn::Linear> classifier_;
};

struct EvalConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  SgdOptions opt{};
  double lr_min = 0.0;
  std::uint64_t seed = 0;
  SupernetConfig net{};

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("EvalConfig: batch_size must be >= 1");
    net.validate();
  }
};

struct EvalReport {
  double test_accuracy = 0.0;
  double test_loss = 0.0;
  double final_train_accuracy = 0.0;  // running accuracy over the last epoch; 0 when epochs == 0
  std::size_t epochs = 0;
  std::size_t params = 0;
};

// Trains a fresh GenotypeNet on all of `train` and scores it on `test` with
// normalization in inference mode.
inline EvalReport eval_genotype(const Genotype& geno, const ImageDataset& train, const ImageDataset& test,
                                const EvalConfig& cfg) {
  cfg.validate();
  validate(geno);
  if (train.channels != cfg.net.in_channels || train.num_classes != cfg.net.num_classes ||
      test.channels != cfg.net.in_channels || test.num_classes != cfg.net.num_classes)
    throw std::invalid_argument("eval_genotype: dataset does not match the network input/classes");
  if (train.size() < cfg.batch_size) throw std::invalid_argument("eval_genotype: training set smaller than one batch");
  Rng rng(cfg.seed);
  Rng init_rng = rng.fork(1);
  Rng order_rng = rng.fork(2);
  GenotypeNet net(geno, cfg.net, init_rng);
  SgdMomentum sgd(net.parameters(), cfg.opt);

  EvalReport report;
  report.epochs = cfg.epochs;
  report.params = count_params(net.parameters());
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t steps = train.size() / cfg.batch_size;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    sgd.set_lr(cosine_lr(cfg.opt.lr, cfg.lr_min, epoch, cfg.epochs));
    order_rng.shuffle(order.begin(), order.end());
    std::size_t correct = 0, seen = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      auto [x, y] = train.batch(std::span<const std::size_t>(order.data() + s * cfg.batch_size, cfg.batch_size));
      sgd.zero_grad();
      Graph g;
      Tensor logits = net.forward(g, x, ops::NormMode::kTrain);
      Tensor loss = ops::cross_entropy(g, logits, y);
      if (!loss.all_finite())
        throw NonFiniteError("eval_genotype: training loss is not finite (epoch " + std::to_string(epoch + 1) + ")");
      g.backward(loss);
      sgd.step();
      correct += detail::count_correct(logits, y);
      seen += y.size();
    }
    report.final_train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
  }

  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < test.size(); start += cfg.batch_size) {
    const std::size_t n = std::min(cfg.batch_size, test.size() - start);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    auto [x, y] = test.batch(idx);
    Graph g;
    g.set_recording(false);
    Tensor logits = net.forward(g, x, ops::NormMode::kEval);
    loss_sum += ops::cross_entropy(g, logits, y).item() * static_cast<double>(n);
    correct += detail::count_correct(logits, y);
  }
  report.test_accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  report.test_loss = loss_sum / static_cast<double>(test.size());
  return report;
}

}  // namespace dartsplus
