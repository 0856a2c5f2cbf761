#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dartsplus/ops.hpp"
#include "dartsplus/rng.hpp"
#include "dartsplus/tensor.hpp"

namespace dartsplus {

enum class OpKind : int {
  kZero = 0,
  kSkipConnect,
  kMaxPool3x3,
  kAvgPool3x3,
  kSepConv3x3,
  kSepConv5x5,
  kDilConv3x3,
  kDilConv5x5,
};

inline constexpr std::array<OpKind, 8> kAllOps = {
    OpKind::kZero,       OpKind::kSkipConnect, OpKind::kMaxPool3x3, OpKind::kAvgPool3x3,
    OpKind::kSepConv3x3, OpKind::kSepConv5x5,  OpKind::kDilConv3x3, OpKind::kDilConv5x5,
};

inline std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::kZero: return "zero";
    case OpKind::kSkipConnect: return "skip_connect";
    case OpKind::kMaxPool3x3: return "max_pool_3x3";
    case OpKind::kAvgPool3x3: return "avg_pool_3x3";
    case OpKind::kSepConv3x3: return "sep_conv_3x3";
    case OpKind::kSepConv5x5: return "sep_conv_5x5";
    case OpKind::kDilConv3x3: return "dil_conv_3x3";
    case OpKind::kDilConv5x5: return "dil_conv_5x5";
  }
  return "unknown";
}

inline std::optional<OpKind> op_from_name(std::string_view name) {
  for (OpKind op : kAllOps)
    if (op_name(op) == name) return op;
  return std::nullopt;
}

// Ops that carry trainable weights.
inline constexpr bool is_learnable(OpKind op) {
  return op == OpKind::kSepConv3x3 || op == OpKind::kSepConv5x5 || op == OpKind::kDilConv3x3 ||
         op == OpKind::kDilConv5x5;
}

enum class CellKind { kNormal = 0, kReduction = 1 };

inline std::string_view cell_kind_name(CellKind k) {
  return k == CellKind::kNormal ? "normal" : "reduction";
}

struct Edge {
  std::size_t from;
  std::size_t to;
};

// Cell DAG: nodes 0 and 1 are the two cell inputs, nodes 2..N-2 are
// intermediate, node N-1 is the channel concatenation of the intermediates.
struct CellSpec {
  std::size_t num_nodes = 7;

  void validate() const {
    if (num_nodes < 4) throw std::invalid_argument("CellSpec: num_nodes must be >= 4");
  }
  std::size_t num_intermediate() const { return num_nodes - 3; }
  std::size_t first_intermediate() const { return 2; }
  std::size_t output_node() const { return num_nodes - 1; }

  // Edges grouped by target node, sources ascending.
  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    for (std::size_t j = 2; j + 1 < num_nodes; ++j)
      for (std::size_t i = 0; i < j; ++i) out.push_back({i, j});
    return out;
  }
  std::size_t num_edges() const { return edges().size(); }

  std::size_t edge_index(std::size_t from, std::size_t to) const {
    if (to < 2 || to + 1 >= num_nodes || from >= to)
      throw std::out_of_range("CellSpec: no edge " + std::to_string(from) + "->" + std::to_string(to));
    // edges into nodes 2..to-1 come first: sum_{j=2}^{to-1} j
    return (to * (to - 1)) / 2 - 1 + from;
  }
};

// Architecture parameters: one [num_edges, num_candidates] table per cell
// kind, shared by every cell of that kind.
struct ArchParams {
  CellSpec spec;
  std::vector<OpKind> candidates;
  Tensor normal;
  Tensor reduction;

  ArchParams() = default;
  ArchParams(CellSpec s, std::vector<OpKind> cands)
      : spec(s),
        candidates(std::move(cands)),
        normal({s.num_edges(), candidates.size()}, true),
        reduction({s.num_edges(), candidates.size()}, true) {
    if (candidates.empty()) throw std::invalid_argument("ArchParams: empty candidate set");
  }

  static ArchParams random(CellSpec s, std::vector<OpKind> cands, Rng& rng, double scale) {
    ArchParams a(s, std::move(cands));
    for (auto& v : a.normal.data()) v = scale * rng.normal();
    for (auto& v : a.reduction.data()) v = scale * rng.normal();
    return a;
  }

  Tensor& table(CellKind k) { return k == CellKind::kNormal ? normal : reduction; }
  const Tensor& table(CellKind k) const { return k == CellKind::kNormal ? normal : reduction; }

  double at(CellKind k, std::size_t edge, std::size_t cand) const {
    return table(k).data()[edge * candidates.size() + cand];
  }
  double& at(CellKind k, std::size_t edge, std::size_t cand) {
    return table(k).data()[edge * candidates.size() + cand];
  }

  std::vector<Tensor> tensors() const { return {normal, reduction}; }

  ArchParams clone() const {
    ArchParams a;
    a.spec = spec;
    a.candidates = candidates;
    a.normal = normal.clone();
    a.reduction = reduction.clone();
    return a;
  }

  bool all_finite() const { return normal.all_finite() && reduction.all_finite(); }
};

inline std::size_t count_params(const std::vector<Tensor>& tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Building blocks

namespace nn {

inline Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape), true);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = std * rng.normal();
  return t;
}

class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_params(std::vector<Tensor>& out) const = 0;

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    collect_params(out);
    return out;
  }
};

class BatchNorm : public Module {
 public:
  explicit BatchNorm(std::size_t channels)
      : gamma_({channels}, std::vector<double>(channels, 1.0), true),
        beta_({channels}, true),
        stats_(channels) {}

  Tensor forward(Graph& g, const Tensor& x, ops::NormMode mode) {
    return ops::batch_norm(g, x, gamma_, beta_, stats_, mode);
  }
  void collect_params(std::vector<Tensor>& out) const override {
    out.push_back(gamma_);
    out.push_back(beta_);
  }
  const ops::NormStats& stats() const { return stats_; }

 private:
  Tensor gamma_, beta_;
  ops::NormStats stats_;
};

class Linear : public Module {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true) {
    weight_ = Tensor({in, out}, true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : weight_.data()) v = rng.uniform(-bound, bound);
    if (bias) bias_ = Tensor({out}, true);
  }
  Tensor forward(Graph& g, const Tensor& x) const {
    Tensor y = ops::matmul(g, x, weight_);
    return bias_.defined() ? ops::add_bias(g, y, bias_) : y;
  }
  void collect_params(std::vector<Tensor>& out) const override {
    out.push_back(weight_);
    if (bias_.defined()) out.push_back(bias_);
  }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_, bias_;
};

// Candidate operation applied on one edge.
class Operation : public Module {
 public:
  virtual Tensor forward(Graph& g, const Tensor& x, ops::NormMode mode) = 0;
};

// relu -> conv -> norm
class ReluConvBn : public Operation {
 public:
  ReluConvBn(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad, Rng& rng)
      : weight_(kaiming({cout, cin, k, k}, cin * k * k, rng)), bn_(cout), opt_{stride, pad, 1} {}

  Tensor forward(Graph& g, const Tensor& x, ops::NormMode mode) override {
    return bn_.forward(g, ops::conv2d(g, ops::relu(g, x), weight_, opt_), mode);
  }
  void collect_params(std::vector<Tensor>& out) const override {
    out.push_back(weight_);
    bn_.collect_params(out);
  }

 private:
  Tensor weight_;
  BatchNorm bn_;
  ops::Conv2dOptions opt_;
};

// relu -> depthwise (dilated) -> pointwise -> norm
class DilConv : public Operation {
 public:
  DilConv(std::size_t c, std::size_t k, std::size_t stride, std::size_t dilation, Rng& rng)
      : depthwise_(kaiming({c, 1, k, k}, k * k, rng)),
        pointwise_(kaiming({c, c, 1, 1}, c, rng)),
        bn_(c),
        opt_{stride, dilation * (k - 1) / 2, dilation} {}

  Tensor forward(Graph& g, const Tensor& x, ops::NormMode mode) override {
    Tensor h = ops::depthwise_conv2d(g, ops::relu(g, x), depthwise_, opt_);
    return bn_.forward(g, ops::conv2d(g, h, pointwise_), mode);
  }
  void collect_params(std::vector<Tensor>& out) const override {
    out.push_back(depthwise_);
    out.push_back(pointwise_);
    bn_.collect_params(out);
  }

 private:
  Tensor depthwise_, pointwise_;
  BatchNorm bn_;
  ops::Conv2dOptions opt_;
};

// Two stacked undilated DilConv blocks; only the first carries the stride.
class SepConv : public Operation {
 public:
  SepConv(std::size_t c, std::size_t k, std::size_t stride, Rng& rng)
      : first_(c, k, stride, 1, rng), second_(c, k, 1, 1, rng) {}

  Tensor forward(Graph& g, const Tensor& x, ops::NormMode mode) override {
    return second_.forward(g, first_.forward(g, x, mode), mode);
  }
  void collect_params(std::vector<Tensor>& out) const override {
    first_.collect_params(out);
    second_.collect_params(out);
  }

 private:
  DilConv first_, second_;
};

class Pool : public Operation {
 public:
  Pool(bool max, std::size_t stride) : max_(max), opt_{3, stride, 1} {}
  Tensor forward(Graph& g, const Tensor& x, ops::NormMode) override {
    return max_ ? ops::max_pool2d(g, x, opt_) : ops::avg_pool2d(g, x, opt_);
  }
  void collect_params(std::vector<Tensor>&) const override {}

 private:
  bool max_;
  ops::Pool2dOptions opt_;
};

class Identity : public Operation {
 public:
  Tensor forward(Graph&, const Tensor& x, ops::NormMode) override { return x; }
  void collect_params(std::vector<Tensor>&) const override {}
};

// Returns nullptr for Zero: the branch contributes nothing.
inline std::unique_ptr<Operation> make_operation(OpKind kind, std::size_t c, std::size_t stride, Rng& rng) {
  switch (kind) {
    case OpKind::kZero: return nullptr;
    case OpKind::kSkipConnect:
      if (stride == 1) return std::make_unique<Identity>();
      return std::make_unique<ReluConvBn>(c, c, 1, stride, 0, rng);
    case OpKind::kMaxPool3x3: return std::make_unique<Pool>(true, stride);
    case OpKind::kAvgPool3x3: return std::make_unique<Pool>(false, stride);
    case OpKind::kSepConv3x3: return std::make_unique<SepConv>(c, 3, stride, rng);
    case OpKind::kSepConv5x5: return std::make_unique<SepConv>(c, 5, stride, rng);
    case OpKind::kDilConv3x3: return std::make_unique<DilConv>(c, 3, stride, 2, rng);
    case OpKind::kDilConv5x5: return std::make_unique<DilConv>(c, 5, stride, 2, rng);
  }
  throw std::invalid_argument("make_operation: unknown op");
}

}  // namespace nn

// One edge holding every candidate; slot k matches ArchParams::candidates[k].
struct MixedEdge {
  Edge edge;
  std::size_t stride = 1;
  std::vector<OpKind> kinds;
  std::vector<std::unique_ptr<nn::Operation>> ops;
};

// sum_k softmax(alpha[edge])_k * op_k(x), with `weights` the already
// softmaxed [num_edges, num_candidates] table of the edge's cell kind.
inline Tensor mixed_edge_forward(Graph& g, const Tensor& x, MixedEdge& edge, const Tensor& weights,
                                 std::size_t row, ops::NormMode mode) {
  std::vector<Tensor> outs(edge.ops.size());
  for (std::size_t k = 0; k < edge.ops.size(); ++k) {
    if (!edge.ops[k]) continue;
    try {
      outs[k] = edge.ops[k]->forward(g, x, mode);
    } catch (const ShapeError& e) {
      throw ShapeError(std::string(op_name(edge.kinds[k])), e.what());
    }
  }
  bool any = false;
  for (const auto& t : outs) any = any || t.defined();
  if (!any) {
    // every candidate is Zero: output zeros of the strided shape
    const auto in = x.shape();
    const std::size_t h = (in[2] + edge.stride - 1) / edge.stride;
    const std::size_t w = (in[3] + edge.stride - 1) / edge.stride;
    return Tensor({in[0], in[1], h, w});
  }
  return ops::weighted_sum(g, outs, weights, row);
}

struct SupernetConfig {
  std::size_t in_channels = 1;
  std::size_t num_classes = 4;
  std::size_t channels = 8;
  std::size_t layers = 8;
  std::size_t stem_multiplier = 1;
  CellSpec cell{};
  std::vector<OpKind> candidates{kAllOps.begin(), kAllOps.end()};

  void validate() const {
    cell.validate();
    if (in_channels == 0 || num_classes < 2 || channels == 0 || layers == 0 || stem_multiplier == 0)
      throw std::invalid_argument("SupernetConfig: sizes must be positive (num_classes >= 2)");
    if (candidates.empty()) throw std::invalid_argument("SupernetConfig: empty candidate set");
  }
};

// Reduction layers sit at one third and two thirds of the depth.
inline std::vector<CellKind> stage_pattern(std::size_t layers) {
  std::vector<CellKind> kinds(layers, CellKind::kNormal);
  if (layers >= 3) {
    kinds[layers / 3] = CellKind::kReduction;
    kinds[2 * layers / 3] = CellKind::kReduction;
  }
  return kinds;
}

class MixedCell {
 public:
  MixedCell(const SupernetConfig& cfg, CellKind kind, bool reduction_prev, std::size_t c_prev_prev,
            std::size_t c_prev, std::size_t c, Rng& rng)
      : spec_(cfg.cell), kind_(kind), channels_(c) {
    if (reduction_prev)
      pre0_ = std::make_unique<nn::ReluConvBn>(c_prev_prev, c, 1, 2, 0, rng);
    else
      pre0_ = std::make_unique<nn::ReluConvBn>(c_prev_prev, c, 1, 1, 0, rng);
    pre1_ = std::make_unique<nn::ReluConvBn>(c_prev, c, 1, 1, 0, rng);
    for (const Edge& e : spec_.edges()) {
      MixedEdge me;
      me.edge = e;
      me.stride = (kind == CellKind::kReduction && e.from < 2) ? 2 : 1;
      me.kinds = cfg.candidates;
      for (OpKind op : cfg.candidates) me.ops.push_back(nn::make_operation(op, c, me.stride, rng));
      edges_.push_back(std::move(me));
    }
  }

  // `weights` is the softmaxed table for this cell's kind.
  Tensor forward(Graph& g, const Tensor& s0, const Tensor& s1, const Tensor& weights, ops::NormMode mode,
                 std::vector<Tensor>* nodes_out = nullptr) {
    std::vector<Tensor> states{pre0_->forward(g, s0, mode), pre1_->forward(g, s1, mode)};
    return forward_preprocessed(g, std::move(states), weights, mode, nodes_out);
  }

  // Runs the DAG on already-preprocessed inputs.
  Tensor forward_preprocessed(Graph& g, std::vector<Tensor> states, const Tensor& weights, ops::NormMode mode,
                              std::vector<Tensor>* nodes_out = nullptr) {
    std::size_t e = 0;
    for (std::size_t j = 2; j + 1 < spec_.num_nodes; ++j) {
      Tensor acc;
      for (std::size_t i = 0; i < j; ++i, ++e) {
        Tensor h = mixed_edge_forward(g, states[i], edges_[e], weights, e, mode);
        acc = acc.defined() ? ops::add(g, acc, h) : h;
      }
      states.push_back(acc);
    }
    std::vector<Tensor> inter(states.begin() + 2, states.end());
    if (nodes_out) *nodes_out = inter;
    return ops::concat_channels(g, inter);
  }

  void collect_params(std::vector<Tensor>& out) const {
    pre0_->collect_params(out);
    pre1_->collect_params(out);
    for (const auto& me : edges_)
      for (const auto& op : me.ops)
        if (op) op->collect_params(out);
  }

  CellKind kind() const { return kind_; }
  std::size_t channels() const { return channels_; }
  std::size_t out_channels() const { return channels_ * spec_.num_intermediate(); }
  std::vector<MixedEdge>& edges() { return edges_; }

 private:
  CellSpec spec_;
  CellKind kind_;
  std::size_t channels_;
  std::unique_ptr<nn::ReluConvBn> pre0_, pre1_;
  std::vector<MixedEdge> edges_;
};

// The one-shot model: stem, stacked mixed cells, global pooling classifier.
class Supernet {
 public:
  Supernet(SupernetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t c_stem = cfg_.stem_multiplier * cfg_.channels;
    stem_weight_ = nn::kaiming({c_stem, cfg_.in_channels, 3, 3}, cfg_.in_channels * 9, rng);
    stem_bn_ = std::make_unique<nn::BatchNorm>(c_stem);
    std::size_t c_pp = c_stem, c_p = c_stem, c = cfg_.channels;
    bool reduction_prev = false;
    for (CellKind kind : stage_pattern(cfg_.layers)) {
      if (kind == CellKind::kReduction) c *= 2;
      cells_.push_back(std::make_unique<MixedCell>(cfg_, kind, reduction_prev, c_pp, c_p, c, rng));
      reduction_prev = kind == CellKind::kReduction;
      c_pp = c_p;
      c_p = cells_.back()->out_channels();
    }
    classifier_ = std::make_unique<nn::Linear>(c_p, cfg_.num_classes, rng);
    set_weights_trainable(true);
  }

  Tensor forward(Graph& g, const Tensor& batch, const ArchParams& arch, ops::NormMode mode) {
    check_arch(arch);
    const auto s = ops::detail::nchw("supernet", batch);
    if (s.channels != cfg_.in_channels)
      throw ShapeError("supernet", "expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                                       shape_str(batch.shape()));
    Tensor w_normal = ops::softmax(g, arch.normal, 1);
    Tensor w_reduce = ops::softmax(g, arch.reduction, 1);
    Tensor stem = stem_bn_->forward(g, ops::conv2d(g, batch, stem_weight_, {1, 1, 1}), mode);
    Tensor s0 = stem, s1 = stem;
    for (auto& cell : cells_) {
      const Tensor& w = cell->kind() == CellKind::kNormal ? w_normal : w_reduce;
      Tensor next = cell->forward(g, s0, s1, w, mode);
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

  std::size_t count_learnable_params() const { return count_params(parameters()); }

  // Weights excluded from differentiation during architecture steps.
  void set_weights_trainable(bool on) {
    for (auto& p : parameters()) p.set_requires_grad(on);
  }

  const SupernetConfig& config() const { return cfg_; }
  std::vector<std::unique_ptr<MixedCell>>& cells() { return cells_; }
  nn::Linear& classifier() { return *classifier_; }

  ArchParams make_arch(Rng& rng, double scale = 1e-3) const {
    return ArchParams::random(cfg_.cell, cfg_.candidates, rng, scale);
  }

 private:
  void check_arch(const ArchParams& arch) const {
    if (arch.candidates != cfg_.candidates || arch.spec.num_nodes != cfg_.cell.num_nodes)
      throw std::invalid_argument("supernet: architecture parameters do not match the search space");
  }

  SupernetConfig cfg_;
  Tensor stem_weight_;
  std::unique_ptr<nn::BatchNorm> stem_bn_;
  std::vector<std::unique_ptr<MixedCell>> cells_;
  std::unique_ptr<nn::Linear> classifier_;
};

}  // namespace dartsplus
