#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dartsplus/search_space.hpp"

namespace dartsplus {

struct Gene {
  std::size_t node;
  std::size_t source;
  OpKind op;

  friend bool operator==(const Gene&, const Gene&) = default;
};

// Discrete architecture: two (source, op) choices per intermediate node and
// cell kind, listed by node then ascending source.
struct Genotype {
  std::size_t num_nodes = 7;
  std::vector<Gene> normal;
  std::vector<Gene> reduction;

  const std::vector<Gene>& cell(CellKind k) const { return k == CellKind::kNormal ? normal : reduction; }
  std::vector<Gene>& cell(CellKind k) { return k == CellKind::kNormal ? normal : reduction; }

  friend bool operator==(const Genotype&, const Genotype&) = default;
};

class GenotypeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void validate(const Genotype& g) {
  CellSpec spec{g.num_nodes};
  spec.validate();
  for (CellKind kind : {CellKind::kNormal, CellKind::kReduction}) {
    const auto& genes = g.cell(kind);
    const std::string where = std::string(cell_kind_name(kind)) + " cell: ";
    std::vector<std::vector<std::size_t>> sources(g.num_nodes);
    for (const Gene& gene : genes) {
      if (gene.op == OpKind::kZero) throw GenotypeError(where + "zero op in genotype");
      if (gene.node < 2 || gene.node + 1 >= g.num_nodes)
        throw GenotypeError(where + "node " + std::to_string(gene.node) + " is not intermediate");
      if (gene.source >= gene.node)
        throw GenotypeError(where + "source " + std::to_string(gene.source) + " not below node " +
                            std::to_string(gene.node));
      sources[gene.node].push_back(gene.source);
    }
    for (std::size_t j = 2; j + 1 < g.num_nodes; ++j) {
      auto& s = sources[j];
      std::sort(s.begin(), s.end());
      if (s.size() != 2 || s[0] == s[1])
        throw GenotypeError(where + "node " + std::to_string(j) + " needs exactly 2 distinct inputs");
    }
  }
}

// Softmax of one edge's row. The normalizer is summed in sorted order so that
// rows holding the same multiset of values produce identical probabilities.
inline std::vector<double> edge_probabilities(std::span<const double> alpha) {
  const double mx = *std::max_element(alpha.begin(), alpha.end());
  std::vector<double> e(alpha.size());
  for (std::size_t k = 0; k < alpha.size(); ++k) e[k] = std::exp(alpha[k] - mx);
  std::vector<double> sorted = e;
  std::sort(sorted.begin(), sorted.end());
  const double z = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  for (auto& v : e) v /= z;
  return e;
}

namespace detail {

struct EdgeChoice {
  std::size_t source;
  std::size_t cand;  // index into candidates
  double strength;   // softmax weight of the chosen op
};

inline std::vector<Gene> discretize_cell(const ArchParams& arch, CellKind kind) {
  const auto& spec = arch.spec;
  const std::size_t k = arch.candidates.size();
  auto table = arch.table(kind).data();
  std::vector<Gene> genes;
  for (std::size_t j = 2; j + 1 < spec.num_nodes; ++j) {
    std::vector<EdgeChoice> choices;
    for (std::size_t i = 0; i < j; ++i) {
      const std::size_t e = spec.edge_index(i, j);
      auto p = edge_probabilities(table.subspan(e * k, k));
      bool found = false;
      EdgeChoice best{i, 0, 0.0};
      // candidates are scanned in canonical order; strict > keeps the lowest index on ties
      for (std::size_t c = 0; c < k; ++c) {
        if (arch.candidates[c] == OpKind::kZero) continue;
        if (!found || p[c] > best.strength) {
          best = {i, c, p[c]};
          found = true;
        }
      }
      if (!found) throw GenotypeError("discretize: candidate set has no non-zero op");
      choices.push_back(best);
    }
    std::stable_sort(choices.begin(), choices.end(),
                     [](const EdgeChoice& a, const EdgeChoice& b) { return a.strength > b.strength; });
    std::vector<Gene> kept;
    for (std::size_t t = 0; t < 2 && t < choices.size(); ++t)
      kept.push_back({j, choices[t].source, arch.candidates[choices[t].cand]});
    std::sort(kept.begin(), kept.end(), [](const Gene& a, const Gene& b) { return a.source < b.source; });
    genes.insert(genes.end(), kept.begin(), kept.end());
  }
  return genes;
}

}  // namespace detail

// Per edge the strongest non-Zero op; per intermediate node the two incoming
// edges with the largest such weight. Ties prefer the lower candidate index,
// then the lower source node.
inline Genotype discretize(const ArchParams& arch) {
  if (!arch.all_finite()) throw std::invalid_argument("discretize: non-finite architecture parameters");
  auto sorted = arch.candidates;
  if (!std::is_sorted(sorted.begin(), sorted.end()))
    throw std::invalid_argument("discretize: candidates must be listed in canonical order");
  Genotype g;
  g.num_nodes = arch.spec.num_nodes;
  g.normal = detail::discretize_cell(arch, CellKind::kNormal);
  g.reduction = detail::discretize_cell(arch, CellKind::kReduction);
  return g;
}

inline std::size_t count_ops(const Genotype& g, CellKind kind, OpKind op) {
  const auto& genes = g.cell(kind);
  return static_cast<std::size_t>(
      std::count_if(genes.begin(), genes.end(), [op](const Gene& x) { return x.op == op; }));
}

inline std::size_t count_skip_connects(const Genotype& g, CellKind kind) {
  return count_ops(g, kind, OpKind::kSkipConnect);
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json genes_to_json(const std::vector<Gene>& genes) {
  auto arr = nlohmann::json::array();
  for (const Gene& g : genes) arr.push_back({g.node, g.source, std::string(op_name(g.op))});
  return arr;
}

inline nlohmann::json to_json(const Genotype& g) {
  return {{"num_nodes", g.num_nodes}, {"normal", genes_to_json(g.normal)},
          {"reduction", genes_to_json(g.reduction)}};
}

inline Genotype genotype_from_json(const nlohmann::json& j) {
  Genotype g;
  try {
    g.num_nodes = j.at("num_nodes").get<std::size_t>();
    for (CellKind kind : {CellKind::kNormal, CellKind::kReduction}) {
      for (const auto& t : j.at(std::string(cell_kind_name(kind)))) {
        if (!t.is_array() || t.size() != 3) throw GenotypeError("genotype triple must be [node, source, op]");
        const auto name = t[2].get<std::string>();
        auto op = op_from_name(name);
        if (!op) throw GenotypeError("unknown op '" + name + "'");
        g.cell(kind).push_back({t[0].get<std::size_t>(), t[1].get<std::size_t>(), *op});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw GenotypeError(std::string("malformed genotype JSON: ") + e.what());
  }
  validate(g);
  return g;
}

// Graphviz rendering, one cluster per cell kind.
inline std::string export_dot(const Genotype& g) {
  std::ostringstream os;
  os << "digraph genotype {\n  rankdir=LR;\n  node [shape=box];\n";
  for (CellKind kind : {CellKind::kNormal, CellKind::kReduction}) {
    const std::string k(cell_kind_name(kind));
    auto id = [&](std::size_t n) { return "\"" + k + "_" + std::to_string(n) + "\""; };
    os << "  subgraph cluster_" << k << " {\n    label=\"" << k << "\";\n";
    os << "    " << id(0) << " [label=\"c_{k-2}\"];\n";
    os << "    " << id(1) << " [label=\"c_{k-1}\"];\n";
    for (std::size_t j = 2; j + 1 < g.num_nodes; ++j)
      os << "    " << id(j) << " [label=\"" << j - 2 << "\"];\n";
    os << "    " << id(g.num_nodes - 1) << " [label=\"c_{k}\"];\n";
    for (const Gene& gene : g.cell(kind))
      os << "    " << id(gene.source) << " -> " << id(gene.node) << " [label=\"" << op_name(gene.op) << "\"];\n";
    for (std::size_t j = 2; j + 1 < g.num_nodes; ++j) os << "    " << id(j) << " -> " << id(g.num_nodes - 1) << ";\n";
    os << "  }\n";
  }
  os << "}\n";
  return os.str();
}

}  // namespace dartsplus
