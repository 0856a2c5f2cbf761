#include <gtest/gtest.h>

#include "dartsplus/genotype.hpp"
#include "oracles.hpp"

using namespace dartsplus;

namespace {

using oracles::brute_force_cell;
using oracles::random_table;

std::vector<OpKind> all_candidates() { return {kAllOps.begin(), kAllOps.end()}; }

Genotype sample_genotype() {
  Genotype g;
  g.num_nodes = 5;
  g.normal = {{2, 0, OpKind::kSepConv3x3}, {2, 1, OpKind::kSkipConnect},
              {3, 1, OpKind::kDilConv5x5}, {3, 2, OpKind::kMaxPool3x3}};
  g.reduction = {{2, 0, OpKind::kAvgPool3x3}, {2, 1, OpKind::kSepConv5x5},
                 {3, 0, OpKind::kSkipConnect}, {3, 2, OpKind::kDilConv3x3}};
  return g;
}

}  // namespace

TEST(Discretize, MatchesBruteForceOnRandomTables) {
  Rng rng(99);
  std::size_t ties_seen = 0;
  for (int t = 0; t < 200; ++t) {
    const bool quantized = t % 2 == 1;
    ArchParams a = random_table(rng, quantized);
    const Genotype g = discretize(a);
    EXPECT_EQ(g.normal, brute_force_cell(a, CellKind::kNormal)) << "table " << t;
    EXPECT_EQ(g.reduction, brute_force_cell(a, CellKind::kReduction)) << "table " << t;
    EXPECT_NO_THROW(validate(g));
    if (quantized) ++ties_seen;
  }
  EXPECT_EQ(ties_seen, 100u);
}

TEST(Discretize, MatchesBruteForceOnSevenNodeCells) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    ArchParams a = random_table(rng, t % 2 == 0, 7);
    EXPECT_EQ(discretize(a).normal, brute_force_cell(a, CellKind::kNormal));
  }
}

TEST(Discretize, AllEqualPrefersLowestIndices) {
  ArchParams a(CellSpec{5}, all_candidates());
  const Genotype g = discretize(a);
  const std::vector<Gene> expect{{2, 0, OpKind::kSkipConnect}, {2, 1, OpKind::kSkipConnect},
                                 {3, 0, OpKind::kSkipConnect}, {3, 1, OpKind::kSkipConnect}};
  EXPECT_EQ(g.normal, expect);
}

TEST(Discretize, NeverPicksZero) {
  ArchParams a(CellSpec{5}, all_candidates());
  for (std::size_t e = 0; e < 5; ++e) {
    a.at(CellKind::kNormal, e, 0) = 10.0;
    a.at(CellKind::kNormal, e, 6) = 1.0;
  }
  for (const Gene& g : discretize(a).normal) EXPECT_EQ(g.op, OpKind::kDilConv3x3);
}

TEST(Discretize, RejectsNonFiniteAndUnsortedCandidates) {
  ArchParams a(CellSpec{5}, all_candidates());
  a.at(CellKind::kReduction, 1, 1) = std::nan("");
  EXPECT_THROW(discretize(a), std::invalid_argument);
  ArchParams b(CellSpec{5}, {OpKind::kSepConv3x3, OpKind::kSkipConnect});
  EXPECT_THROW(discretize(b), std::invalid_argument);
  ArchParams c(CellSpec{5}, {OpKind::kZero});
  EXPECT_THROW(discretize(c), GenotypeError);
}

TEST(Genotype, ValidateCatchesMalformed) {
  Genotype g = sample_genotype();
  EXPECT_NO_THROW(validate(g));
  Genotype dup = g;
  dup.normal[1].source = 0;
  EXPECT_THROW(validate(dup), GenotypeError);
  Genotype zero = g;
  zero.reduction[0].op = OpKind::kZero;
  EXPECT_THROW(validate(zero), GenotypeError);
  Genotype back = g;
  back.normal[3].source = 3;
  EXPECT_THROW(validate(back), GenotypeError);
  Genotype missing = g;
  missing.normal.pop_back();
  EXPECT_THROW(validate(missing), GenotypeError);
}

TEST(Genotype, CountSkipConnects) {
  const Genotype g = sample_genotype();
  EXPECT_EQ(count_skip_connects(g, CellKind::kNormal), 1u);
  EXPECT_EQ(count_skip_connects(g, CellKind::kReduction), 1u);
  EXPECT_EQ(count_ops(g, CellKind::kNormal, OpKind::kMaxPool3x3), 1u);
}

TEST(Genotype, JsonRoundTrip) {
  const Genotype g = sample_genotype();
  const auto j = to_json(g);
  EXPECT_EQ(j["normal"][1], nlohmann::json({2, 1, "skip_connect"}));
  EXPECT_EQ(genotype_from_json(nlohmann::json::parse(j.dump())), g);
}

TEST(Genotype, JsonErrors) {
  EXPECT_THROW(genotype_from_json(nlohmann::json::parse(R"({"num_nodes":5})")), GenotypeError);
  auto j = to_json(sample_genotype());
  j["normal"][0][2] = "conv_9x9";
  EXPECT_THROW(genotype_from_json(j), GenotypeError);
  j = to_json(sample_genotype());
  j["reduction"][0] = nlohmann::json::array({2, 0});
  EXPECT_THROW(genotype_from_json(j), GenotypeError);
}

TEST(Genotype, DotGolden) {
  const std::string expect =
      "digraph genotype {\n"
      "  rankdir=LR;\n"
      "  node [shape=box];\n"
      "  subgraph cluster_normal {\n"
      "    label=\"normal\";\n"
      "    \"normal_0\" [label=\"c_{k-2}\"];\n"
      "    \"normal_1\" [label=\"c_{k-1}\"];\n"
      "    \"normal_2\" [label=\"0\"];\n"
      "    \"normal_3\" [label=\"1\"];\n"
      "    \"normal_4\" [label=\"c_{k}\"];\n"
      "    \"normal_0\" -> \"normal_2\" [label=\"sep_conv_3x3\"];\n"
      "    \"normal_1\" -> \"normal_2\" [label=\"skip_connect\"];\n"
      "    \"normal_1\" -> \"normal_3\" [label=\"dil_conv_5x5\"];\n"
      "    \"normal_2\" -> \"normal_3\" [label=\"max_pool_3x3\"];\n"
      "    \"normal_2\" -> \"normal_4\";\n"
      "    \"normal_3\" -> \"normal_4\";\n"
      "  }\n"
      "  subgraph cluster_reduction {\n"
      "    label=\"reduction\";\n"
      "    \"reduction_0\" [label=\"c_{k-2}\"];\n"
      "    \"reduction_1\" [label=\"c_{k-1}\"];\n"
      "    \"reduction_2\" [label=\"0\"];\n"
      "    \"reduction_3\" [label=\"1\"];\n"
      "    \"reduction_4\" [label=\"c_{k}\"];\n"
      "    \"reduction_0\" -> \"reduction_2\" [label=\"avg_pool_3x3\"];\n"
      "    \"reduction_1\" -> \"reduction_2\" [label=\"sep_conv_5x5\"];\n"
      "    \"reduction_0\" -> \"reduction_3\" [label=\"skip_connect\"];\n"
      "    \"reduction_2\" -> \"reduction_3\" [label=\"dil_conv_3x3\"];\n"
      "    \"reduction_2\" -> \"reduction_4\";\n"
      "    \"reduction_3\" -> \"reduction_4\";\n"
      "  }\n"
      "}\n";
  EXPECT_EQ(export_dot(sample_genotype()), expect);
}

TEST(EdgeProbabilities, PermutationInvariantNormalizer) {
  std::vector<double> a{0.1, 2.0, -1.0, 0.7}, b{2.0, 0.7, 0.1, -1.0};
  const auto pa = edge_probabilities(a), pb = edge_probabilities(b);
  EXPECT_EQ(pa[1], pb[0]);
  EXPECT_EQ(pa[3], pb[1]);
}
