#include <gtest/gtest.h>

#include "dartsplus/stopping.hpp"
#include "oracles.hpp"

using namespace dartsplus;

namespace {

Genotype with_normal(std::vector<Gene> normal) {
  Genotype g;
  g.num_nodes = 5;
  g.normal = std::move(normal);
  g.reduction = {{2, 0, OpKind::kSepConv3x3}, {2, 1, OpKind::kSepConv3x3},
                 {3, 0, OpKind::kSkipConnect}, {3, 1, OpKind::kSkipConnect}};
  return g;
}

using oracles::synthetic_snapshot;

ArchParams n5_arch() { return ArchParams(CellSpec{5}, {kAllOps.begin(), kAllOps.end()}); }

}  // namespace

TEST(Criterion1, ExhaustiveOverFiveNodeNormalCells) {
  std::size_t total = 0, fired = 0;
  oracles::for_each_n5_normal_cell([&](const Genotype& g, int skips) {
    ASSERT_NO_THROW(validate(g));
    for (std::size_t threshold : {1u, 2u, 3u}) {
      const StopDecision dec = criterion1(g, 7, threshold);
      ASSERT_EQ(dec.stops(), skips >= int(threshold));
      if (dec.stops()) {
        EXPECT_EQ(dec.criterion(), Criterion::kSkipCount);
        EXPECT_EQ(dec.epoch(), 7u);
      }
    }
    ++total;
    fired += criterion1(g, 1).stops();
  });
  EXPECT_EQ(total, 3u * 7 * 7 * 7 * 7);
  // at least two of four genes skip: 7^4 - 6^4 - 4 * 6^3 per source choice
  EXPECT_EQ(fired, 3u * (2401 - 1296 - 864));
}

TEST(Criterion1, ReductionSkipsIgnored) {
  const Genotype g = with_normal({{2, 0, OpKind::kSepConv3x3}, {2, 1, OpKind::kMaxPool3x3},
                                  {3, 0, OpKind::kSkipConnect}, {3, 1, OpKind::kDilConv3x3}});
  EXPECT_EQ(count_skip_connects(g, CellKind::kReduction), 2u);
  EXPECT_FALSE(criterion1(g, 1).stops());
}

TEST(Criterion2, FiresAtFirstEpochClosingStableWindow) {
  Rng rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t window = 1 + rng.below(6);
    const std::size_t len = 1 + rng.below(40);
    EXPECT_TRUE(oracles::criterion2_history_matches(rng, window, len)) << "trial " << trial;
  }
}

TEST(Criterion2, StrictEqualityAndZeroWindow) {
  std::vector<RankingSnapshot> hist{synthetic_snapshot(1, 0), synthetic_snapshot(2, 1), synthetic_snapshot(3, 1)};
  EXPECT_FALSE(criterion2(hist, 3).stops());
  EXPECT_TRUE(criterion2(hist, 2).stops());
  EXPECT_THROW(criterion2(hist, 0), std::invalid_argument);
  EXPECT_THROW(RankStableStopper(0), std::invalid_argument);
}

TEST(Criterion2, DefaultWindowIsTen) {
  RankStableStopper s;
  ArchParams a = n5_arch();
  Rng rng(1);
  for (auto& v : a.normal.data()) v = rng.normal();
  const Genotype g = discretize(a);
  for (std::size_t e = 1; e <= 12; ++e) {
    const StopDecision d = s.observe({e, a, g});
    EXPECT_EQ(d.stops(), e >= 10) << e;
  }
}

TEST(RankingSnapshot, LearnableOpsByDescendingAlpha) {
  ArchParams a = n5_arch();
  a.at(CellKind::kNormal, 0, 7) = 3.0;  // dil_conv_5x5
  a.at(CellKind::kNormal, 0, 4) = 2.0;  // sep_conv_3x3
  a.at(CellKind::kNormal, 0, 1) = 9.0;  // skip_connect, not ranked
  const auto snap = make_ranking_snapshot(a, 4);
  ASSERT_EQ(snap.edges.size(), 10u);
  const std::vector<OpKind> expect{OpKind::kDilConv5x5, OpKind::kSepConv3x3, OpKind::kSepConv5x5, OpKind::kDilConv3x3};
  EXPECT_EQ(snap.edges[0].order, expect);
  RankingOptions opt;
  opt.ranked_ops = {OpKind::kSkipConnect, OpKind::kSepConv3x3};
  EXPECT_EQ(make_ranking_snapshot(a, 4, opt).edges[0].order,
            (std::vector<OpKind>{OpKind::kSkipConnect, OpKind::kSepConv3x3}));
}

TEST(RankingSnapshot, RetainedScope) {
  ArchParams a = n5_arch();
  const Genotype g = discretize(a);
  RankingOptions opt;
  opt.scope = RankingScope::kRetainedEdges;
  EXPECT_EQ(make_ranking_snapshot(a, 1, opt, &g).edges.size(), 8u);
  EXPECT_THROW(make_ranking_snapshot(a, 1, opt), std::invalid_argument);
}

TEST(ComposedStopper, PrimaryDecidesOthersRecorded) {
  std::vector<std::unique_ptr<Stopper>> m;
  m.push_back(std::make_unique<InjectedStopper>(5));
  m.push_back(std::make_unique<InjectedStopper>(2));
  m.push_back(std::make_unique<NeverStopper>());
  auto s = compose_stoppers(std::move(m));
  ArchParams a = n5_arch();
  const Genotype g = discretize(a);
  std::size_t stopped_at = 0;
  for (std::size_t e = 1; e <= 8 && !stopped_at; ++e)
    if (s->observe({e, a, g}).stops()) stopped_at = e;
  EXPECT_EQ(stopped_at, 5u);
  EXPECT_EQ(s->triggers()[0].epoch, 5u);
  EXPECT_EQ(s->triggers()[1].epoch, 2u);
  EXPECT_FALSE(s->triggers()[2].epoch.has_value());
  EXPECT_EQ(s->name(), "primary(injected,injected,never)");
}

TEST(ComposedStopper, AnyMode) {
  std::vector<std::unique_ptr<Stopper>> m;
  m.push_back(std::make_unique<NeverStopper>());
  m.push_back(std::make_unique<InjectedStopper>(3));
  auto s = compose_stoppers(std::move(m), ComposeMode::kAny);
  ArchParams a = n5_arch();
  const Genotype g = discretize(a);
  EXPECT_FALSE(s->observe({2, a, g}).stops());
  const auto d = s->observe({3, a, g});
  EXPECT_TRUE(d.stops());
  EXPECT_EQ(d.criterion(), Criterion::kInjected);
  EXPECT_THROW(compose_stoppers({}), std::invalid_argument);
}
