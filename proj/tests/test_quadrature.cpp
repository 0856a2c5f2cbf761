#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dartsplus/quadrature.hpp"

using namespace dartsplus;

namespace {

double double_factorial(int n) {
  double r = 1.0;
  for (int k = n; k > 1; k -= 2) r *= k;
  return r;
}

}  // namespace

TEST(HermiteRule, WeightsSumToSqrtPiAndNodesSymmetric) {
  for (std::size_t n : {1u, 2u, 5u, 64u, 1024u, 8192u}) {
    const auto& rule = hermite_rule(n);
    ASSERT_EQ(rule.nodes.size(), n);
    double s = 0.0;
    for (double w : rule.weights) {
      EXPECT_GE(w, 0.0);
      s += w;
    }
    EXPECT_NEAR(s, std::sqrt(std::numbers::pi), 1e-12) << n;
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(rule.nodes[i], -rule.nodes[n - 1 - i], 1e-9 * (1 + std::abs(rule.nodes[i])));
    for (std::size_t i = 1; i < n; ++i) EXPECT_LT(rule.nodes[i - 1], rule.nodes[i]);
  }
}

TEST(HermiteRule, KnownSmallRules) {
  const auto& r2 = make_hermite_rule(2);
  EXPECT_NEAR(r2.nodes[1], std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(r2.weights[0], std::sqrt(std::numbers::pi) / 2, 1e-15);
  const auto& r3 = make_hermite_rule(3);
  EXPECT_NEAR(r3.nodes[2], std::sqrt(1.5), 1e-14);
  EXPECT_NEAR(r3.weights[1], 2 * std::sqrt(std::numbers::pi) / 3, 1e-14);
  EXPECT_THROW(make_hermite_rule(0), std::invalid_argument);
}

TEST(GaussianExpectation, NormalMomentsExactUpToDegree) {
  const std::size_t n = 10;
  for (int k = 0; k <= 2 * int(n) - 1; ++k) {
    const double expect = k % 2 ? 0.0 : double_factorial(k - 1);
    const double got = gaussian_expectation_fixed([k](double x) { return std::pow(x, k); }, n);
    EXPECT_NEAR(got, expect, 1e-11 * std::max(1.0, expect)) << "moment " << k;
  }
}

TEST(GaussianExpectation, SmoothFunctions) {
  EXPECT_NEAR(gaussian_expectation([](double x) { return std::cos(x); }).value, std::exp(-0.5), 1e-13);
  EXPECT_NEAR(gaussian_expectation([](double x) { return std::exp(0.7 * x); }).value, std::exp(0.245), 1e-12);
  const auto r = gaussian_expectation([](double x) { return 1.0 / (1.0 + std::exp(-3.0 * x)); });
  EXPECT_NEAR(r.value, 0.5, 1e-12);
  EXPECT_LE(r.last_change, 1e-10);
  EXPECT_GE(r.nodes, 128u);
}

TEST(GaussianExpectation, ReportsNonConvergence) {
  QuadratureOptions opt;
  opt.max_nodes = 256;
  EXPECT_THROW(gaussian_expectation([](double x) { return x > 0.3 ? 1.0 : 0.0; }, opt), QuadratureError);
  opt.min_nodes = 0;
  EXPECT_THROW(gaussian_expectation([](double x) { return x; }, opt), std::invalid_argument);
}
