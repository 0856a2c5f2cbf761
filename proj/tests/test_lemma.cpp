#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dartsplus/gradcheck.hpp"
#include "dartsplus/lemma.hpp"

using namespace dartsplus;
using namespace dartsplus::lemma;

namespace {

double norm4(const Mat2& m) { return std::sqrt(m[0] * m[0] + m[1] * m[1] + m[2] * m[2] + m[3] * m[3]); }

double norm2(const Vec2& v) { return std::hypot(v[0], v[1]); }

LemmaConfig p1_config(std::uint64_t seed, double sigma_t = 0.1) {
  LemmaConfig c;
  c.sigma_t = sigma_t;
  c.mu_t = normalized_mu(sigma_t);
  c.seed = seed;
  c.epochs = 100;
  return c;
}

}  // namespace

TEST(Normalization, MuSigmaPairs) {
  for (double s : {0.0, 0.1, 0.5, 0.9, 1.0}) {
    const double mu = normalized_mu(s);
    EXPECT_NEAR(0.5 * mu * mu + s * s, 1.0, 1e-15);
    EXPECT_NEAR(normalized_sigma(mu), s, 1e-7);
  }
  EXPECT_NEAR(normalized_mu(0.0), std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(eta_of(std::sqrt(2.0)), 1.0, 1e-15);
  EXPECT_NEAR(lambda_of(0.3, std::sqrt(2.0)), 1.0, 1e-15);
}

TEST(LemmaConfig, Validation) {
  LemmaConfig c;
  EXPECT_NO_THROW(c.validate());
  c.mu_t = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = LemmaConfig{};
  c.r = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = LemmaConfig{};
  c.n_train = 7;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(GenMixture, DegenerateSigma) {
  const double mu = 1.1;
  const auto d = gen_mixture(mu, 0.0, 6, 1);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d.y[i], i % 2 ? -1.0 : 1.0);
    EXPECT_DOUBLE_EQ(d.x[2 * i], d.y[i] * mu * kInvSqrt2);
    EXPECT_DOUBLE_EQ(d.x[2 * i + 1], d.y[i] * mu * kInvSqrt2);
  }
  EXPECT_THROW(gen_mixture(1.0, 0.1, 5, 0), std::invalid_argument);
}

TEST(GenMixture, MomentsAndBalance) {
  const double sigma = 0.4, mu = normalized_mu(sigma);
  const std::size_t n = 100000;
  const auto d = gen_mixture(mu, sigma, n, 42);
  double pos = 0.0;
  Vec2 m{}, sq{};
  for (std::size_t i = 0; i < n; ++i) {
    pos += d.y[i] > 0;
    for (std::size_t k = 0; k < 2; ++k) {
      m[k] += d.y[i] * d.x[2 * i + k];
      sq[k] += d.x[2 * i + k] * d.x[2 * i + k];
    }
  }
  EXPECT_EQ(pos, n / 2.0);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_NEAR(m[k] / n, mu * kInvSqrt2, 3 * sigma / std::sqrt(double(n)));
    EXPECT_NEAR(sq[k] / n, 1.0, 0.02);
  }
  EXPECT_EQ(gen_mixture(mu, sigma, 10, 3).x, gen_mixture(mu, sigma, 10, 3).x);
}

TEST(LemmaModel, AutodiffMatchesFiniteDifferences) {
  Rng rng(3);
  const auto d = gen_mixture(1.0, normalized_sigma(1.0), 40, 5);
  const auto idx = all_indices(d.size());
  for (int t = 0; t < 5; ++t) {
    LemmaModel m;
    m.alpha0 = rng.uniform(0.1, 0.9);
    for (auto& w : m.W) w = rng.normal();
    m.w_r = {rng.normal(), rng.normal()};
    LemmaTensors ts(m);
    auto res = finite_diff_check([&](Graph& g) { return lemma_loss(g, ts, d, idx); }, ts.tensors(), 1e-6);
    EXPECT_LT(res.max_rel_error, 1e-6);
  }
}

TEST(LemmaModel, OutputMatchesDefinition) {
  LemmaModel m;
  m.alpha0 = 0.3;
  m.W = {0.5, -1.0, 2.0, 0.25};
  m.w_r = {0.6, -0.8};
  const Vec2 x{1.5, -0.5};
  const Vec2 wx = m.apply_w(x);
  const double expect = m.w_r[0] * (0.3 * x[0] + 0.7 * wx[0]) + m.w_r[1] * (0.3 * x[1] + 0.7 * wx[1]);
  EXPECT_NEAR(m.output(x), expect, 1e-15);
}

TEST(LemmaTraining, FixedPointRecoveredAtSmallSigma) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto cfg = p1_config(seed);
    const auto traj = train_lemma_bilevel(cfg);
    const auto held = gen_mixture(cfg.mu_t, cfg.sigma_t, 4000, 1000 + seed);
    const auto fit = fit_fixed_point(traj.model, cfg.mu_t, held);
    EXPECT_GT(fit.cos_w_r_e, 0.99) << seed;
    EXPECT_LT(fit.eta_rel_error, 0.05) << seed;
    EXPECT_LT(fit.residual_rel, 0.05) << seed;
  }
}

TEST(LemmaTraining, InvariantsHoldAlongTrajectory) {
  auto cfg = p1_config(7);
  cfg.epochs = 20;
  const auto traj = train_lemma_bilevel(cfg);
  ASSERT_EQ(traj.snapshots.size(), 21u);
  const auto train = gen_mixture(cfg.mu_t, cfg.sigma_t, cfg.n_train, Rng(cfg.seed).next_u64());
  for (const auto& s : traj.snapshots) {
    EXPECT_NEAR(norm2(s.w_r), cfg.r, 1e-9);
    EXPECT_GT(s.alpha0, 0.0);
    EXPECT_LT(s.alpha0, 1.0);
    LemmaModel m;
    m.W = s.W;
    const Vec2 var = feature_variance(m, train);
    EXPECT_NEAR(var[0], 1.0, 1e-6);
    EXPECT_NEAR(var[1], 1.0, 1e-6);
  }
  const auto again = train_lemma_bilevel(cfg);
  EXPECT_EQ(again.model.W, traj.model.W);
  EXPECT_EQ(again.model.alpha0, traj.model.alpha0);
}

TEST(LemmaPhase, LargeNoiseLargeRPrefersSkip) {
  const double mu_t = normalized_mu(0.1);
  const LemmaModel m = LemmaModel::fixed_point(5.0, mu_t, 0.5);
  const auto val = gen_mixture(normalized_mu(0.9), 0.9, 20000, 11);
  const auto path = alpha_descent(m, val, 10, 0.5);
  for (std::size_t i = 1; i < path.size(); ++i) EXPECT_GT(path[i], path[i - 1]) << i;
  EXPECT_LT(grad_alpha0_closed_form(5.0, 0.5, mu_t, normalized_mu(0.9), 0.9), 0.0);
}

TEST(LemmaPhase, SmallNoiseSmallRPrefersLearnable) {
  const double mu_t = normalized_mu(0.1);
  const LemmaModel m = LemmaModel::fixed_point(0.5, mu_t, 0.5);
  const auto val = gen_mixture(normalized_mu(0.3), 0.3, 20000, 12);
  const auto path = alpha_descent(m, val, 10, 0.5);
  for (std::size_t i = 1; i < path.size(); ++i) EXPECT_LT(path[i], path[i - 1]) << i;
  EXPECT_GT(grad_alpha0_closed_form(0.5, 0.5, mu_t, normalized_mu(0.3), 0.3), 0.0);
}

TEST(ClosedForm, VanishesWhenLambdaIsOne) {
  for (double r : {0.5, 2.0, 8.0})
    for (double sv : {0.2, 0.8}) EXPECT_EQ(grad_alpha0_closed_form(r, 0.5, std::sqrt(2.0), normalized_mu(sv), sv), 0.0);
}

TEST(ClosedForm, Alpha0GradientMatchesLargeBatchAutodiff) {
  const double sigma_t = 0.1, mu_t = normalized_mu(sigma_t);
  for (auto [r, sv] : {std::pair{1.0, 0.5}, std::pair{5.0, 0.9}, std::pair{0.5, 0.3}}) {
    const LemmaModel m = LemmaModel::fixed_point(r, mu_t, 0.5);
    const auto val = gen_mixture(normalized_mu(sv), sv, 1000000, 77);
    const double autodiff = lemma_gradient(m, val).d_alpha0;
    const double closed = grad_alpha0_closed_form(r, 0.5, mu_t, normalized_mu(sv), sv);
    EXPECT_NEAR(autodiff, closed, 3e-3 * r) << r << " " << sv;
  }
}

TEST(GFunction, BoundarySigns) {
  const double mu_t = normalized_mu(0.1);
  for (double r : {0.1, 0.5, 1.0, 4.0, 16.0}) {
    const double lam = lambda_of(0.5, mu_t);
    const double g0 = g_function(r, 0.0, 0.5, mu_t);
    EXPECT_NEAR(g0, -std::sqrt(2.0) * (sigmoid(std::sqrt(2.0) * r * lam) - 1.0), 1e-12);
    EXPECT_GT(g0, 0.0);
    EXPECT_LT(g_function(r, 1.0, 0.5, mu_t), 0.0);
  }
  EXPECT_THROW(g_function(1.0, 1.5, 0.5, mu_t), std::invalid_argument);
}

TEST(GFunction, DecreasingInR) {
  const double mu_t = normalized_mu(0.1), h = 1e-4;
  for (double r : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0})
    for (double sv : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
      const double d = (g_function(r + h, sv, 0.5, mu_t) - g_function(r - h, sv, 0.5, mu_t)) / (2 * h);
      EXPECT_LT(d, 0.0) << r << " " << sv;
    }
}

TEST(GFunction, SignAgreesWithClosedForm) {
  const double mu_t = normalized_mu(0.1);
  for (double r : {0.5, 1.0, 3.0})
    for (double sv : {0.1, 0.5, 0.95}) {
      const double g = g_function(r, sv, 0.5, mu_t);
      const double d = grad_alpha0_closed_form(r, 0.5, mu_t, normalized_mu(sv), sv);
      if (std::abs(g) > 1e-10 && std::abs(d) > 1e-10) {
        // eta > 1 for mu_t < sqrt(2), so r (1 - eta) < 0
        EXPECT_EQ(std::signbit(d), std::signbit(g));
      }
    }
}

TEST(Sigma0, RootAndMonotone) {
  const double mu_t = normalized_mu(0.1);
  double prev = 1.0;
  for (double r : {0.5, 1.0, 2.0, 4.0, 8.0}) {
    const auto s = sigma0_of_r(r, 0.5, mu_t);
    EXPECT_LT(std::abs(s.g_at_root), 1e-7);
    EXPECT_LT(s.sigma0, prev);
    EXPECT_GT(s.sigma0, 0.0);
    prev = s.sigma0;
    EXPECT_GT(grad_alpha0_closed_form(r, 0.5, mu_t, normalized_mu(s.sigma0 - 1e-3), s.sigma0 - 1e-3), 0.0);
    EXPECT_LT(grad_alpha0_closed_form(r, 0.5, mu_t, normalized_mu(s.sigma0 + 1e-3), s.sigma0 + 1e-3), 0.0);
  }
  EXPECT_THROW(sigma0_of_r(-1.0, 0.5, mu_t), std::invalid_argument);
}

TEST(Sigma0, InsensitiveToAlpha0) {
  const double mu_t = normalized_mu(0.1);
  for (double r : {1.0, 4.0}) {
    const double mid = sigma0_of_r(r, 0.5, mu_t).sigma0;
    for (double a0 : {0.25, 0.75}) EXPECT_NEAR(sigma0_of_r(r, a0, mu_t).sigma0, mid, 0.01);
  }
}

TEST(TrainGradient, DominantTermAtSmallSigma) {
  const double sigma_t = 0.05, mu_t = normalized_mu(sigma_t);
  for (double r : {0.5, 1.0, 2.0}) {
    const LemmaModel m = LemmaModel::fixed_point(r, mu_t, 0.5);
    const auto tg = grad_train_closed_form(m, mu_t, sigma_t);
    EXPECT_LT(norm2(tg.minor_w_r) / norm2(tg.dominant_w_r), 0.1);
    EXPECT_LT(norm4(tg.minor_W) / norm4(tg.dominant_W), 0.1);
    // angle between grad W and w_r e^T
    const Mat2 ref{m.w_r[0] * kE[0], m.w_r[0] * kE[1], m.w_r[1] * kE[0], m.w_r[1] * kE[1]};
    double dot = 0.0;
    for (std::size_t k = 0; k < 4; ++k) dot += tg.grad_W[k] * ref[k];
    const double angle = std::acos(std::min(1.0, std::abs(dot) / (norm4(tg.grad_W) * norm4(ref))));
    EXPECT_LT(angle * 180.0 / std::numbers::pi, 5.0);
  }
}

TEST(TrainGradient, MatchesLargeBatchAutodiff) {
  const double sigma_t = 0.3, mu_t = normalized_mu(sigma_t);
  Rng rng(8);
  LemmaModel m;
  m.alpha0 = 0.4;
  for (auto& w : m.W) w = 0.5 * rng.normal();
  m.w_r = {0.9, 0.3};
  const auto d = gen_mixture(mu_t, sigma_t, 1000000, 21);
  const auto ad = lemma_gradient(m, d);
  const auto cf = grad_train_closed_form(m, mu_t, sigma_t);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(ad.d_w_r[k], cf.grad_w_r[k], 3e-3);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(ad.d_W[k], cf.grad_W[k], 3e-3);
}

TEST(MonteCarlo, AgreesWithQuadrature) {
  const double mu_t = normalized_mu(0.1);
  const double r = 2.0, sv = 0.6, mv = normalized_mu(sv), lam = lambda_of(0.5, mu_t);
  const auto mc = monte_carlo_expectation(
      [&](double e) {
        const double u = mv + sv * e;
        return (sigmoid(r * lam * u) - 1.0) * u;
      },
      200000, 5);
  EXPECT_NEAR(mc.mean, val_expectation(r, lam, mv, sv), 4 * mc.std_error);
  EXPECT_THROW(monte_carlo_expectation([](double) { return 0.0; }, 1, 0), std::invalid_argument);
}

TEST(LemmaGrid, RowMajorInR) {
  const double mu_t = normalized_mu(0.1);
  const auto cells = lemma_grid({1.0, 2.0}, {0.2, 0.9}, 0.5, mu_t);
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[1].r, 1.0);
  EXPECT_EQ(cells[1].sigma_v, 0.9);
  EXPECT_EQ(cells[2].r, 2.0);
  for (const auto& c : cells) EXPECT_EQ(c.grad_alpha0 < 0.0, c.sigma_v > c.sigma0);
}
