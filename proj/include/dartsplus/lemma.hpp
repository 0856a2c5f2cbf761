#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dartsplus/ops.hpp"
#include "dartsplus/quadrature.hpp"
#include "dartsplus/rng.hpp"
#include "dartsplus/tensor.hpp"

// Two-layer toy one-shot model o(x) = w_r^T (a0 x + (1 - a0) W x) on 2-D
// Gaussian mixtures, its bi-level training, and closed-form expectations at
// the trained fixed point.
namespace dartsplus::lemma {

using Vec2 = std::array<double, 2>;
using Mat2 = std::array<double, 4>;  // row-major

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr Vec2 kE{kInvSqrt2, kInvSqrt2};

// Mean scale that satisfies mu^2 / 2 + sigma^2 = 1.
inline double normalized_mu(double sigma) {
  if (!(sigma >= 0.0 && sigma <= 1.0)) throw std::invalid_argument("normalized_mu: sigma must lie in [0, 1]");
  return std::sqrt(2.0 * (1.0 - sigma * sigma));
}

inline double normalized_sigma(double mu) {
  if (!(mu >= 0.0 && mu <= std::sqrt(2.0))) throw std::invalid_argument("normalized_sigma: mu must lie in [0, sqrt(2)]");
  return std::sqrt(std::max(0.0, 1.0 - 0.5 * mu * mu));
}

inline double eta_of(double mu_t) { return 2.0 / std::sqrt(2.0 + mu_t * mu_t); }

inline double lambda_of(double alpha0, double mu_t) { return alpha0 + (1.0 - alpha0) * eta_of(mu_t); }

struct LemmaConfig {
  double sigma_t = 0.1;
  double mu_t = normalized_mu(0.1);
  double sigma_v = 0.5;
  double mu_v = normalized_mu(0.5);
  double r = 1.0;
  std::size_t n_train = 2000;
  std::size_t n_val = 2000;
  std::uint64_t seed = 0;

  std::size_t epochs = 200;
  std::size_t batch_size = 100;
  double lr_w = 0.5;
  double lr_alpha = 0.05;
  double alpha0_init = 0.5;
  bool train_alpha = true;
  double w_init_noise = 0.1;  // W starts at I plus this much Gaussian noise

  void validate() const {
    auto norm_ok = [](double mu, double sigma) { return std::abs(0.5 * mu * mu + sigma * sigma - 1.0) <= 1e-9; };
    if (!norm_ok(mu_t, sigma_t)) throw std::invalid_argument("LemmaConfig: mu_t^2/2 + sigma_t^2 must equal 1");
    if (!norm_ok(mu_v, sigma_v)) throw std::invalid_argument("LemmaConfig: mu_v^2/2 + sigma_v^2 must equal 1");
    if (!(r > 0.0)) throw std::invalid_argument("LemmaConfig: r must be positive");
    if (sigma_t < 0.0 || sigma_v < 0.0) throw std::invalid_argument("LemmaConfig: sigmas must be non-negative");
    const double root2 = std::sqrt(2.0) + 1e-12;
    if (mu_t < 0.0 || mu_t > root2 || mu_v < 0.0 || mu_v > root2)
      throw std::invalid_argument("LemmaConfig: mu must lie in [0, sqrt(2)]");
    if (n_train == 0 || n_train % 2 || n_val == 0 || n_val % 2)
      throw std::invalid_argument("LemmaConfig: sample counts must be positive and even");
    if (batch_size == 0 || batch_size > n_train || batch_size > n_val)
      throw std::invalid_argument("LemmaConfig: batch_size must lie in [1, min(n_train, n_val)]");
    if (!(alpha0_init > 0.0 && alpha0_init < 1.0)) throw std::invalid_argument("LemmaConfig: alpha0_init must lie in (0, 1)");
    if (epochs == 0) throw std::invalid_argument("LemmaConfig: epochs must be >= 1");
  }
};

struct MixtureData {
  std::vector<double> x;  // n x 2
  std::vector<double> y;  // +1 / -1
  std::size_t size() const { return y.size(); }
  Vec2 point(std::size_t i) const { return {x[2 * i], x[2 * i + 1]}; }
};

// y x ~ N(mu e, sigma^2 I) with labels alternating +1, -1.
inline MixtureData gen_mixture(double mu, double sigma, std::size_t n, std::uint64_t seed) {
  if (n % 2) throw std::invalid_argument("gen_mixture: n must be even, got " + std::to_string(n));
  Rng rng(seed);
  MixtureData d;
  d.x.resize(2 * n);
  d.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = i % 2 == 0 ? 1.0 : -1.0;
    d.y[i] = y;
    for (std::size_t k = 0; k < 2; ++k) d.x[2 * i + k] = y * (mu * kE[k] + sigma * rng.normal());
  }
  return d;
}

struct LemmaModel {
  double alpha0 = 0.5;
  Mat2 W{1.0, 0.0, 0.0, 1.0};
  Vec2 w_r{kInvSqrt2, kInvSqrt2};

  double alpha1() const { return 1.0 - alpha0; }

  Mat2 w_alpha() const {
    return {alpha0 + alpha1() * W[0], alpha1() * W[1], alpha1() * W[2], alpha0 + alpha1() * W[3]};
  }

  // v = W_alpha^T w_r, so o(x) = v^T x
  Vec2 v() const {
    const Mat2 a = w_alpha();
    return {a[0] * w_r[0] + a[2] * w_r[1], a[1] * w_r[0] + a[3] * w_r[1]};
  }

  double output(const Vec2& x) const {
    const Vec2 vv = v();
    return vv[0] * x[0] + vv[1] * x[1];
  }

  Vec2 apply_w(const Vec2& x) const { return {W[0] * x[0] + W[1] * x[1], W[2] * x[0] + W[3] * x[1]}; }

  double r() const { return std::hypot(w_r[0], w_r[1]); }

  // w_r = r e, W = eta e e^T
  static LemmaModel fixed_point(double r, double mu_t, double alpha0) {
    LemmaModel m;
    m.alpha0 = alpha0;
    const double eta = eta_of(mu_t);
    m.W = {0.5 * eta, 0.5 * eta, 0.5 * eta, 0.5 * eta};
    m.w_r = {r * kInvSqrt2, r * kInvSqrt2};
    return m;
  }
};

// Autodiff view of a model: leaf tensors alpha0 [1], W [2,2], w_r [2,1].
struct LemmaTensors {
  Tensor alpha0, W, w_r;

  explicit LemmaTensors(const LemmaModel& m)
      : alpha0(Tensor::scalar(m.alpha0, true)),
        W({2, 2}, std::vector<double>(m.W.begin(), m.W.end()), true),
        w_r({2, 1}, std::vector<double>(m.w_r.begin(), m.w_r.end()), true) {}

  std::vector<Tensor> tensors() const { return {alpha0, W, w_r}; }
};

inline Tensor batch_inputs(const MixtureData& d, std::span<const std::size_t> idx) {
  Tensor x({idx.size(), 2});
  auto v = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    v[2 * i] = d.x[2 * idx[i]];
    v[2 * i + 1] = d.x[2 * idx[i] + 1];
  }
  return x;
}

// Mean logistic loss of the model over the selected samples.
inline Tensor lemma_loss(Graph& g, const LemmaTensors& t, const MixtureData& d, std::span<const std::size_t> idx) {
  Tensor x = batch_inputs(d, idx);
  std::vector<double> y(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) y[i] = d.y[idx[i]];
  Tensor one = Tensor::scalar(1.0);
  Tensor a1 = ops::add(g, one, ops::scale(g, t.alpha0, -1.0));
  Tensor wx = ops::matmul(g, x, ops::transpose(g, t.W));
  Tensor h = ops::add(g, ops::mul_scalar(g, x, t.alpha0), ops::mul_scalar(g, wx, a1));
  Tensor o = ops::matmul(g, h, t.w_r);
  return ops::binary_logistic_loss(g, o, y);
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

struct LemmaGradient {
  double loss = 0.0;
  double d_alpha0 = 0.0;
  Mat2 d_W{};
  Vec2 d_w_r{};
};

inline LemmaGradient lemma_gradient(const LemmaModel& m, const MixtureData& d, std::span<const std::size_t> idx) {
  LemmaTensors t(m);
  Graph g;
  Tensor loss = lemma_loss(g, t, d, idx);
  g.backward(loss);
  LemmaGradient out;
  out.loss = loss.item();
  out.d_alpha0 = t.alpha0.grad()[0];
  for (std::size_t k = 0; k < 4; ++k) out.d_W[k] = t.W.grad()[k];
  for (std::size_t k = 0; k < 2; ++k) out.d_w_r[k] = t.w_r.grad()[k];
  return out;
}

inline LemmaGradient lemma_gradient(const LemmaModel& m, const MixtureData& d) {
  const auto idx = all_indices(d.size());
  return lemma_gradient(m, d, idx);
}

inline void renormalize_w_r(LemmaModel& m, double r) {
  const double n = m.r();
  if (!(n > 0.0) || !std::isfinite(n)) throw NonFiniteError("renormalize_w_r: degenerate w_r");
  m.w_r = {m.w_r[0] * r / n, m.w_r[1] * r / n};
}

// Rescales each row of W so every coordinate of {W x} has unit variance over
// the data.
inline void normalize_features(LemmaModel& m, const MixtureData& d) {
  const std::size_t n = d.size();
  for (std::size_t row = 0; row < 2; ++row) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = m.W[2 * row] * d.x[2 * i] + m.W[2 * row + 1] * d.x[2 * i + 1];
      mean += z;
      sq += z * z;
    }
    mean /= static_cast<double>(n);
    const double var = sq / static_cast<double>(n) - mean * mean;
    if (!(var > 0.0)) throw NonFiniteError("normalize_features: zero feature variance in row " + std::to_string(row));
    const double s = 1.0 / std::sqrt(var);
    m.W[2 * row] *= s;
    m.W[2 * row + 1] *= s;
  }
}

// Per-coordinate variance of {W x}; both entries are 1 after normalize_features.
inline Vec2 feature_variance(const LemmaModel& m, const MixtureData& d) {
  Vec2 out{};
  const std::size_t n = d.size();
  for (std::size_t row = 0; row < 2; ++row) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = m.W[2 * row] * d.x[2 * i] + m.W[2 * row + 1] * d.x[2 * i + 1];
      mean += z;
      sq += z * z;
    }
    mean /= static_cast<double>(n);
    out[row] = sq / static_cast<double>(n) - mean * mean;
  }
  return out;
}

struct LemmaSnapshot {
  std::size_t epoch = 0;
  double alpha0 = 0.0;
  Mat2 W{};
  Vec2 w_r{};
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct LemmaTrajectory {
  std::vector<LemmaSnapshot> snapshots;  // entry 0 is the initial state
  LemmaModel model;
};

inline constexpr double kAlphaMargin = 1e-6;

inline LemmaModel initial_model(const LemmaConfig& cfg, Rng& rng) {
  LemmaModel m;
  m.alpha0 = cfg.alpha0_init;
  for (std::size_t k = 0; k < 4; ++k) m.W[k] = (k == 0 || k == 3 ? 1.0 : 0.0) + cfg.w_init_noise * rng.normal();
  m.w_r = {rng.normal(), rng.normal()};
  renormalize_w_r(m, cfg.r);
  return m;
}

// Alternating minibatch training: an alpha0 step on a validation batch, then
// a (W, w_r) step on a training batch. w_r is projected back to norm r after
// every weight step; {W x} is renormalized at the end of every epoch.
inline LemmaTrajectory train_lemma_bilevel(const LemmaConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const MixtureData train = gen_mixture(cfg.mu_t, cfg.sigma_t, cfg.n_train, rng.next_u64());
  const MixtureData val = gen_mixture(cfg.mu_v, cfg.sigma_v, cfg.n_val, rng.next_u64());
  Rng init_rng = rng.fork(1);
  Rng order_rng = rng.fork(2);

  LemmaModel m = initial_model(cfg, init_rng);
  normalize_features(m, train);

  LemmaTrajectory traj;
  auto snapshot = [&](std::size_t epoch) {
    LemmaSnapshot s;
    s.epoch = epoch;
    s.alpha0 = m.alpha0;
    s.W = m.W;
    s.w_r = m.w_r;
    s.train_loss = lemma_gradient(m, train).loss;
    s.val_loss = lemma_gradient(m, val).loss;
    traj.snapshots.push_back(s);
  };
  snapshot(0);

  auto train_idx = all_indices(train.size());
  auto val_idx = all_indices(val.size());
  const std::size_t steps = std::min(train.size(), val.size()) / cfg.batch_size;
  std::size_t step_counter = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(train_idx.begin(), train_idx.end());
    order_rng.shuffle(val_idx.begin(), val_idx.end());
    for (std::size_t s = 0; s < steps; ++s, ++step_counter) {
      if (cfg.train_alpha) {
        const std::span<const std::size_t> vb(val_idx.data() + s * cfg.batch_size, cfg.batch_size);
        const auto ga = lemma_gradient(m, val, vb);
        if (!std::isfinite(ga.d_alpha0))
          throw NonFiniteError("train_lemma_bilevel: non-finite alpha gradient at step " + std::to_string(step_counter));
        m.alpha0 = std::clamp(m.alpha0 - cfg.lr_alpha * ga.d_alpha0, kAlphaMargin, 1.0 - kAlphaMargin);
      }
      const std::span<const std::size_t> tb(train_idx.data() + s * cfg.batch_size, cfg.batch_size);
      const auto gw = lemma_gradient(m, train, tb);
      for (std::size_t k = 0; k < 4; ++k) m.W[k] -= cfg.lr_w * gw.d_W[k];
      for (std::size_t k = 0; k < 2; ++k) m.w_r[k] -= cfg.lr_w * gw.d_w_r[k];
      for (double v : m.W)
        if (!std::isfinite(v))
          throw NonFiniteError("train_lemma_bilevel: non-finite W at step " + std::to_string(step_counter));
      renormalize_w_r(m, cfg.r);
    }
    normalize_features(m, train);
    snapshot(epoch);
  }
  traj.model = m;
  return traj;
}

inline double cosine(const Vec2& a, const Vec2& b) {
  return (a[0] * b[0] + a[1] * b[1]) / (std::hypot(a[0], a[1]) * std::hypot(b[0], b[1]));
}

struct FixedPointFit {
  double cos_w_r_e = 0.0;
  double eta_hat = 0.0;        // least-squares t in W x ~ t (e^T x) e
  double eta_expected = 0.0;   // 2 / sqrt(2 + mu_t^2)
  double eta_rel_error = 0.0;
  double residual_rel = 0.0;   // ||W x - eta (e^T x) e|| / ||eta (e^T x) e|| over the points
};

// Compares a trained model against w_r -> r e, W x -> t_x e on held-out points.
inline FixedPointFit fit_fixed_point(const LemmaModel& m, double mu_t, const MixtureData& held_out) {
  FixedPointFit f;
  f.cos_w_r_e = cosine(m.w_r, kE);
  f.eta_expected = eta_of(mu_t);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    const Vec2 x = held_out.point(i);
    const Vec2 wx = m.apply_w(x);
    const double ex = kE[0] * x[0] + kE[1] * x[1];
    num += (kE[0] * wx[0] + kE[1] * wx[1]) * ex;
    den += ex * ex;
  }
  f.eta_hat = num / den;
  f.eta_rel_error = std::abs(f.eta_hat - f.eta_expected) / f.eta_expected;
  double res = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    const Vec2 x = held_out.point(i);
    const Vec2 wx = m.apply_w(x);
    const double t = f.eta_expected * (kE[0] * x[0] + kE[1] * x[1]);
    res += std::pow(wx[0] - t * kE[0], 2) + std::pow(wx[1] - t * kE[1], 2);
    ref += t * t;
  }
  f.residual_rel = std::sqrt(res / ref);
  return f;
}

// Plain gradient descent on alpha0 over the full validation set with the
// weights held at the model's values. Returns alpha0 after each step
// (entry 0 is the starting value).
inline std::vector<double> alpha_descent(LemmaModel m, const MixtureData& val, std::size_t steps, double lr) {
  std::vector<double> path{m.alpha0};
  const auto idx = all_indices(val.size());
  for (std::size_t s = 0; s < steps; ++s) {
    const auto gr = lemma_gradient(m, val, idx);
    m.alpha0 = std::clamp(m.alpha0 - lr * gr.d_alpha0, kAlphaMargin, 1.0 - kAlphaMargin);
    path.push_back(m.alpha0);
  }
  return path;
}

// ---- expectations at the fixed point ----

inline double sigmoid(double x) { return ops::detail::stable_sigmoid(x); }

// E[(sigmoid(r lambda (mu_v + sigma_v e)) - 1)(mu_v + sigma_v e)], e ~ N(0, 1)
inline double val_expectation(double r, double lambda, double mu_v, double sigma_v, QuadratureOptions q = {}) {
  return gaussian_expectation(
             [=](double eps) {
               const double u = mu_v + sigma_v * eps;
               return (sigmoid(r * lambda * u) - 1.0) * u;
             },
             q)
      .value;
}

// g(r, sigma_v) with mu_v tied to sigma_v by normalization.
inline double g_function(double r, double sigma_v, double alpha0, double mu_t, QuadratureOptions q = {}) {
  if (!(sigma_v >= 0.0 && sigma_v <= 1.0)) throw std::invalid_argument("g_function: sigma_v must lie in [0, 1]");
  return -val_expectation(r, lambda_of(alpha0, mu_t), normalized_mu(sigma_v), sigma_v, q);
}

// d L_val / d alpha0 (per-sample mean) at w_r = r e, W = eta e e^T:
// r (1 - eta) E[(sigmoid(r lambda u) - 1) u], u = mu_v + sigma_v e.
inline double grad_alpha0_closed_form(double r, double alpha0, double mu_t, double mu_v, double sigma_v,
                                      QuadratureOptions q = {}) {
  return r * (1.0 - eta_of(mu_t)) * val_expectation(r, lambda_of(alpha0, mu_t), mu_v, sigma_v, q);
}

struct Sigma0Result {
  double sigma0 = 0.0;
  double g_at_root = 0.0;
  std::size_t iterations = 0;
};

// Root of g(r, .) on (0, 1) by bisection.
inline Sigma0Result sigma0_of_r(double r, double alpha0, double mu_t, double tol = 1e-8) {
  if (!(r > 0.0)) throw std::invalid_argument("sigma0_of_r: r must be positive");
  double lo = 0.0, hi = 1.0;
  const double g_lo = g_function(r, lo, alpha0, mu_t);
  const double g_hi = g_function(r, hi, alpha0, mu_t);
  if (!(g_lo > 0.0 && g_hi < 0.0))
    throw std::domain_error("sigma0_of_r: no sign change of g on [0, 1] (g(0)=" + std::to_string(g_lo) +
                            ", g(1)=" + std::to_string(g_hi) + ")");
  Sigma0Result res;
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    if (g_function(r, mid, alpha0, mu_t) > 0.0)
      lo = mid;
    else
      hi = mid;
    ++res.iterations;
  }
  res.sigma0 = 0.5 * (lo + hi);
  res.g_at_root = g_function(r, res.sigma0, alpha0, mu_t);
  return res;
}

struct TrainGradientClosedForm {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  Vec2 grad_w_r{};       // lambda1 W_a e + lambda2 W_a v
  Mat2 grad_W{};         // a1 (lambda1 w_r e^T + lambda2 w_r v^T)
  Vec2 dominant_w_r{};   // lambda1 W_a e
  Mat2 dominant_W{};     // a1 lambda1 w_r e^T
  Vec2 minor_w_r{};      // lambda2 W_a v
  Mat2 minor_W{};        // a1 lambda2 w_r v^T
};

// Expected training-loss gradients for y x ~ N(mu_t e, sigma_t^2 I).
inline TrainGradientClosedForm grad_train_closed_form(const LemmaModel& m, double mu_t, double sigma_t,
                                                      QuadratureOptions q = {}) {
  const Vec2 v = m.v();
  const double vn = std::hypot(v[0], v[1]);
  const double ve = v[0] * kE[0] + v[1] * kE[1];
  TrainGradientClosedForm out;
  out.lambda1 = mu_t * gaussian_expectation([=](double e0) { return sigmoid(mu_t * ve + sigma_t * vn * e0) - 1.0; }, q).value;
  if (vn > 0.0 && sigma_t > 0.0)
    out.lambda2 = sigma_t / vn *
                  gaussian_expectation([=](double e0) { return (sigmoid(mu_t * ve + sigma_t * vn * e0) - 1.0) * e0; }, q)
                      .value;
  const Mat2 a = m.w_alpha();
  const Vec2 ae{a[0] * kE[0] + a[1] * kE[1], a[2] * kE[0] + a[3] * kE[1]};
  const Vec2 av{a[0] * v[0] + a[1] * v[1], a[2] * v[0] + a[3] * v[1]};
  const double a1 = m.alpha1();
  for (std::size_t i = 0; i < 2; ++i) {
    out.dominant_w_r[i] = out.lambda1 * ae[i];
    out.minor_w_r[i] = out.lambda2 * av[i];
    out.grad_w_r[i] = out.dominant_w_r[i] + out.minor_w_r[i];
    for (std::size_t j = 0; j < 2; ++j) {
      out.dominant_W[2 * i + j] = a1 * out.lambda1 * m.w_r[i] * kE[j];
      out.minor_W[2 * i + j] = a1 * out.lambda2 * m.w_r[i] * v[j];
      out.grad_W[2 * i + j] = out.dominant_W[2 * i + j] + out.minor_W[2 * i + j];
    }
  }
  return out;
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

// Sample mean and standard error of f(eps), eps ~ N(0, 1).
template <class F>
MonteCarloEstimate monte_carlo_expectation(F&& f, std::size_t samples, std::uint64_t seed) {
  if (samples < 2) throw std::invalid_argument("monte_carlo_expectation: need at least 2 samples");
  Rng rng(seed);
  // Welford accumulation
  double mean = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double x = f(rng.normal());
    const double d = x - mean;
    mean += d / static_cast<double>(i + 1);
    m2 += d * (x - mean);
  }
  const double var = m2 / static_cast<double>(samples - 1);
  return {mean, std::sqrt(var / static_cast<double>(samples))};
}

struct GridCell {
  double r = 0.0;
  double sigma_v = 0.0;
  double g = 0.0;
  double grad_alpha0 = 0.0;
  double sigma0 = 0.0;
};

// g and d L_val / d alpha0 over an (r, sigma_v) grid, row-major in r.
inline std::vector<GridCell> lemma_grid(const std::vector<double>& rs, const std::vector<double>& sigmas,
                                        double alpha0, double mu_t) {
  std::vector<GridCell> out;
  out.reserve(rs.size() * sigmas.size());
  for (double r : rs) {
    const double s0 = sigma0_of_r(r, alpha0, mu_t).sigma0;
    for (double sv : sigmas) {
      GridCell c;
      c.r = r;
      c.sigma_v = sv;
      c.g = g_function(r, sv, alpha0, mu_t);
      c.grad_alpha0 = grad_alpha0_closed_form(r, alpha0, mu_t, normalized_mu(sv), sv);
      c.sigma0 = s0;
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace dartsplus::lemma
