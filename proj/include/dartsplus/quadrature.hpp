#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

namespace dartsplus {

struct QuadratureError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Gauss-Hermite rule for the weight exp(-x^2).
struct HermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

// Nodes are eigenvalues of the symmetric Jacobi matrix, then polished by
// Newton steps on the orthonormal Hermite recurrence. The recurrence is
// rescaled as it runs so large rules do not overflow; weights of far-tail
// nodes underflow to zero, which is harmless.
inline HermiteRule make_hermite_rule(std::size_t n) {
  if (n < 1) throw std::invalid_argument("make_hermite_rule: n must be >= 1");
  constexpr double kPiM4 = 0.7511255444649425;  // pi^(-1/4)
  constexpr double kBig = 1e150;
  const double nd = static_cast<double>(n);
  HermiteRule rule;
  rule.nodes.assign(n, 0.0);
  rule.weights.assign(n, 0.0);
  if (n == 1) {
    rule.weights[0] = std::sqrt(M_PI);
    return rule;
  }

  Eigen::VectorXd diag = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  Eigen::VectorXd sub(static_cast<Eigen::Index>(n - 1));
  for (std::size_t j = 0; j + 1 < n; ++j) sub[static_cast<Eigen::Index>(j)] = std::sqrt(static_cast<double>(j + 1) / 2.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig;
  eig.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw QuadratureError("make_hermite_rule: eigenvalue solve failed");

  std::vector<double> a(n), b(n);
  for (std::size_t j = 0; j < n; ++j) {
    a[j] = std::sqrt(2.0 / static_cast<double>(j + 1));
    b[j] = std::sqrt(static_cast<double>(j) / static_cast<double>(j + 1));
  }
  // p_n(z) and sqrt(2n) p_{n-1}(z) = p_n'(z), both scaled by exp(-log_scale)
  auto eval = [&](double z, double& p, double& dp, double& log_scale) {
    double p1 = kPiM4, p2 = 0.0;
    log_scale = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p3 = p2;
      p2 = p1;
      p1 = z * a[j] * p2 - b[j] * p3;
      if (std::abs(p1) > kBig) {
        p1 /= kBig;
        p2 /= kBig;
        log_scale += std::log(kBig);
      }
    }
    p = p1;
    dp = std::sqrt(2.0 * nd) * p2;
  };

  const std::size_t m = (n + 1) / 2;
  for (std::size_t i = 0; i < m; ++i) {
    // largest roots first, mirrored onto the negative half; stored ascending
    double z = eig.eigenvalues()[static_cast<Eigen::Index>(n - 1 - i)];
    if (n % 2 == 1 && i == m - 1) z = 0.0;
    double p = 0.0, dp = 0.0, log_scale = 0.0;
    for (int it = 0; it < 3; ++it) {
      eval(z, p, dp, log_scale);
      z -= p / dp;
    }
    eval(z, p, dp, log_scale);
    const double w = std::exp(std::log(2.0) - 2.0 * (std::log(std::abs(dp)) + log_scale));
    rule.nodes[n - 1 - i] = z;
    rule.nodes[i] = -z;
    rule.weights[i] = w;
    rule.weights[n - 1 - i] = w;
  }
  return rule;
}

// Rules are expensive for large n; build each size once per process.
inline const HermiteRule& hermite_rule(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, HermiteRule> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, make_hermite_rule(n)).first;
  return it->second;
}

// E[f(eps)] for eps ~ N(0, 1) with a fixed-size rule.
inline double gaussian_expectation_fixed(const std::function<double(double)>& f, std::size_t n) {
  const auto& rule = hermite_rule(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (rule.weights[i] == 0.0) continue;
    acc += rule.weights[i] * f(std::sqrt(2.0) * rule.nodes[i]);
  }
  return acc / std::sqrt(M_PI);
}

struct QuadratureOptions {
  std::size_t min_nodes = 64;
  std::size_t max_nodes = 8192;
  double tol = 1e-10;
};

struct QuadratureResult {
  double value = 0.0;
  std::size_t nodes = 0;
  double last_change = 0.0;
};

// Doubles the rule until two successive estimates differ by at most tol.
inline QuadratureResult gaussian_expectation(const std::function<double(double)>& f, QuadratureOptions opt = {}) {
  if (opt.min_nodes < 1 || opt.max_nodes < opt.min_nodes)
    throw std::invalid_argument("gaussian_expectation: bad node limits");
  double prev = gaussian_expectation_fixed(f, opt.min_nodes);
  for (std::size_t n = 2 * opt.min_nodes; n <= opt.max_nodes; n *= 2) {
    const double cur = gaussian_expectation_fixed(f, n);
    const double change = std::abs(cur - prev);
    if (change <= opt.tol) return {cur, n, change};
    prev = cur;
  }
  throw QuadratureError("gaussian_expectation: no convergence to " + std::to_string(opt.tol) + " within " +
                        std::to_string(opt.max_nodes) + " nodes");
}

}  // namespace dartsplus
