#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dartsplus/tensor.hpp"

namespace dartsplus {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// Compares grad buffers of `params` (already filled by the caller's backward
// pass) against central differences of `f`. `f` evaluates the scalar
// objective at the current parameter values and must be deterministic.
inline GradCheckResult finite_diff_check(const std::function<double()>& f, std::vector<Tensor> params,
                                         double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  GradCheckResult res;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].data();
    auto grads = params[t].grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f();
      values[i] = saved - h;
      const double down = f();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NonFiniteError("finite_diff_check: objective is not finite");
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grads[i];
      const double rel = std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
      if (res.checked++ == 0 || rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_tensor = t;
        res.worst_index = i;
        res.worst_analytic = analytic;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

// Convenience: runs `loss_fn` once with a recording graph to populate grads,
// then checks them against central differences.
inline GradCheckResult finite_diff_check(const std::function<Tensor(Graph&)>& loss_fn,
                                         std::vector<Tensor> params, double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  {
    Graph g;
    Tensor loss = loss_fn(g);
    g.backward(loss);
  }
  auto eval = [&]() {
    Graph g;
    g.set_recording(false);
    return loss_fn(g).item();
  };
  return finite_diff_check(std::function<double()>(eval), std::move(params), h);
}

}  // namespace dartsplus
