#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dartsplus/tensor.hpp"

// Differentiable tensor operations. Every op takes the graph it records into
// as its first argument; all reductions run in a fixed loop order so results
// are bit-reproducible.
namespace dartsplus::ops {

namespace detail {

inline void require_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank(const std::string& op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank)
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                 std::size_t dilation) {
  const long span = static_cast<long>(dilation * (k - 1) + 1);
  const long padded = static_cast<long>(in + 2 * pad);
  if (padded < span) return 0;
  return static_cast<std::size_t>((padded - span) / static_cast<long>(stride) + 1);
}

// Output positions o in [lo, hi) whose input index o*stride - pad + offset
// falls inside [0, in).
struct Range {
  std::size_t lo, hi;
};

inline Range valid_outputs(long offset, std::size_t pad, std::size_t stride, std::size_t in,
                           std::size_t out) {
  const long s = static_cast<long>(stride);
  const long p = static_cast<long>(pad);
  // need o*s >= p - offset
  long lo_num = p - offset;
  long lo = lo_num <= 0 ? 0 : (lo_num + s - 1) / s;
  // need o*s <= in - 1 + p - offset
  long hi_num = static_cast<long>(in) - 1 + p - offset;
  long hi = hi_num < 0 ? 0 : hi_num / s + 1;
  lo = std::clamp(lo, 0L, static_cast<long>(out));
  hi = std::clamp(hi, lo, static_cast<long>(out));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

struct Geometry {
  std::size_t batch, channels, height, width;
};

inline Geometry nchw(const std::string& op, const Tensor& x) {
  require_rank(op, x, 4);
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

}  // namespace detail

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  Tensor out(a.shape());
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  g.attach(out, "add", {&a, &b}, [a, b, out]() mutable {
    auto go = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  });
  return out;
}

inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  Tensor out(a.shape());
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  g.attach(out, "mul", {&a, &b}, [a, b, out]() mutable {
    auto go = out.grad();
    auto av = a.data();
    auto bv = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
  return out;
}

inline Tensor scale(Graph& g, const Tensor& a, double factor) {
  Tensor out(a.shape());
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = factor * av[i];
  g.attach(out, "scale", {&a}, [a, out, factor]() mutable {
    auto go = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += factor * go[i];
  });
  return out;
}

// a * s where s holds a single value.
inline Tensor mul_scalar(Graph& g, const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar", "scalar operand has shape " + shape_str(s.shape()));
  Tensor out(a.shape());
  const double k = s.data()[0];
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = k * av[i];
  g.attach(out, "mul_scalar", {&a, &s}, [a, s, out]() mutable {
    auto go = out.grad();
    auto av = a.data();
    const double k = s.data()[0];
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += k * go[i];
    }
    if (s.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * av[i];
      s.grad()[0] += acc;
    }
  });
  return out;
}

inline Tensor sum(Graph& g, const Tensor& a) {
  Tensor out({1});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out.data()[0] = acc;
  g.attach(out, "sum", {&a}, [a, out]() mutable {
    const double go = out.grad()[0];
    for (auto& v : a.grad()) v += go;
  });
  return out;
}

inline Tensor mean(Graph& g, const Tensor& a) {
  return scale(g, sum(g, a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " +
                                   shape_str(b.shape()));
  Tensor out({m, n});
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) o[i * n + j] += x * bv[p * n + j];
    }
  g.attach(out, "matmul", {&a, &b}, [a, b, out, m, k, n]() mutable {
    auto go = out.grad();
    auto av = a.data();
    auto bv = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * go[i * n + j];
        }
    }
  });
  return out;
}

inline Tensor transpose(Graph& g, const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[j * m + i] = av[i * n + j];
  g.attach(out, "transpose", {&a}, [a, out, m, n]() mutable {
    auto go = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
  });
  return out;
}

// x [B, F] + bias [F] broadcast over rows.
inline Tensor add_bias(Graph& g, const Tensor& x, const Tensor& bias) {
  detail::require_rank("add_bias", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.numel() != cols)
    throw ShapeError("add_bias", "bias " + shape_str(bias.shape()) + " does not match " +
                                     shape_str(x.shape()));
  Tensor out(x.shape());
  auto o = out.data();
  auto xv = x.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = xv[r * cols + c] + bv[c];
  g.attach(out, "add_bias", {&x, &bias}, [x, bias, out, rows, cols]() mutable {
    auto go = out.grad();
    if (x.requires_grad()) {
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    }
    if (bias.requires_grad()) {
      auto gb = bias.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += go[r * cols + c];
    }
  });
  return out;
}

inline Tensor relu(Graph& g, const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  g.attach(out, "relu", {&x}, [x, out]() mutable {
    auto go = out.grad();
    auto gx = x.grad();
    auto xv = x.data();
    // subgradient 0 at exactly 0
    for (std::size_t i = 0; i < go.size(); ++i)
      if (xv[i] > 0.0) gx[i] += go[i];
  });
  return out;
}

inline Tensor sigmoid(Graph& g, const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = detail::stable_sigmoid(xv[i]);
  g.attach(out, "sigmoid", {&x}, [x, out]() mutable {
    auto go = out.grad();
    auto ov = out.data();
    auto gx = x.grad();
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * ov[i] * (1.0 - ov[i]);
  });
  return out;
}

namespace detail {

struct AxisSplit {
  std::size_t outer, axis, inner;
};

inline AxisSplit split_axis(const std::string& op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw ShapeError(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

inline Tensor softmax(Graph& g, const Tensor& x, std::size_t axis) {
  const auto s = detail::split_axis("softmax", x.shape(), axis);
  Tensor out(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t a = 0; a < s.outer; ++a)
    for (std::size_t c = 0; c < s.inner; ++c) {
      const std::size_t base = a * s.axis * s.inner + c;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.axis; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.axis; ++k) {
        const double e = std::exp(xv[base + k * s.inner] - mx);
        o[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.axis; ++k) o[base + k * s.inner] /= z;
    }
  g.attach(out, "softmax", {&x}, [x, out, s]() mutable {
    auto go = out.grad();
    auto ov = out.data();
    auto gx = x.grad();
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t c = 0; c < s.inner; ++c) {
        const std::size_t base = a * s.axis * s.inner + c;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.axis; ++k)
          dot += go[base + k * s.inner] * ov[base + k * s.inner];
        for (std::size_t k = 0; k < s.axis; ++k) {
          const std::size_t i = base + k * s.inner;
          gx[i] += ov[i] * (go[i] - dot);
        }
      }
  });
  return out;
}

// Reduces `axis` away; the result keeps the remaining dimensions (or [1]).
inline Tensor logsumexp(Graph& g, const Tensor& x, std::size_t axis) {
  const auto s = detail::split_axis("logsumexp", x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t a = 0; a < s.outer; ++a)
    for (std::size_t c = 0; c < s.inner; ++c) {
      const std::size_t base = a * s.axis * s.inner + c;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.axis; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.axis; ++k) z += std::exp(xv[base + k * s.inner] - mx);
      o[a * s.inner + c] = mx + std::log(z);
    }
  g.attach(out, "logsumexp", {&x}, [x, out, s]() mutable {
    auto go = out.grad();
    auto ov = out.data();
    auto xv = x.data();
    auto gx = x.grad();
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t c = 0; c < s.inner; ++c) {
        const std::size_t base = a * s.axis * s.inner + c;
        const double lse = ov[a * s.inner + c];
        const double gr = go[a * s.inner + c];
        for (std::size_t k = 0; k < s.axis; ++k) {
          const std::size_t i = base + k * s.inner;
          gx[i] += gr * std::exp(xv[i] - lse);
        }
      }
  });
  return out;
}

// Mean softmax cross-entropy of logits [B, K] against integer labels.
inline Tensor cross_entropy(Graph& g, const Tensor& logits, std::span<const int> labels) {
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch)
    throw ShapeError("cross_entropy", std::to_string(labels.size()) + " labels for logits " +
                                          shape_str(logits.shape()));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0," +
                              std::to_string(classes) + ")");
  std::vector<int> ys(labels.begin(), labels.end());
  std::vector<double> probs(batch * classes);
  auto lv = logits.data();
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = &lv[b * classes];
    double mx = row[0];
    for (std::size_t k = 1; k < classes; ++k) mx = std::max(mx, row[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < classes; ++k) z += std::exp(row[k] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < classes; ++k) probs[b * classes + k] = std::exp(row[k] - lse);
    total += lse - row[ys[b]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(batch));
  g.attach(out, "cross_entropy", {&logits},
           [logits, out, ys = std::move(ys), probs = std::move(probs), batch, classes]() mutable {
             const double go = out.grad()[0] / static_cast<double>(batch);
             auto gl = logits.grad();
             for (std::size_t b = 0; b < batch; ++b)
               for (std::size_t k = 0; k < classes; ++k) {
                 const double target = static_cast<int>(k) == ys[b] ? 1.0 : 0.0;
                 gl[b * classes + k] += go * (probs[b * classes + k] - target);
               }
           });
  return out;
}

// Mean of log(1 + exp(-y * o)) for labels y in {-1, +1}.
inline Tensor binary_logistic_loss(Graph& g, const Tensor& scores, std::span<const double> labels) {
  if (scores.numel() != labels.size())
    throw ShapeError("binary_logistic_loss", std::to_string(labels.size()) + " labels for scores " +
                                                 shape_str(scores.shape()));
  std::vector<double> ys(labels.begin(), labels.end());
  auto sv = scores.data();
  double total = 0.0;
  for (std::size_t i = 0; i < ys.size(); ++i) total += detail::softplus(-ys[i] * sv[i]);
  const double n = static_cast<double>(ys.size());
  Tensor out = Tensor::scalar(total / n);
  g.attach(out, "binary_logistic_loss", {&scores}, [scores, out, ys = std::move(ys), n]() mutable {
    const double go = out.grad()[0] / n;
    auto sv = scores.data();
    auto gs = scores.grad();
    for (std::size_t i = 0; i < ys.size(); ++i)
      gs[i] += go * (detail::stable_sigmoid(ys[i] * sv[i]) - 1.0) * ys[i];
  });
  return out;
}

inline Tensor l2_norm(Graph& g, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v * v;
  Tensor out = Tensor::scalar(std::sqrt(acc));
  g.attach(out, "l2_norm", {&x}, [x, out]() mutable {
    const double norm = out.data()[0];
    if (norm == 0.0) return;
    const double go = out.grad()[0] / norm;
    auto xv = x.data();
    auto gx = x.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go * xv[i];
  });
  return out;
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

namespace detail {

// Precomputed overlap of every kernel tap with the input plane. A run covers
// output rows [oy_lo, oy_hi) x cols [ox_lo, ox_hi) reading input at
// (oy*stride + dy, ox*stride + dx).
struct TapRun {
  std::size_t tap;
  std::size_t oy_lo, oy_hi, ox_lo, ox_hi;
  long dy, dx;
};

struct ConvPlan {
  std::size_t in_w = 0, out_w = 0, stride = 1;
  bool flat = false;  // 1x1, stride 1, no padding: the plane is one contiguous run
  std::size_t plane = 0;
  std::vector<TapRun> runs;

  // out[o] += w[tap] * in[i] over every (tap, o, i) triple
  void accumulate(double* out, const double* in, const double* w) const {
    if (flat) {
      const double k = w[0];
      for (std::size_t i = 0; i < plane; ++i) out[i] += k * in[i];
      return;
    }
    for (const auto& r : runs) {
      const double k = w[r.tap];
      for (std::size_t oy = r.oy_lo; oy < r.oy_hi; ++oy) {
        double* orow = out + oy * out_w;
        const double* irow = in + static_cast<long>(oy * stride) * static_cast<long>(in_w) + r.dy * static_cast<long>(in_w) + r.dx;
        if (stride == 1)
          for (std::size_t ox = r.ox_lo; ox < r.ox_hi; ++ox) orow[ox] += k * irow[ox];
        else
          for (std::size_t ox = r.ox_lo; ox < r.ox_hi; ++ox) orow[ox] += k * irow[ox * stride];
      }
    }
  }

  // gin[i] += w[tap] * gout[o]
  void scatter_input(double* gin, const double* gout, const double* w) const {
    if (flat) {
      const double k = w[0];
      for (std::size_t i = 0; i < plane; ++i) gin[i] += k * gout[i];
      return;
    }
    for (const auto& r : runs) {
      const double k = w[r.tap];
      for (std::size_t oy = r.oy_lo; oy < r.oy_hi; ++oy) {
        const double* grow = gout + oy * out_w;
        double* irow = gin + static_cast<long>(oy * stride) * static_cast<long>(in_w) + r.dy * static_cast<long>(in_w) + r.dx;
        if (stride == 1)
          for (std::size_t ox = r.ox_lo; ox < r.ox_hi; ++ox) irow[ox] += k * grow[ox];
        else
          for (std::size_t ox = r.ox_lo; ox < r.ox_hi; ++ox) irow[ox * stride] += k * grow[ox];
      }
    }
  }

  // gw[tap] += sum in[i] * gout[o]
  void accumulate_weight(double* gw, const double* in, const double* gout) const {
    if (flat) {
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += in[i] * gout[i];
      gw[0] += acc;
      return;
    }
    for (const auto& r : runs) {
      double acc = 0.0;
      for (std::size_t oy = r.oy_lo; oy < r.oy_hi; ++oy) {
        const double* grow = gout + oy * out_w;
        const double* irow = in + static_cast<long>(oy * stride) * static_cast<long>(in_w) + r.dy * static_cast<long>(in_w) + r.dx;
        if (stride == 1)
          for (std::size_t ox = r.ox_lo; ox < r.ox_hi; ++ox) acc += irow[ox] * grow[ox];
        else
          for (std::size_t ox = r.ox_lo; ox < r.ox_hi; ++ox) acc += irow[ox * stride] * grow[ox];
      }
      gw[r.tap] += acc;
    }
  }
};

inline ConvPlan make_conv_plan(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w,
                               std::size_t kh, std::size_t kw, const Conv2dOptions& opt) {
  ConvPlan plan;
  plan.in_w = in_w;
  plan.out_w = out_w;
  plan.stride = opt.stride;
  plan.flat = kh == 1 && kw == 1 && opt.stride == 1 && opt.padding == 0;
  plan.plane = out_h * out_w;
  for (std::size_t ky = 0; ky < kh; ++ky) {
    const long oy_off = static_cast<long>(ky * opt.dilation);
    const auto ry = valid_outputs(oy_off, opt.padding, opt.stride, in_h, out_h);
    for (std::size_t kx = 0; kx < kw; ++kx) {
      const long ox_off = static_cast<long>(kx * opt.dilation);
      const auto rx = valid_outputs(ox_off, opt.padding, opt.stride, in_w, out_w);
      if (ry.lo >= ry.hi || rx.lo >= rx.hi) continue;
      plan.runs.push_back({ky * kw + kx, ry.lo, ry.hi, rx.lo, rx.hi, oy_off - static_cast<long>(opt.padding),
                           ox_off - static_cast<long>(opt.padding)});
    }
  }
  return plan;
}

}  // namespace detail

// Dense convolution: x [B, Cin, H, W], weight [Cout, Cin, kh, kw].
inline Tensor conv2d(Graph& g, const Tensor& x, const Tensor& weight, Conv2dOptions opt = {}) {
  const auto in = detail::nchw("conv2d", x);
  detail::require_rank("conv2d", weight, 4);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != in.channels)
    throw ShapeError("conv2d", "input " + shape_str(x.shape()) + " incompatible with weight " +
                                   shape_str(weight.shape()));
  if (opt.stride == 0 || opt.dilation == 0) throw ShapeError("conv2d", "stride and dilation must be positive");
  const std::size_t oh = detail::conv_out_size(in.height, kh, opt.stride, opt.padding, opt.dilation);
  const std::size_t ow = detail::conv_out_size(in.width, kw, opt.stride, opt.padding, opt.dilation);
  if (oh == 0 || ow == 0)
    throw ShapeError("conv2d", "kernel larger than padded input " + shape_str(x.shape()));
  Tensor out({in.batch, cout, oh, ow});
  auto plan = std::make_shared<detail::ConvPlan>(detail::make_conv_plan(in.height, in.width, oh, ow, kh, kw, opt));
  const std::size_t in_plane = in.height * in.width, out_plane = oh * ow, taps = kh * kw;
  {
    auto o = out.data();
    auto xv = x.data();
    auto wv = weight.data();
    for (std::size_t b = 0; b < in.batch; ++b)
      for (std::size_t co = 0; co < cout; ++co) {
        double* op = &o[(b * cout + co) * out_plane];
        for (std::size_t ci = 0; ci < in.channels; ++ci)
          plan->accumulate(op, &xv[(b * in.channels + ci) * in_plane], &wv[(co * in.channels + ci) * taps]);
      }
  }
  g.attach(out, "conv2d", {&x, &weight}, [x, weight, out, in, cout, plan, in_plane, out_plane, taps]() mutable {
    auto go = out.grad();
    auto xv = x.data();
    auto wv = weight.data();
    const bool need_x = x.requires_grad(), need_w = weight.requires_grad();
    std::span<double> gx, gw;
    if (need_x) gx = x.grad();
    if (need_w) gw = weight.grad();
    for (std::size_t b = 0; b < in.batch; ++b)
      for (std::size_t co = 0; co < cout; ++co) {
        const double* gop = &go[(b * cout + co) * out_plane];
        for (std::size_t ci = 0; ci < in.channels; ++ci) {
          const std::size_t in_base = (b * in.channels + ci) * in_plane;
          const std::size_t w_base = (co * in.channels + ci) * taps;
          if (need_x) plan->scatter_input(&gx[in_base], gop, &wv[w_base]);
          if (need_w) plan->accumulate_weight(&gw[w_base], &xv[in_base], gop);
        }
      }
  });
  return out;
}

// Per-channel convolution: x [B, C, H, W], weight [C, 1, kh, kw].
inline Tensor depthwise_conv2d(Graph& g, const Tensor& x, const Tensor& weight, Conv2dOptions opt = {}) {
  const auto in = detail::nchw("depthwise_conv2d", x);
  detail::require_rank("depthwise_conv2d", weight, 4);
  if (weight.dim(0) != in.channels || weight.dim(1) != 1)
    throw ShapeError("depthwise_conv2d", "input " + shape_str(x.shape()) +
                                             " incompatible with weight " + shape_str(weight.shape()));
  if (opt.stride == 0 || opt.dilation == 0)
    throw ShapeError("depthwise_conv2d", "stride and dilation must be positive");
  const std::size_t kh = weight.dim(2), kw = weight.dim(3);
  const std::size_t oh = detail::conv_out_size(in.height, kh, opt.stride, opt.padding, opt.dilation);
  const std::size_t ow = detail::conv_out_size(in.width, kw, opt.stride, opt.padding, opt.dilation);
  if (oh == 0 || ow == 0)
    throw ShapeError("depthwise_conv2d", "kernel larger than padded input " + shape_str(x.shape()));
  Tensor out({in.batch, in.channels, oh, ow});
  auto plan = std::make_shared<detail::ConvPlan>(detail::make_conv_plan(in.height, in.width, oh, ow, kh, kw, opt));
  const std::size_t in_plane = in.height * in.width, out_plane = oh * ow, taps = kh * kw;
  {
    auto o = out.data();
    auto xv = x.data();
    auto wv = weight.data();
    for (std::size_t b = 0; b < in.batch; ++b)
      for (std::size_t c = 0; c < in.channels; ++c)
        plan->accumulate(&o[(b * in.channels + c) * out_plane], &xv[(b * in.channels + c) * in_plane], &wv[c * taps]);
  }
  g.attach(out, "depthwise_conv2d", {&x, &weight}, [x, weight, out, in, plan, in_plane, out_plane, taps]() mutable {
    auto go = out.grad();
    auto xv = x.data();
    auto wv = weight.data();
    const bool need_x = x.requires_grad(), need_w = weight.requires_grad();
    std::span<double> gx, gw;
    if (need_x) gx = x.grad();
    if (need_w) gw = weight.grad();
    for (std::size_t b = 0; b < in.batch; ++b)
      for (std::size_t c = 0; c < in.channels; ++c) {
        const double* gop = &go[(b * in.channels + c) * out_plane];
        const std::size_t in_base = (b * in.channels + c) * in_plane;
        if (need_x) plan->scatter_input(&gx[in_base], gop, &wv[c * taps]);
        if (need_w) plan->accumulate_weight(&gw[c * taps], &xv[in_base], gop);
      }
  });
  return out;
}

struct Pool2dOptions {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
};

// Padding acts as -inf. Ties go to the first maximal element in scan order.
inline Tensor max_pool2d(Graph& g, const Tensor& x, Pool2dOptions opt = {}) {
  const auto in = detail::nchw("max_pool2d", x);
  const std::size_t oh = detail::conv_out_size(in.height, opt.kernel, opt.stride, opt.padding, 1);
  const std::size_t ow = detail::conv_out_size(in.width, opt.kernel, opt.stride, opt.padding, 1);
  if (oh == 0 || ow == 0 || opt.padding >= opt.kernel)
    throw ShapeError("max_pool2d", "invalid pooling window for " + shape_str(x.shape()));
  Tensor out({in.batch, in.channels, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  auto o = out.data();
  auto xv = x.data();
  const std::size_t in_plane = in.height * in.width, out_plane = oh * ow;
  for (std::size_t bc = 0; bc < in.batch * in.channels; ++bc)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t ky = 0; ky < opt.kernel; ++ky) {
          const long iy = static_cast<long>(oy * opt.stride + ky) - static_cast<long>(opt.padding);
          if (iy < 0 || iy >= static_cast<long>(in.height)) continue;
          for (std::size_t kx = 0; kx < opt.kernel; ++kx) {
            const long ix = static_cast<long>(ox * opt.stride + kx) - static_cast<long>(opt.padding);
            if (ix < 0 || ix >= static_cast<long>(in.width)) continue;
            const std::size_t idx = bc * in_plane + static_cast<std::size_t>(iy) * in.width +
                                    static_cast<std::size_t>(ix);
            if (!found || xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
              found = true;
            }
          }
        }
        const std::size_t oi = bc * out_plane + oy * ow + ox;
        o[oi] = best;
        argmax[oi] = best_idx;
      }
  g.attach(out, "max_pool2d", {&x}, [x, out, argmax = std::move(argmax)]() mutable {
    auto go = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < go.size(); ++i) gx[argmax[i]] += go[i];
  });
  return out;
}

// Average over the in-bounds part of each window (padding not counted).
inline Tensor avg_pool2d(Graph& g, const Tensor& x, Pool2dOptions opt = {}) {
  const auto in = detail::nchw("avg_pool2d", x);
  const std::size_t oh = detail::conv_out_size(in.height, opt.kernel, opt.stride, opt.padding, 1);
  const std::size_t ow = detail::conv_out_size(in.width, opt.kernel, opt.stride, opt.padding, 1);
  if (oh == 0 || ow == 0 || opt.padding >= opt.kernel)
    throw ShapeError("avg_pool2d", "invalid pooling window for " + shape_str(x.shape()));
  Tensor out({in.batch, in.channels, oh, ow});

  struct Window {
    std::size_t y0, y1, x0, x1;
    double inv_count;
  };
  std::vector<Window> windows(oh * ow);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const long y0 = static_cast<long>(oy * opt.stride) - static_cast<long>(opt.padding);
      const long x0 = static_cast<long>(ox * opt.stride) - static_cast<long>(opt.padding);
      Window w;
      w.y0 = static_cast<std::size_t>(std::max(0L, y0));
      w.y1 = static_cast<std::size_t>(std::min<long>(static_cast<long>(in.height), y0 + static_cast<long>(opt.kernel)));
      w.x0 = static_cast<std::size_t>(std::max(0L, x0));
      w.x1 = static_cast<std::size_t>(std::min<long>(static_cast<long>(in.width), x0 + static_cast<long>(opt.kernel)));
      w.inv_count = 1.0 / static_cast<double>((w.y1 - w.y0) * (w.x1 - w.x0));
      windows[oy * ow + ox] = w;
    }
  auto o = out.data();
  auto xv = x.data();
  const std::size_t in_plane = in.height * in.width, out_plane = oh * ow;
  for (std::size_t bc = 0; bc < in.batch * in.channels; ++bc)
    for (std::size_t oi = 0; oi < out_plane; ++oi) {
      const auto& w = windows[oi];
      double acc = 0.0;
      for (std::size_t iy = w.y0; iy < w.y1; ++iy)
        for (std::size_t ix = w.x0; ix < w.x1; ++ix) acc += xv[bc * in_plane + iy * in.width + ix];
      o[bc * out_plane + oi] = acc * w.inv_count;
    }
  g.attach(out, "avg_pool2d", {&x}, [x, out, in, windows = std::move(windows), in_plane, out_plane]() mutable {
    auto go = out.grad();
    auto gx = x.grad();
    for (std::size_t bc = 0; bc < in.batch * in.channels; ++bc)
      for (std::size_t oi = 0; oi < out_plane; ++oi) {
        const auto& w = windows[oi];
        const double gr = go[bc * out_plane + oi] * w.inv_count;
        for (std::size_t iy = w.y0; iy < w.y1; ++iy)
          for (std::size_t ix = w.x0; ix < w.x1; ++ix) gx[bc * in_plane + iy * in.width + ix] += gr;
      }
  });
  return out;
}

enum class NormMode {
  kTrain,        // batch statistics, running statistics updated
  kTrainFrozen,  // batch statistics, running statistics untouched
  kEval,         // running statistics
};

struct NormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit NormStats(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// Per-channel standardization followed by a learned affine map.
inline Tensor batch_norm(Graph& g, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         NormStats& stats, NormMode mode) {
  const auto in = detail::nchw("batch_norm", x);
  if (gamma.numel() != in.channels || beta.numel() != in.channels ||
      stats.running_mean.size() != in.channels)
    throw ShapeError("batch_norm", "affine/statistics size does not match channels of " +
                                       shape_str(x.shape()));
  const std::size_t plane = in.height * in.width;
  const std::size_t count = in.batch * plane;
  std::vector<double> mean_c(in.channels), inv_std(in.channels);
  auto xv = x.data();
  if (mode == NormMode::kEval) {
    for (std::size_t c = 0; c < in.channels; ++c) {
      mean_c[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + stats.eps);
    }
  } else {
    for (std::size_t c = 0; c < in.channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < in.batch; ++b) {
        const double* p = &xv[(b * in.channels + c) * plane];
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < in.batch; ++b) {
        const double* p = &xv[(b * in.channels + c) * plane];
        for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean_c[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + stats.eps);
      if (mode == NormMode::kTrain) {
        const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
        stats.running_mean[c] = (1.0 - stats.momentum) * stats.running_mean[c] + stats.momentum * mu;
        stats.running_var[c] = (1.0 - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
      }
    }
  }
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel());
  auto o = out.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t c = 0; c < in.channels; ++c) {
      const std::size_t base = (b * in.channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (xv[base + i] - mean_c[c]) * inv_std[c];
        xhat[base + i] = h;
        o[base + i] = gv[c] * h + bv[c];
      }
    }
  const bool batch_stats = mode != NormMode::kEval;
  g.attach(out, "batch_norm", {&x, &gamma, &beta},
           [x, gamma, beta, out, in, plane, count, batch_stats, inv_std = std::move(inv_std),
            xhat = std::move(xhat)]() mutable {
             auto go = out.grad();
             auto gv = gamma.data();
             std::vector<double> sum_dy(in.channels, 0.0), sum_dy_xhat(in.channels, 0.0);
             for (std::size_t b = 0; b < in.batch; ++b)
               for (std::size_t c = 0; c < in.channels; ++c) {
                 const std::size_t base = (b * in.channels + c) * plane;
                 for (std::size_t i = 0; i < plane; ++i) {
                   sum_dy[c] += go[base + i];
                   sum_dy_xhat[c] += go[base + i] * xhat[base + i];
                 }
               }
             if (gamma.requires_grad()) {
               auto gg = gamma.grad();
               for (std::size_t c = 0; c < in.channels; ++c) gg[c] += sum_dy_xhat[c];
             }
             if (beta.requires_grad()) {
               auto gb = beta.grad();
               for (std::size_t c = 0; c < in.channels; ++c) gb[c] += sum_dy[c];
             }
             if (!x.requires_grad()) return;
             auto gx = x.grad();
             const double n = static_cast<double>(count);
             for (std::size_t b = 0; b < in.batch; ++b)
               for (std::size_t c = 0; c < in.channels; ++c) {
                 const std::size_t base = (b * in.channels + c) * plane;
                 const double k = gv[c] * inv_std[c];
                 if (batch_stats) {
                   const double m1 = sum_dy[c] / n, m2 = sum_dy_xhat[c] / n;
                   for (std::size_t i = 0; i < plane; ++i)
                     gx[base + i] += k * (go[base + i] - m1 - xhat[base + i] * m2);
                 } else {
                   for (std::size_t i = 0; i < plane; ++i) gx[base + i] += k * go[base + i];
                 }
               }
           });
  return out;
}

// [B, C, H, W] -> [B, C]
inline Tensor global_avg_pool(Graph& g, const Tensor& x) {
  const auto in = detail::nchw("global_avg_pool", x);
  const std::size_t plane = in.height * in.width;
  Tensor out({in.batch, in.channels});
  auto o = out.data();
  auto xv = x.data();
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t bc = 0; bc < in.batch * in.channels; ++bc) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += xv[bc * plane + i];
    o[bc] = acc * inv;
  }
  g.attach(out, "global_avg_pool", {&x}, [x, out, plane, inv]() mutable {
    auto go = out.grad();
    auto gx = x.grad();
    for (std::size_t bc = 0; bc < go.size(); ++bc)
      for (std::size_t i = 0; i < plane; ++i) gx[bc * plane + i] += go[bc] * inv;
  });
  return out;
}

// Concatenates NCHW tensors along the channel axis.
inline Tensor concat_channels(Graph& g, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels", "no inputs");
  const auto first = detail::nchw("concat_channels", parts[0]);
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const auto s = detail::nchw("concat_channels", p);
    if (s.batch != first.batch || s.height != first.height || s.width != first.width)
      throw ShapeError("concat_channels", "incompatible parts " + shape_str(parts[0].shape()) +
                                              " and " + shape_str(p.shape()));
    channels += s.channels;
  }
  const std::size_t plane = first.height * first.width;
  Tensor out({first.batch, channels, first.height, first.width});
  auto o = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.dim(1);
    auto pv = p.data();
    for (std::size_t b = 0; b < first.batch; ++b)
      std::copy_n(&pv[b * pc * plane], pc * plane, &o[(b * channels + offset) * plane]);
    offset += pc;
  }
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  g.attach_span(out, "concat_channels", inputs, [parts, out, channels, plane, batch = first.batch]() mutable {
    auto go = out.grad();
    std::size_t offset = 0;
    for (auto& p : parts) {
      const std::size_t pc = p.dim(1);
      if (p.requires_grad()) {
        auto gp = p.grad();
        for (std::size_t b = 0; b < batch; ++b) {
          const double* src = &go[(b * channels + offset) * plane];
          double* dst = &gp[b * pc * plane];
          for (std::size_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
        }
      }
      offset += pc;
    }
  });
  return out;
}

// sum_k weights[row, k] * inputs[k]. Undefined inputs stand for an all-zero
// branch and contribute nothing. At least one input must be defined.
inline Tensor weighted_sum(Graph& g, const std::vector<Tensor>& inputs, const Tensor& weights,
                           std::size_t row) {
  detail::require_rank("weighted_sum", weights, 2);
  const std::size_t k = weights.dim(1);
  if (inputs.size() != k || row >= weights.dim(0))
    throw ShapeError("weighted_sum", std::to_string(inputs.size()) + " inputs for weight table " +
                                         shape_str(weights.shape()) + " row " + std::to_string(row));
  const Tensor* shape_ref = nullptr;
  for (const auto& t : inputs) {
    if (!t.defined()) continue;
    if (shape_ref && shape_ref->shape() != t.shape())
      throw ShapeError("weighted_sum", "branch shapes differ: " + shape_str(shape_ref->shape()) +
                                           " vs " + shape_str(t.shape()));
    if (!shape_ref) shape_ref = &t;
  }
  if (!shape_ref) throw ShapeError("weighted_sum", "all branches are zero; output shape unknown");
  Tensor out(shape_ref->shape());
  auto o = out.data();
  auto wv = weights.data();
  for (std::size_t j = 0; j < k; ++j) {
    if (!inputs[j].defined()) continue;
    const double w = wv[row * k + j];
    auto iv = inputs[j].data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += w * iv[i];
  }
  std::vector<const Tensor*> deps{&weights};
  for (const auto& t : inputs)
    if (t.defined()) deps.push_back(&t);
  g.attach_span(out, "weighted_sum", deps, [inputs, weights, out, row, k]() mutable {
    auto go = out.grad();
    auto wv = weights.data();
    for (std::size_t j = 0; j < k; ++j) {
      auto& in = inputs[j];
      if (!in.defined()) continue;
      if (weights.requires_grad()) {
        auto iv = in.data();
        double acc = 0.0;
        for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * iv[i];
        weights.grad()[row * k + j] += acc;
      }
      if (in.requires_grad()) {
        const double w = wv[row * k + j];
        auto gi = in.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gi[i] += w * go[i];
      }
    }
  });
  return out;
}

}  // namespace dartsplus::ops
