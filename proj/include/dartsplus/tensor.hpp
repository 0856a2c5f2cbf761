#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dartsplus {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : std::invalid_argument(op + ": " + detail), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct TensorStorage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  int node_id = -1;  // -1 for leaves
};

}  // namespace detail

// Shared handle to a value buffer plus its gradient buffer. Copies alias the
// same storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorStorage>()) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor", "zero-sized dimension in " + shape_str(shape));
    const auto n = shape_numel(shape);
    impl_->shape = std::move(shape);
    impl_->value.assign(n, 0.0);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : Tensor(std::move(shape), requires_grad) {
    if (values.size() != impl_->value.size())
      throw ShapeError("tensor", "value count " + std::to_string(values.size()) +
                                     " does not match shape " + shape_str(impl_->shape));
    impl_->value = std::move(values);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->value.size(); }

  std::span<double> data() { return impl_->value; }
  std::span<const double> data() const { return impl_->value; }
  // Gradient accumulation is bookkeeping on a shared handle, so it stays
  // writable through const references held by backward closures. The buffer
  // is allocated (zeroed) on first access.
  std::span<double> grad() const {
    if (impl_->grad.size() != impl_->value.size()) impl_->grad.assign(impl_->value.size(), 0.0);
    return impl_->grad;
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item", "tensor is not scalar: " + shape_str(shape()));
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  int node_id() const { return impl_->node_id; }
  bool is_leaf() const { return impl_->node_id < 0; }

  void zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }
  bool has_grad() const { return !impl_->grad.empty(); }

  Tensor clone() const {
    Tensor t(shape(), impl_->value, impl_->requires_grad);
    t.impl_->grad = impl_->grad;
    return t;
  }

  bool all_finite() const {
    for (double v : impl_->value)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Graph;
  std::shared_ptr<detail::TensorStorage> impl_;
};

// Append-only tape of operation records. Record i produces the tensor with
// node_id i; backward replays closures in decreasing node_id order.
class Graph {
 public:
  struct Record {
    std::string op;
    std::vector<int> inputs;  // node ids of non-leaf inputs
    std::function<void()> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // With recording disabled, ops compute values only.
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  std::size_t size() const { return records_.size(); }
  const Record& record(std::size_t i) const { return records_.at(i); }

  // Registers `out` as produced by `op` from `inputs`. Returns false when no
  // record is needed (recording off or no input requires grad).
  bool attach(Tensor& out, const std::string& op, std::initializer_list<const Tensor*> inputs,
              std::function<void()> backward) {
    return attach_span(out, op, std::vector<const Tensor*>(inputs), std::move(backward));
  }

  bool attach_span(Tensor& out, const std::string& op, const std::vector<const Tensor*>& inputs,
                   std::function<void()> backward) {
    if (!recording_) return false;
    bool any = false;
    for (const Tensor* t : inputs)
      if (t && t->defined() && t->requires_grad()) any = true;
    if (!any) return false;
    Record rec;
    rec.op = op;
    for (const Tensor* t : inputs)
      if (t && t->defined() && !t->is_leaf()) rec.inputs.push_back(t->node_id());
    rec.backward = std::move(backward);
    out.impl_->requires_grad = true;
    out.impl_->node_id = static_cast<int>(records_.size());
    records_.push_back(std::move(rec));
    return true;
  }

  // Propagates d(loss)/d(.) into every grad buffer reachable from `loss`.
  // Leaf grads accumulate; zero them beforehand.
  void backward(Tensor& loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward", "loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.all_finite()) throw NonFiniteError("backward: loss is not finite");
    if (loss.is_leaf()) {
      loss.grad()[0] += 1.0;
      return;
    }
    const auto top = static_cast<std::size_t>(loss.node_id());
    if (top >= records_.size())
      throw std::logic_error("backward: loss does not belong to this graph");
    loss.grad()[0] = 1.0;
    for (std::size_t i = top + 1; i-- > 0;) records_[i].backward();
  }

  void clear() { records_.clear(); }

 private:
  std::vector<Record> records_;
  bool recording_ = true;
};

}  // namespace dartsplus
