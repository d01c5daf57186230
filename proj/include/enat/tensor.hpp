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
#include <utility>
#include <vector>

namespace enat {

/// Raised when tensor shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation's preconditions.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when training diverges (non-finite loss or gradient).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

/// Handle to a dense row-major array of doubles with an optional gradient.
///
/// Copies share the underlying storage; operations always produce fresh
/// tensors, so values only change through `mutable_values()` (optimizer
/// steps, initialization).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    validate_shape(shape);
    node_->value.assign(element_count(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    validate_shape(shape);
    if (values.size() != element_count(shape)) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; all zeros when nothing has accumulated yet.
  std::span<const double> grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool all_finite() const {
    for (double v : node_->value)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Deep copy of the values, cut off from any gradient history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  /// Deep copy that keeps the requires_grad flag (used for parameter snapshots).
  Tensor clone() const { return Tensor(shape(), node_->value, node_->requires_grad); }

  const std::shared_ptr<TensorNode>& node() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor: rank-0 shapes are not supported, use {1}");
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(shape));
  }

  std::shared_ptr<TensorNode> node_;
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables tape recording for its lifetime (inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Ordered record of executed differentiable operations.
///
/// Each entry owns the output node and a closure that pushes the output's
/// gradient into the inputs. `backward` replays the entries in reverse
/// order, each exactly once, then clears the tape.
class Tape {
 public:
  using Adjoint = std::function<void(TensorNode& out)>;

  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  void record(std::shared_ptr<TensorNode> out, Adjoint adjoint) {
    entries_.push_back({std::move(out), std::move(adjoint)});
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Number of adjoint closures executed by the most recent `backward`.
  std::size_t last_replay_count() const { return last_replay_count_; }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward: loss must be a scalar tensor");
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward: loss does not depend on any tensor requiring grad");
    }
    loss.node()->grad_buffer()[0] += 1.0;
    last_replay_count_ = 0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->out->grad.empty()) it->adjoint(*it->out);
      ++last_replay_count_;
    }
    entries_.clear();
  }

 private:
  struct Entry {
    std::shared_ptr<TensorNode> out;
    Adjoint adjoint;
  };
  std::vector<Entry> entries_;
  std::size_t last_replay_count_ = 0;
};

/// Accumulates d(loss)/d(t) into every reachable tensor that requires grad.
inline void backward(const Tensor& loss) { Tape::active().backward(loss); }

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

/// Creates the output tensor and, when any input is tracked, records its adjoint.
inline Tensor make_result(Shape shape, std::vector<double> values, bool track,
                          Tape::Adjoint adjoint) {
  Tensor out(std::move(shape), std::move(values), track);
  if (track) Tape::active().record(out.node(), std::move(adjoint));
  return out;
}

}  // namespace detail

}  // namespace enat
