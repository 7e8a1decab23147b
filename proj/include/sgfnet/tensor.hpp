#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sgfnet {

// Error hierarchy. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or widths.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside its documented domain (frequency index, label, cutoff...).
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file, unreadable path.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or failed numeric check.
class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches it
  bool requires_grad = false;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <class T>
class Tape;

/// Dense row-major tensor handle.
///
/// Copies share storage, which is what lets the tape track identity; use
/// clone() for an independent copy. Data of a tensor that has been recorded
/// on a live tape must not be mutated until that tape has run backward.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Impl = TensorImpl<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
    check_shape(shape);
    impl_->data.assign(sgfnet::numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
    check_shape(shape);
    if (sgfnet::numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::vector<T>(values)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Direct write access. Only for leaves that are not on a live tape.
  std::span<T> mutable_data() { return impl_->data; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  /// Element access by full multi-index (slow; tests and tools only).
  template <class... I>
  T at(I... idx) const {
    return impl_->data[offset({static_cast<std::size_t>(idx)...})];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient view; zeros when no backward pass has reached this tensor.
  std::vector<T> grad() const {
    if (impl_->grad.empty()) return std::vector<T>(numel(), T(0));
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy, detached from any tape.
  Tensor clone() const { return Tensor(shape(), impl_->data); }

  const std::shared_ptr<Impl>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<Impl> p) {
    Tensor t;
    t.impl_ = std::move(p);
    return t;
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw DimensionError("index rank mismatch for " + to_string(shape()));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= impl_->shape[axis]) throw RangeError("index out of bounds for " + to_string(shape()));
      off = off * impl_->shape[axis] + i;
      ++axis;
    }
    return off;
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + to_string(shape));
    }
  }

  std::shared_ptr<Impl> impl_;
};

/// Test hook: when set to an op name, that op's backward rule receives a
/// scaled upstream gradient, which any gradient check should catch.
struct BackwardFault {
  std::string op;
  double scale = 1.5;
};

inline BackwardFault& backward_fault() {
  static BackwardFault fault;
  return fault;
}

/// Dynamic reverse-mode tape. Ops record onto the tape that is active on the
/// calling thread (see TapeScope); with no active tape they record nothing.
template <class T>
class Tape {
 public:
  using Impl = TensorImpl<T>;

  struct Node {
    std::string op;
    std::shared_ptr<Impl> output;
    std::function<void(const std::vector<T>& out_grad)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::string_view op, std::shared_ptr<Impl> output,
              std::function<void(const std::vector<T>&)> backward) {
    nodes_.push_back(Node{std::string(op), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  /// Seeds d loss / d loss = 1 and replays the tape in reverse. Leaf
  /// gradients accumulate across calls; the tape is cleared afterwards.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw DimensionError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
      clear();
      return;
    }
    auto& seed = loss.impl()->grad_buffer();
    seed[0] += T(1);

    const BackwardFault& fault = backward_fault();
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // not on a path to the loss
      if (!fault.op.empty() && fault.op == it->op) {
        std::vector<T> scaled = it->output->grad;
        for (T& g : scaled) g *= static_cast<T>(fault.scale);
        it->backward(scaled);
      } else {
        it->backward(it->output->grad);
      }
    }
    clear();
  }

 private:
  template <class U>
  friend class TapeScope;
  template <class U>
  friend class NoTapeScope;

  std::vector<Node> nodes_;
  static inline thread_local Tape* active_ = nullptr;
};

/// Makes `tape` the active tape on this thread for the scope's lifetime.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active_) { Tape<T>::active_ = &tape; }
  ~TapeScope() { Tape<T>::active_ = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

/// Suspends recording (inference, finite-difference probes).
template <class T>
class NoTapeScope {
 public:
  NoTapeScope() : prev_(Tape<T>::active_) { Tape<T>::active_ = nullptr; }
  ~NoTapeScope() { Tape<T>::active_ = prev_; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

namespace detail {

template <class T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->defined() && t->requires_grad(); });
}

template <class T>
bool should_record(const std::vector<Tensor<T>>& inputs) {
  if (Tape<T>::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
}

/// Marks `out` as differentiable and records its backward rule.
template <class T, class F>
void record(std::string_view op, Tensor<T>& out, F&& fn) {
  out.set_requires_grad(true);
  Tape<T>::active()->record(op, out.impl(), std::forward<F>(fn));
}

/// Gradient sink for an input, or nullptr if it does not need one.
template <class T>
std::vector<T>* sink(const std::shared_ptr<TensorImpl<T>>& p) {
  return p && p->requires_grad ? &p->grad_buffer() : nullptr;
}

}  // namespace detail

}  // namespace sgfnet
