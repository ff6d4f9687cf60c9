#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "gfm/error.hpp"

namespace gfm {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

// Accumulator type for reductions: float storage reduces in double.
template <class T>
using Acc = std::conditional_t<(sizeof(T) < sizeof(double)), double, T>;

template <class T>
class Tensor;

namespace detail {

template <class T>
struct Node;

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <class T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

// One recorded operation. `backward` receives the node's output (values and
// gradient) and accumulates into the inputs it captured.
template <class T>
using BackwardFn = std::function<void(const TensorImpl<T>&)>;

template <class T>
struct Node {
  const char* op = "";
  std::vector<ImplPtr<T>> inputs;
  BackwardFn<T> backward;
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor. Copies share storage; use `clone()` for a deep copy.
template <class T = float>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;
  explicit Tensor(detail::ImplPtr<T> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    check_shape(shape);
    auto impl = std::make_shared<Impl>();
    impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    check_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw DimensionError("shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    }
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }
  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const& { return impl_->data; }
  // A span over a temporary would dangle in range-for loops.
  std::span<const T> data() const&& = delete;
  // Direct write access; only for leaves (initialization, optimizer updates).
  std::span<T> mutable_data() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.assign(impl_->data.size(), T(0)); }
  void clear_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }
  const char* op_name() const { return impl_->grad_fn ? impl_->grad_fn->op : "leaf"; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  // Copy of the values with no graph history.
  Tensor detach() const {
    auto impl = std::make_shared<Impl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
  }
  Tensor clone() const {
    Tensor t = detach();
    t.set_requires_grad(requires_grad());
    return t;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>::from(shape(), std::move(out), requires_grad());
  }

  const detail::ImplPtr<T>& impl() const { return impl_; }

 private:
  static void check_shape(const Shape& s) {
    for (auto d : s)
      if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(s));
  }

  detail::ImplPtr<T> impl_;
};

namespace detail {

// Builds a result tensor and records a graph node when any input needs a
// gradient and recording is enabled.
template <class T>
Tensor<T> record(Shape shape, std::vector<T> data, const char* op,
                 std::vector<ImplPtr<T>> inputs, BackwardFn<T> backward) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs = false;
  if (grad_enabled())
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  if (needs) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node<T>>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    impl->grad_fn = std::move(node);
  }
  return Tensor<T>(std::move(impl));
}

}  // namespace detail

// Topologically ordered list of recorded nodes reachable from a root.
template <class T>
struct AutodiffTape {
  struct Entry {
    detail::ImplPtr<T> tensor;
    const char* op;
    std::vector<std::size_t> inputs;  // positions within `entries`
  };
  std::vector<Entry> entries;  // inputs precede their consumers
};

template <class T>
AutodiffTape<T> build_tape(const Tensor<T>& root) {
  using detail::ImplPtr;
  AutodiffTape<T> tape;
  std::unordered_map<const detail::TensorImpl<T>*, std::size_t> index;
  std::unordered_map<const detail::TensorImpl<T>*, int> state;  // 1 = open, 2 = closed
  struct Frame {
    ImplPtr<T> t;
    std::size_t next;
  };
  std::vector<Frame> stack{{root.impl(), 0}};
  state[root.impl().get()] = 1;
  while (!stack.empty()) {
    Frame& f = stack.back();
    const auto* node = f.t->grad_fn.get();
    if (node && f.next < node->inputs.size()) {
      ImplPtr<T> child = node->inputs[f.next++];
      if (!child->requires_grad) continue;
      int& st = state[child.get()];
      if (st == 1) throw InternalError("cycle detected in autodiff tape");
      if (st == 0) {
        st = 1;
        stack.push_back({child, 0});
      }
      continue;
    }
    typename AutodiffTape<T>::Entry e{f.t, node ? node->op : "leaf", {}};
    if (node)
      for (const auto& in : node->inputs)
        if (in->requires_grad) e.inputs.push_back(index.at(in.get()));
    index[f.t.get()] = tape.entries.size();
    state[f.t.get()] = 2;
    tape.entries.push_back(std::move(e));
    stack.pop_back();
  }
  return tape;
}

// Reverse-mode sweep. Every node on the tape is visited exactly once, in
// reverse topological order; gradients accumulate into leaves.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw UsageError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  AutodiffTape<T> tape = build_tape(loss);
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += T(1);
  for (auto it = tape.entries.rbegin(); it != tape.entries.rend(); ++it) {
    auto& impl = *it->tensor;
    if (!impl.grad_fn || impl.grad.empty()) continue;
    impl.grad_fn->backward(impl);
  }
  // Interior gradients are no longer needed.
  for (auto& e : tape.entries)
    if (e.tensor->grad_fn) e.tensor->grad.clear();
}

template <class T>
bool all_finite(std::span<const T> v) {
  for (T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace gfm
