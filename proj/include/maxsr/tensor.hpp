#pragma once

// Dense rank-<=4 tensors with reverse-mode differentiation.
//
// Layout is (batch, channel, height, width) row-major. A tensor is a cheap
// handle onto shared storage; copies alias the same data and gradient.
// Operations record a graph node on their output whenever grad mode is on
// and any input requires a gradient; backward() walks that graph in reverse
// topological order and accumulates into every input that requires one.

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace maxsr {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Shape {
 public:
  static constexpr int kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<int64_t> dims);
  explicit Shape(std::span<const int64_t> dims);

  int rank() const { return rank_; }
  int64_t operator[](int axis) const { return dims_[static_cast<size_t>(axis)]; }
  int64_t numel() const;
  std::span<const int64_t> dims() const { return {dims_.data(), static_cast<size_t>(rank_)}; }
  std::string str() const;

  bool operator==(const Shape& other) const = default;

 private:
  std::array<int64_t, kMaxRank> dims_{};
  int rank_ = 0;
};

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
struct Node {
  std::string op;
  std::vector<ImplPtr<T>> inputs;
  // Receives d(loss)/d(output) and accumulates into the inputs' grads.
  std::function<void(std::span<const T>)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  // Allocates the accumulator on first use.
  std::span<T> grad_buffer();
};

}  // namespace detail

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> values);

  static BasicTensor zeros(const Shape& shape);
  static BasicTensor full(const Shape& shape, T value);
  static BasicTensor scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  int rank() const { return shape().rank(); }
  int64_t dim(int axis) const { return shape()[axis]; }
  int64_t numel() const { return static_cast<int64_t>(impl().data.size()); }

  std::span<const T> data() const { return impl().data; }
  // Mutable access is meant for leaves (parameters, inputs) only; mutating a
  // tensor that is part of a recorded graph invalidates its backward.
  std::span<T> mutable_data() { return impl().data; }
  T item() const;
  T at(std::span<const int64_t> index) const;
  T at(int64_t i0, int64_t i1, int64_t i2, int64_t i3) const { return at4(i0, i1, i2, i3); }

  bool requires_grad() const { return impl().requires_grad; }
  BasicTensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl().node == nullptr; }
  bool has_grad() const { return impl().has_grad; }
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  // Copy of the values with no graph history.
  BasicTensor detach() const;
  // Same values reinterpreted under a new shape; differentiable.
  BasicTensor reshape(const Shape& shape) const;

  const std::string& op_name() const;

  const detail::ImplPtr<T>& impl_ptr() const { return impl_; }
  static BasicTensor from_impl(detail::ImplPtr<T> impl);

 private:
  detail::TensorImpl<T>& impl() const;
  T at4(int64_t i0, int64_t i1, int64_t i2, int64_t i3) const;

  detail::ImplPtr<T> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Grad mode is thread-local; the guard disables graph recording in scope.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Nodes reachable from a root, ordered so every producer precedes its
// consumers. backward() runs this tape in reverse.
template <typename T>
class GradTape {
 public:
  explicit GradTape(const BasicTensor<T>& root);

  std::span<const detail::ImplPtr<T>> entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  void run();

 private:
  detail::ImplPtr<T> root_;
  std::vector<detail::ImplPtr<T>> entries_;
};

template <typename T>
void backward(const BasicTensor<T>& loss);

// Builds an op result: validates finiteness, and records a graph node when
// grad mode is on and any input requires a gradient.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> values, std::string op,
                           std::initializer_list<BasicTensor<T>> inputs,
                           std::function<void(std::span<const T>)> backward_fn);

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> values, std::string op,
                           const std::vector<BasicTensor<T>>& inputs,
                           std::function<void(std::span<const T>)> backward_fn);

// Throws NumericError naming `op` if any value is NaN or infinite.
template <typename T>
void check_finite(std::span<const T> values, const std::string& op);

template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& x);

}  // namespace maxsr
