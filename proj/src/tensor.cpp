#include "maxsr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace maxsr {

Shape::Shape(std::initializer_list<int64_t> dims)
    : Shape(std::span<const int64_t>(dims.begin(), dims.size())) {}

Shape::Shape(std::span<const int64_t> dims) {
  if (dims.size() > kMaxRank) {
    throw ShapeError("rank " + std::to_string(dims.size()) + " exceeds 4");
  }
  for (int64_t d : dims) {
    if (d < 0) throw ShapeError("negative extent in shape");
  }
  std::copy(dims.begin(), dims.end(), dims_.begin());
  rank_ = static_cast<int>(dims.size());
}

int64_t Shape::numel() const {
  int64_t n = 1;
  for (int i = 0; i < rank_; ++i) n *= dims_[static_cast<size_t>(i)];
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (int i = 0; i < rank_; ++i) {
    if (i) os << ',';
    os << dims_[static_cast<size_t>(i)];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

template <typename T>
std::span<T> TensorImpl<T>::grad_buffer() {
  if (!has_grad) {
    grad.assign(data.size(), T(0));
    has_grad = true;
  }
  return grad;
}

}  // namespace detail

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values) {
  if (shape.numel() != static_cast<int64_t>(values.size())) {
    throw ShapeError("shape " + shape.str() + " holds " + std::to_string(shape.numel()) +
                     " values, got " + std::to_string(values.size()));
  }
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = shape;
  impl_->data = std::move(values);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(const Shape& shape) {
  return BasicTensor(shape, std::vector<T>(static_cast<size_t>(shape.numel()), T(0)));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(const Shape& shape, T value) {
  return BasicTensor(shape, std::vector<T>(static_cast<size_t>(shape.numel()), value));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_impl(detail::ImplPtr<T> impl) {
  BasicTensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
detail::TensorImpl<T>& BasicTensor<T>::impl() const {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return *impl_;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
  return impl().data[0];
}

template <typename T>
T BasicTensor<T>::at(std::span<const int64_t> index) const {
  const Shape& s = shape();
  if (static_cast<int>(index.size()) != s.rank()) throw ShapeError("index rank mismatch");
  int64_t flat = 0;
  for (int i = 0; i < s.rank(); ++i) {
    if (index[static_cast<size_t>(i)] < 0 || index[static_cast<size_t>(i)] >= s[i]) {
      throw ShapeError("index out of range for shape " + s.str());
    }
    flat = flat * s[i] + index[static_cast<size_t>(i)];
  }
  return impl().data[static_cast<size_t>(flat)];
}

template <typename T>
T BasicTensor<T>::at4(int64_t i0, int64_t i1, int64_t i2, int64_t i3) const {
  const std::array<int64_t, 4> idx{i0, i1, i2, i3};
  return at(idx);
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  if (!is_leaf()) throw GraphError("requires_grad can only be set on leaves");
  impl().requires_grad = on;
  return *this;
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!impl().has_grad) throw GraphError("tensor has no gradient");
  return impl().grad;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  return impl().grad_buffer();
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  auto& im = impl();
  if (im.has_grad) std::fill(im.grad.begin(), im.grad.end(), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(shape(), impl().data);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshape(const Shape& new_shape) const {
  if (new_shape.numel() != numel()) {
    throw ShapeError("cannot reshape " + shape().str() + " to " + new_shape.str());
  }
  auto src = impl_;
  return make_result<T>(new_shape, impl().data, "reshape", {*this},
                        [src](std::span<const T> g) {
                          if (!src->requires_grad) return;
                          auto gx = src->grad_buffer();
                          for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                        });
}

template <typename T>
const std::string& BasicTensor<T>::op_name() const {
  static const std::string kLeaf = "leaf";
  return impl().node ? impl().node->op : kLeaf;
}

template <typename T>
void check_finite(std::span<const T> values, const std::string& op) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + op);
  }
}

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> values, std::string op,
                           const std::vector<BasicTensor<T>>& inputs,
                           std::function<void(std::span<const T>)> backward_fn) {
  check_finite<T>(values, op);
  BasicTensor<T> out(shape, std::move(values));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<detail::Node<T>>();
  node->op = std::move(op);
  node->inputs.reserve(inputs.size());
  for (const auto& in : inputs) node->inputs.push_back(in.impl_ptr());
  node->backward = std::move(backward_fn);
  out.impl_ptr()->node = std::move(node);
  out.impl_ptr()->requires_grad = true;
  return out;
}

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> values, std::string op,
                           std::initializer_list<BasicTensor<T>> inputs,
                           std::function<void(std::span<const T>)> backward_fn) {
  return make_result<T>(shape, std::move(values), std::move(op),
                        std::vector<BasicTensor<T>>(inputs), std::move(backward_fn));
}

template <typename T>
GradTape<T>::GradTape(const BasicTensor<T>& root) : root_(root.impl_ptr()) {
  if (!root_) throw GraphError("tape root is undefined");
  // Iterative post-order DFS; a node is emitted after all of its producers.
  std::unordered_set<const detail::TensorImpl<T>*> visited;
  std::vector<std::pair<detail::ImplPtr<T>, size_t>> stack;
  stack.emplace_back(root_, 0);
  visited.insert(root_.get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto& node = impl->node;
    if (node && next < node->inputs.size()) {
      auto child = node->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) {
        stack.emplace_back(std::move(child), 0);
      }
      continue;
    }
    entries_.push_back(impl);
    stack.pop_back();
  }
}

template <typename T>
void GradTape<T>::run() {
  for (auto& e : entries_) {
    if (e->node) {
      e->grad.assign(e->data.size(), T(0));
      e->has_grad = true;
    }
  }
  auto g = root_->grad_buffer();
  for (auto& v : g) v += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& impl = *it;
    if (impl->node) impl->node->backward(impl->grad);
  }
  // Interior gradients are scratch; only leaves keep theirs.
  for (auto& e : entries_) {
    if (e->node) {
      e->grad.clear();
      e->grad.shrink_to_fit();
      e->has_grad = false;
    }
  }
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined()) throw GraphError("backward on undefined tensor");
  if (loss.numel() != 1) throw GraphError("backward requires a scalar loss, got " + loss.shape().str());
  if (!loss.requires_grad()) throw GraphError("loss is detached from every leaf");
  GradTape<T> tape(loss);
  tape.run();
}

template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& x) {
  std::vector<To> v(x.data().begin(), x.data().end());
  return BasicTensor<To>(x.shape(), std::move(v));
}

#define MAXSR_INSTANTIATE(T)                                                                   \
  template struct detail::TensorImpl<T>;                                                       \
  template class BasicTensor<T>;                                                               \
  template class GradTape<T>;                                                                  \
  template void backward<T>(const BasicTensor<T>&);                                            \
  template void check_finite<T>(std::span<const T>, const std::string&);                       \
  template BasicTensor<T> make_result<T>(Shape, std::vector<T>, std::string,                   \
                                         std::initializer_list<BasicTensor<T>>,                \
                                         std::function<void(std::span<const T>)>);             \
  template BasicTensor<T> make_result<T>(Shape, std::vector<T>, std::string,                   \
                                         const std::vector<BasicTensor<T>>&,                   \
                                         std::function<void(std::span<const T>)>);

MAXSR_INSTANTIATE(float)
MAXSR_INSTANTIATE(double)
#undef MAXSR_INSTANTIATE

template BasicTensor<double> cast<double, float>(const BasicTensor<float>&);
template BasicTensor<float> cast<float, double>(const BasicTensor<double>&);
template BasicTensor<float> cast<float, float>(const BasicTensor<float>&);
template BasicTensor<double> cast<double, double>(const BasicTensor<double>&);

}  // namespace maxsr
