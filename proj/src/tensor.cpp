#include "tsr/tensor.hpp"

#include <numeric>
#include <sstream>
#include <unordered_set>

namespace tsr {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

DimensionError::DimensionError(std::string op, std::string axis, const std::string& detail)
    : std::invalid_argument(op + ": dimension mismatch on axis '" + axis + "': " + detail),
      op_(std::move(op)),
      axis_(std::move(axis)) {}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() noexcept { return g_grad_enabled; }

template <std::floating_point T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto extent : shape) {
    if (extent <= 0) throw DimensionError("Tensor", "extent", "extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("Tensor", "numel",
                         shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

template <std::floating_point T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <std::floating_point T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <std::floating_point T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <std::floating_point T>
Tensor<T> Tensor<T>::from_node(NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <std::floating_point T>
void Tensor<T>::check_defined() const {
  if (!node_) throw std::logic_error("operation on an undefined Tensor");
}

template <std::floating_point T>
const Shape& Tensor<T>::shape() const {
  check_defined();
  return node_->shape;
}

template <std::floating_point T>
std::int64_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("dim", std::to_string(axis), "tensor has rank " + std::to_string(s.size()));
  }
  return s[axis];
}

template <std::floating_point T>
std::int64_t Tensor<T>::numel() const {
  check_defined();
  return static_cast<std::int64_t>(node_->data.size());
}

template <std::floating_point T>
std::span<const T> Tensor<T>::data() const {
  check_defined();
  return node_->data;
}

template <std::floating_point T>
std::span<T> Tensor<T>::mutable_data() {
  check_defined();
  return node_->data;
}

template <std::floating_point T>
T Tensor<T>::item() const {
  check_defined();
  if (node_->data.size() != 1) {
    throw DimensionError("item", "numel", "expected a single element, got " + shape_str(node_->shape));
  }
  return node_->data[0];
}

template <std::floating_point T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <std::floating_point T>
void Tensor<T>::set_requires_grad(bool value) {
  check_defined();
  if (!node_->is_leaf) throw std::logic_error("requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = value;
}

template <std::floating_point T>
bool Tensor<T>::has_grad() const {
  return node_ && !node_->grad.empty();
}

template <std::floating_point T>
std::span<const T> Tensor<T>::grad() const {
  check_defined();
  if (node_->grad.empty()) throw std::logic_error("tensor has no gradient; call backward() first");
  return node_->grad;
}

template <std::floating_point T>
std::span<T> Tensor<T>::mutable_grad() {
  check_defined();
  node_->ensure_grad();
  return node_->grad;
}

template <std::floating_point T>
void Tensor<T>::zero_grad() {
  check_defined();
  node_->grad.clear();
}

template <std::floating_point T>
Tensor<T> Tensor<T>::detach() const {
  check_defined();
  return Tensor(node_->shape, node_->data, false);
}

template <std::floating_point T>
void Tensor<T>::backward() const {
  check_defined();
  if (node_->data.size() != 1) {
    throw std::invalid_argument("backward() requires a scalar loss, got shape " + shape_str(node_->shape));
  }
  if (!node_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (parents first).
  using Node = detail::Node<T>;
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(node_, 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (parent->requires_grad && visited.insert(parent.get()).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& node = **it;
    if (node.is_leaf) continue;
    if (node.backward && !node.grad.empty()) {
      for (auto& parent : node.parents) {
        if (parent->requires_grad) parent->ensure_grad();
      }
      node.backward(node);
    }
    node.grad.clear();
    node.grad.shrink_to_fit();
    node.backward = nullptr;
    node.parents.clear();
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace tsr
