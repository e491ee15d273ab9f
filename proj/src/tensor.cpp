#include "utixvec/tensor.hpp"

#include <atomic>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "utixvec/errors.hpp"

namespace utixvec {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<bool> g_finite_checks{false};

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks() { return g_finite_checks.load(); }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_node(std::shared_ptr<Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

namespace {

template <typename N>
const N& checked(const std::shared_ptr<N>& node) {
  if (!node) throw UsageError("operation on an undefined tensor");
  return *node;
}

}  // namespace

template <typename T>
const Shape& Tensor<T>::shape() const {
  return checked(node_).shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_string(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return checked(node_).data.size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return checked(node_).data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  checked(node_);
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  const auto& n = checked(node_);
  if (n.data.size() != 1) {
    throw UsageError("item() on tensor of shape " + shape_string(n.shape));
  }
  return n.data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return checked(node_).requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  checked(node_);
  node_->requires_grad = value;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  const auto& n = checked(node_);
  return !n.grad.empty() && n.grad.size() == n.data.size();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return checked(node_).grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  checked(node_);
  return node_->ensure_grad();
}

template <typename T>
void Tensor<T>::zero_grad() {
  checked(node_);
  node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  const auto& n = checked(node_);
  return Tensor(n.shape, n.data, false);
}

template <typename T>
void backward(const Tensor<T>& loss) {
  using Node = detail::TensorNode<T>;
  if (loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " +
                     shape_string(loss.shape()));
  }
  Node* root = loss.node().get();
  if (root->consumed) throw UsageError("backward: graph already consumed");
  if (!root->requires_grad) return;

  // Iterative post-order DFS yields a topological order (producers first).
  // Owning pointers: releasing a node's parents below must not free nodes
  // that are still queued.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (parent->consumed) throw UsageError("backward: graph already consumed");
      if (parent->requires_grad && visited.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = it->get();
    if (!node->backward) continue;  // leaf
    if (!node->grad.empty()) node->backward(*node);
    node->backward = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->consumed = true;
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace utixvec
