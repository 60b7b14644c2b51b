#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace equitempo {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename Scalar>
class Tensor;

namespace detail {

// One node of the computation graph. Values are written once by the op that
// creates the node and are immutable afterwards (parameters being the
// exception: the optimizer updates leaf values between steps).
template <typename Scalar>
struct Node {
  Shape shape;
  ArrayX<Scalar> values;
  ArrayX<Scalar> grad;  // empty until backward touches this node
  bool requires_grad = false;
  std::string name;  // non-empty for registered parameters
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents. Null for leaves.
  std::function<void(Node&)> backprop;

  Index numel() const { return values.size(); }

  void ensure_grad() {
    if (grad.size() != values.size()) grad = ArrayX<Scalar>::Zero(values.size());
  }

  void accumulate_grad(const ArrayX<Scalar>& g) {
    // First contribution moves or copies straight in; only fan-out nodes pay
    // for the zero-fill-and-add path.
    if (grad.size() != values.size()) {
      grad = g;
    } else {
      grad += g;
    }
  }

  void accumulate_grad(ArrayX<Scalar>&& g) {
    if (grad.size() != values.size()) {
      grad = std::move(g);
    } else {
      grad += g;
    }
  }
};

}  // namespace detail

// Value-semantic handle to a graph node. Copying a Tensor copies the handle,
// not the buffer.
template <typename Scalar>
class Tensor {
 public:
  using Node = detail::Node<Scalar>;

  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return filled(shape, Scalar(0), requires_grad);
  }

  static Tensor filled(const Shape& shape, Scalar value, bool requires_grad = false) {
    Tensor t = make(shape, requires_grad);
    t.node_->values.setConstant(value);
    return t;
  }

  static Tensor from_values(const Shape& shape, ArrayX<Scalar> values,
                            bool requires_grad = false) {
    if (values.size() != shape_numel(shape)) {
      throw TensorError("tensor: data length " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = shape;
    t.node_->values = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_list(const Shape& shape, std::initializer_list<Scalar> data,
                          bool requires_grad = false) {
    ArrayX<Scalar> v(static_cast<Index>(data.size()));
    Index i = 0;
    for (Scalar x : data) v[i++] = x;
    return from_values(shape, std::move(v), requires_grad);
  }

  static Tensor scalar(Scalar value, bool requires_grad = false) {
    return from_list({1}, {value}, requires_grad);
  }

  // Uninitialized node for op outputs.
  static Tensor make(const Shape& shape, bool requires_grad) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = shape;
    t.node_->values.resize(shape_numel(shape));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t rank() const { return node_->shape.size(); }
  Index numel() const { return node_->values.size(); }

  ArrayX<Scalar>& values() { return node_->values; }
  const ArrayX<Scalar>& values() const { return node_->values; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_->grad.size() == node_->values.size(); }
  const ArrayX<Scalar>& grad() const {
    if (!has_grad()) {
      throw TensorError("tensor '" + node_->name + "': gradient not populated");
    }
    return node_->grad;
  }

  void zero_grad() {
    if (node_->grad.size() > 0) node_->grad.setZero();
  }
  void drop_grad() { node_->grad.resize(0); }

  const std::string& name() const { return node_->name; }
  Tensor& set_name(std::string n) {
    node_->name = std::move(n);
    return *this;
  }

  Scalar item() const {
    if (numel() != 1) {
      throw TensorError("item(): tensor has shape " + shape_str(shape()) +
                        ", expected a single element");
    }
    return node_->values[0];
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  std::shared_ptr<Node> node() const { return node_; }

  // Wires up an op output: parents seen by the traversal plus the backward
  // closure. requires_grad is already set by make(). When no gradient can
  // flow (inference), nothing is recorded, so intermediate activations are
  // freed as soon as their handles go out of scope.
  void attach(std::vector<Tensor> parents, std::function<void(Node&)> backprop) {
    if (!node_->requires_grad) return;
    node_->parents.reserve(parents.size());
    for (auto& p : parents) node_->parents.push_back(p.node_);
    node_->backprop = std::move(backprop);
  }

 private:
  std::shared_ptr<Node> node_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable node with requires_grad; repeated calls without zeroing add up.
// Traversal is topological and visits each node exactly once.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  using Node = detail::Node<Scalar>;
  if (loss.numel() != 1) {
    throw TensorError("backward: loss must be a scalar, got shape " +
                      shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw TensorError("backward: loss does not require gradients");
  }

  // Iterative post-order DFS.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      Node* child = node->parents[next_child++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are rewritten by each sweep; only leaves accumulate
  // across backward calls.
  for (Node* node : topo) {
    if (node->backprop && node->grad.size() > 0) node->grad.setZero();
  }

  loss.node()->accumulate_grad(ArrayX<Scalar>::Ones(1));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && node->grad.size() > 0) node->backprop(*node);
  }
}

template <typename Scalar>
void zero_grads(std::vector<Tensor<Scalar>>& tensors) {
  for (auto& t : tensors) t.zero_grad();
}

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& t) {
  return t.values().isFinite().all();
}

}  // namespace equitempo
