#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hyperconv/tensor.hpp"

namespace hconv {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t seq = 0;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents that require it.
  std::function<void(Node&)> backward;

  Tensor<T>& ensure_grad();
  bool has_grad() const { return !grad.empty() || value.empty(); }
};

/// Handle to a value on the autodiff graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  /// Direct write access for optimizers and loaders; only valid on leaves.
  Tensor<T>& value_mut();
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::int64_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Accumulated gradient, or zeros when nothing has flowed into this node.
  Tensor<T> grad() const;
  void zero_grad();

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Disables graph construction on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

/// Creates the output node of an operation. The backward rule is kept only
/// when grad mode is on and some input requires a gradient. Throws
/// NumericalError if the forward value is not finite.
template <typename T>
Var<T> make_op(std::string op, Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward);

/// Ordered record of the operations reachable from a root, in execution order.
template <typename T>
class Tape {
 public:
  static Tape record(const Var<T>& root);

  const std::vector<Node<T>*>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 and runs backward rules in exact reverse order.
  void backward();

 private:
  Node<T>* root_ = nullptr;
  std::vector<Node<T>*> nodes_;
  std::vector<std::shared_ptr<Node<T>>> keep_alive_;
};

/// Populates gradients of every requires-grad leaf reachable from a scalar loss.
template <typename T>
void backward(const Var<T>& loss);

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Var<float>;
extern template class Var<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace hconv
