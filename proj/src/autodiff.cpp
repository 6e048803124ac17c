#include "hyperconv/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>
#include <unordered_set>

namespace hconv {

namespace {
std::atomic<std::uint64_t> g_seq{0};
thread_local bool t_grad_enabled = true;
}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

template <typename T>
Tensor<T>& Node<T>::ensure_grad() {
  if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
  return grad;
}

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->seq = g_seq.fetch_add(1);
  node_->op = "leaf";
}

template <typename T>
Tensor<T>& Var<T>::value_mut() {
  if (!node_->is_leaf) throw std::logic_error("value_mut() on a non-leaf node");
  return node_->value;
}

template <typename T>
Tensor<T> Var<T>::grad() const {
  if (node_->grad.shape() == node_->value.shape()) return node_->grad;
  return Tensor<T>(node_->value.shape());
}

template <typename T>
void Var<T>::zero_grad() {
  if (node_->grad.shape() == node_->value.shape()) node_->grad.fill(T{0});
}

template <typename T>
Var<T> make_op(std::string op, Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
  if (!value.all_finite()) throw NumericalError(op + " produced non-finite values");
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = std::move(op);
  node->is_leaf = false;
  node->seq = g_seq.fetch_add(1);
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) { return v.requires_grad(); });
  if (t_grad_enabled && any && backward) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

template <typename T>
Tape<T> Tape<T>::record(const Var<T>& root) {
  Tape tape;
  tape.root_ = root.node();
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{root.node()};
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (!n->requires_grad) continue;
    tape.nodes_.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  // Sequence numbers are assigned at creation, so ascending order is the
  // order in which the operations executed.
  std::sort(tape.nodes_.begin(), tape.nodes_.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq < b->seq; });
  tape.keep_alive_.push_back(root.node_ptr());
  return tape;
}

template <typename T>
void Tape<T>::backward() {
  if (root_ == nullptr) return;
  root_->ensure_grad().fill(T{1});
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf || !n->backward) continue;
    if (n->grad.shape() != n->value.shape()) continue;  // nothing flowed here
    n->backward(*n);
    // Intermediate gradients are not needed once propagated.
    n->grad = Tensor<T>();
  }
}

template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward on an undefined value");
  if (loss.value().size() != 1) throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw std::logic_error("backward on a loss that is detached from every parameter");
  Tape<T>::record(loss).backward();
}

template struct Node<float>;
template struct Node<double>;
template class Var<float>;
template class Var<double>;
template class Tape<float>;
template class Tape<double>;
template Var<float> make_op(std::string, Tensor<float>, std::vector<Var<float>>, std::function<void(Node<float>&)>);
template Var<double> make_op(std::string, Tensor<double>, std::vector<Var<double>>, std::function<void(Node<double>&)>);
template void backward(const Var<float>&);
template void backward(const Var<double>&);

}  // namespace hconv
