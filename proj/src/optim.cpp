#include "hyperconv/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace hconv {

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, AdamState<T>& st) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
  if (st.m.empty() && st.t == 0) {
    for (auto* p : params) {
      st.m.emplace_back(p->shape());
      st.v.emplace_back(p->shape());
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adam_step: state does not match the parameter list");
  for (std::size_t k = 0; k < params.size(); ++k) {
    check_same_shape(params[k]->shape(), grads[k].shape(), "adam_step");
    check_same_shape(params[k]->shape(), st.m[k].shape(), "adam_step state");
  }
  st.t += 1;
  const auto& c = st.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    const auto& g = grads[k];
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      p[i] = static_cast<T>(p[i] - c.lr * mhat / (std::sqrt(vhat) + c.epsilon));
    }
  }
}

template <typename T>
Adam<T>::Adam(std::vector<Var<T>> params, AdamConfig config) : params_(std::move(params)) {
  if (config.lr <= 0.0) throw std::invalid_argument("Adam: learning rate must be positive");
  state_.config = config;
}

template <typename T>
void Adam<T>::step() {
  std::vector<Tensor<T>*> ps;
  std::vector<Tensor<T>> gs;
  ps.reserve(params_.size());
  gs.reserve(params_.size());
  for (auto& p : params_) {
    ps.push_back(&p.value_mut());
    gs.push_back(p.grad());
  }
  adam_step<T>(ps, gs, state_);
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template void adam_step(std::span<Tensor<float>* const>, std::span<const Tensor<float>>, AdamState<float>&);
template void adam_step(std::span<Tensor<double>* const>, std::span<const Tensor<double>>, AdamState<double>&);
template class Adam<float>;
template class Adam<double>;

}  // namespace hconv
