#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hyperconv/autodiff.hpp"

namespace hconv {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::int64_t t = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

/// One bias-corrected Adam update in place. Moments are created on the first
/// call; afterwards their shapes must keep matching the parameters.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, AdamState<T>& state);

/// Adam over a fixed parameter list, reading gradients from the graph.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, AdamConfig config);

  void step();
  void zero_grad();

  const AdamState<T>& state() const { return state_; }
  AdamState<T>& state() { return state_; }

 private:
  std::vector<Var<T>> params_;
  AdamState<T> state_;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace hconv
