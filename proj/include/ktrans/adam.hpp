#pragma once

// Adam with bias correction, plus global-norm gradient clipping.

#include <cstdint>
#include <vector>

#include "ktrans/tensor.hpp"

namespace ktrans {

template <typename T>
struct AdamState {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;  // one buffer per parameter, zero-initialised
  std::vector<std::vector<T>> v;

  static AdamState for_parameters(const std::vector<Tensor<T>>& params, double learning_rate);
};

// Copies of the accumulated gradients; an empty vector marks a parameter the
// loss never reached.
template <typename T>
std::vector<std::vector<T>> collect_gradients(const std::vector<Tensor<T>>& params);

// Scales every gradient by min(1, max_norm / ||g||) over the concatenation of
// all of them. Returns the norm before clipping.
template <typename T>
double clip_global_norm(std::vector<std::vector<T>>& grads, double max_norm);

// One update. Parameters with an empty gradient are left untouched along with
// their moments. Throws NonFiniteError, without modifying anything, when a
// gradient holds NaN or Inf.
template <typename T>
void adam_step(const std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads,
               AdamState<T>& state);

}  // namespace ktrans
