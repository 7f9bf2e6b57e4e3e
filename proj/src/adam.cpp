#include "ktrans/adam.hpp"

#include <cmath>
#include <string>

namespace ktrans {

template <typename T>
AdamState<T> AdamState<T>::for_parameters(const std::vector<Tensor<T>>& params,
                                          double learning_rate) {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
  AdamState s;
  s.learning_rate = learning_rate;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), T(0));
    s.v.emplace_back(p.numel(), T(0));
  }
  return s;
}

template <typename T>
std::vector<std::vector<T>> collect_gradients(const std::vector<Tensor<T>>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    if (p.has_grad()) {
      out.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      out.emplace_back();
    }
  }
  return out;
}

template <typename T>
double clip_global_norm(std::vector<std::vector<T>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads)
      for (T& x : g) x = static_cast<T>(static_cast<double>(x) * scale);
  }
  return norm;
}

template <typename T>
void adam_step(const std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads,
               AdamState<T>& state) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
      throw DimensionError("adam_step: moment buffer " + std::to_string(i) +
                           " does not match its parameter");
    }
    if (!grads[i].empty() && grads[i].size() != params[i].numel()) {
      throw DimensionError("adam_step: gradient " + std::to_string(i) + " has " +
                           std::to_string(grads[i].size()) + " values for a parameter of shape " +
                           shape_to_string(params[i].shape()));
    }
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      if (!std::isfinite(static_cast<double>(grads[i][j]))) {
        throw NonFiniteError("adam_step: non-finite gradient in parameter " + std::to_string(i) +
                             " at element " + std::to_string(j) + "; step rejected");
      }
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].empty()) continue;
    auto theta = Tensor<T>(params[i]).mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = static_cast<double>(grads[i][j]);
      const double mj = state.beta1 * static_cast<double>(m[j]) + (1.0 - state.beta1) * g;
      const double vj = state.beta2 * static_cast<double>(v[j]) + (1.0 - state.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = state.learning_rate * (mj / c1) / (std::sqrt(vj / c2) + state.epsilon);
      theta[j] = static_cast<T>(static_cast<double>(theta[j]) - update);
    }
  }
}

#define KTRANS_INSTANTIATE(T)                                                              \
  template struct AdamState<T>;                                                            \
  template std::vector<std::vector<T>> collect_gradients(const std::vector<Tensor<T>>&);  \
  template double clip_global_norm(std::vector<std::vector<T>>&, double);                 \
  template void adam_step(const std::vector<Tensor<T>>&, const std::vector<std::vector<T>>&, \
                          AdamState<T>&);

KTRANS_INSTANTIATE(float)
KTRANS_INSTANTIATE(double)

}  // namespace ktrans
