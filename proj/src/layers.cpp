#include "ktrans/layers.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ktrans {

template <typename T>
PositionalEncodingTable<T> positional_encoding(std::size_t max_len, std::size_t d_model) {
  if (max_len == 0) throw std::invalid_argument("positional_encoding: max_len must be >= 1");
  if (d_model == 0 || d_model % 2 != 0) {
    throw std::invalid_argument("positional_encoding: d_model must be even, got " +
                                std::to_string(d_model));
  }
  std::vector<T> data(max_len * d_model);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      data[pos * d_model + 2 * i] = static_cast<T>(std::sin(angle));
      data[pos * d_model + 2 * i + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return {Tensor<T>({max_len, d_model}, std::move(data)), max_len, d_model};
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::identity(std::size_t d_model) {
  return {Tensor<T>::full({d_model}, T(1)), Tensor<T>::zeros({d_model}), 1e-5};
}

template <typename T>
Tensor<T> residual_layernorm(const Tensor<T>& h, const Tensor<T>& sub,
                             const LayerNormParams<T>& params) {
  return layer_norm_rows(add(h, sub), params.gain, params.shift, params.epsilon);
}

template <typename T>
AttentionResult<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k,
                                        const Tensor<T>& v, const Tensor<T>* bias,
                                        const AttentionMask* mask) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw DimensionError("scaled_dot_attention: q " + shape_to_string(q.shape()) + ", k " +
                         shape_to_string(k.shape()) + ", v " + shape_to_string(v.shape()));
  }
  const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(q.cols()));
  auto logits = scale(matmul(q, transpose(k)), inv_sqrt_dk);
  if (bias) {
    if (bias->shape() != logits.shape()) {
      throw DimensionError("scaled_dot_attention: bias " + shape_to_string(bias->shape()) +
                           " vs logits " + shape_to_string(logits.shape()));
    }
    logits = add(logits, *bias);
  }
  auto weights = softmax_rows(logits, mask);
  return {matmul(weights, v), weights};
}

template <typename T>
MultiHeadOutput<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& k_in,
                                        const Tensor<T>& v_in, const MultiHeadAttention<T>& mha,
                                        std::span<const Tensor<T>> per_head_bias,
                                        const AttentionMask* mask) {
  if (!per_head_bias.empty() && per_head_bias.size() != mha.heads.size()) {
    throw DimensionError("multi_head_attention: " + std::to_string(per_head_bias.size()) +
                         " bias tensors for " + std::to_string(mha.heads.size()) + " heads");
  }
  MultiHeadOutput<T> result;
  std::vector<Tensor<T>> head_outputs;
  head_outputs.reserve(mha.heads.size());
  for (std::size_t h = 0; h < mha.heads.size(); ++h) {
    const auto& head = mha.heads[h];
    const Tensor<T>* bias = per_head_bias.empty() ? nullptr : &per_head_bias[h];
    auto att = scaled_dot_attention(matmul(q_in, head.w_q), matmul(k_in, head.w_k),
                                    matmul(v_in, head.w_v), bias, mask);
    head_outputs.push_back(att.output);
    result.weights.push_back(att.weights);
  }
  result.output = matmul(concat_cols<T>(head_outputs), mha.w_o);
  return result;
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForward<T>& ffn) {
  auto hidden = relu(add_row_vector(matmul(x, ffn.w1), ffn.b1));
  return add_row_vector(matmul(hidden, ffn.w2), ffn.b2);
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::uint64_t seed, bool training) {
  if (!(rate >= 0.0) || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  std::mt19937_64 rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = unit_uniform(rng) < rate ? T(0) : keep_scale;
  return mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> data(fan_in * fan_out);
  for (auto& w : data) w = static_cast<T>((2.0 * unit_uniform(rng) - 1.0) * limit);
  return Tensor<T>({fan_in, fan_out}, std::move(data), true);
}

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  // Box-Muller on the portable uniform source keeps initial weights identical
  // across standard library implementations.
  std::vector<T> data(shape_numel(shape));
  for (std::size_t i = 0; i < data.size(); i += 2) {
    const double u1 = 1.0 - unit_uniform(rng);
    const double u2 = unit_uniform(rng);
    const double radius = std::sqrt(-2.0 * std::log(u1)) * stddev;
    data[i] = static_cast<T>(radius * std::cos(2.0 * std::numbers::pi * u2));
    if (i + 1 < data.size()) data[i + 1] = static_cast<T>(radius * std::sin(2.0 * std::numbers::pi * u2));
  }
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
MultiHeadAttention<T> make_multi_head_attention(std::size_t d_model, std::size_t heads,
                                                std::mt19937_64& rng) {
  if (heads == 0 || d_model % heads != 0) {
    throw std::invalid_argument("d_model " + std::to_string(d_model) +
                                " is not divisible by head count " + std::to_string(heads));
  }
  const std::size_t d_k = d_model / heads;
  MultiHeadAttention<T> mha;
  for (std::size_t h = 0; h < heads; ++h) {
    AttentionHead<T> head;
    head.w_q = xavier_uniform<T>(d_model, d_k, rng);
    head.w_k = xavier_uniform<T>(d_model, d_k, rng);
    head.w_v = xavier_uniform<T>(d_model, d_k, rng);
    mha.heads.push_back(std::move(head));
  }
  mha.w_o = xavier_uniform<T>(d_model, d_model, rng);
  return mha;
}

template <typename T>
FeedForward<T> make_feed_forward(std::size_t d_model, std::size_t d_ff, std::mt19937_64& rng) {
  if (d_ff == 0) throw std::invalid_argument("feed-forward width must be positive");
  FeedForward<T> ffn;
  ffn.w1 = xavier_uniform<T>(d_model, d_ff, rng);
  ffn.b1 = Tensor<T>::zeros({d_ff}, true);
  ffn.w2 = xavier_uniform<T>(d_ff, d_model, rng);
  ffn.b2 = Tensor<T>::zeros({d_model}, true);
  return ffn;
}

#define KTRANS_INSTANTIATE_LAYERS(T)                                                           \
  template PositionalEncodingTable<T> positional_encoding<T>(std::size_t, std::size_t);       \
  template struct LayerNormParams<T>;                                                          \
  template Tensor<T> residual_layernorm(const Tensor<T>&, const Tensor<T>&,                    \
                                        const LayerNormParams<T>&);                            \
  template AttentionResult<T> scaled_dot_attention(const Tensor<T>&, const Tensor<T>&,         \
                                                   const Tensor<T>&, const Tensor<T>*,         \
                                                   const AttentionMask*);                      \
  template MultiHeadOutput<T> multi_head_attention(                                            \
      const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const MultiHeadAttention<T>&,      \
      std::span<const Tensor<T>>, const AttentionMask*);                                       \
  template Tensor<T> feed_forward(const Tensor<T>&, const FeedForward<T>&);                    \
  template Tensor<T> dropout(const Tensor<T>&, double, std::uint64_t, bool);                   \
  template Tensor<T> xavier_uniform<T>(std::size_t, std::size_t, std::mt19937_64&);            \
  template Tensor<T> normal_init<T>(Shape, double, std::mt19937_64&);                          \
  template MultiHeadAttention<T> make_multi_head_attention<T>(std::size_t, std::size_t,        \
                                                              std::mt19937_64&);               \
  template FeedForward<T> make_feed_forward<T>(std::size_t, std::size_t, std::mt19937_64&);

KTRANS_INSTANTIATE_LAYERS(float)
KTRANS_INSTANTIATE_LAYERS(double)

#undef KTRANS_INSTANTIATE_LAYERS

}  // namespace ktrans
