#pragma once

// Transformer building blocks: sinusoidal positions, post-norm residual
// blocks, scaled dot-product and multi-head attention, the position-wise
// feed-forward network and inverted dropout.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ktrans/tensor.hpp"

namespace ktrans {

template <typename T>
struct PositionalEncodingTable {
  Tensor<T> table;  // [max_len, d_model]
  std::size_t max_len = 0;
  std::size_t d_model = 0;
};

// Throws std::invalid_argument for odd d_model or max_len == 0.
template <typename T>
PositionalEncodingTable<T> positional_encoding(std::size_t max_len, std::size_t d_model);

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;   // [d_model]
  Tensor<T> shift;  // [d_model]
  double epsilon = 1e-5;

  static LayerNormParams identity(std::size_t d_model);
};

// layernorm(h + sub), population variance over the feature axis.
template <typename T>
Tensor<T> residual_layernorm(const Tensor<T>& h, const Tensor<T>& sub,
                             const LayerNormParams<T>& params);

template <typename T>
struct AttentionResult {
  Tensor<T> output;   // [n_q, d_k]
  Tensor<T> weights;  // [n_q, n_k]
};

// softmax(q k^T / sqrt(d_k) + bias) v with blocked positions set to -inf.
// A zero bias and an absent bias give bit-identical results.
template <typename T>
AttentionResult<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k,
                                        const Tensor<T>& v, const Tensor<T>* bias = nullptr,
                                        const AttentionMask* mask = nullptr);

template <typename T>
struct AttentionHead {
  Tensor<T> w_q;  // [d_model, d_k]
  Tensor<T> w_k;
  Tensor<T> w_v;
};

template <typename T>
struct MultiHeadAttention {
  std::vector<AttentionHead<T>> heads;
  Tensor<T> w_o;  // [d_model, d_model]

  std::size_t d_model() const { return w_o.rows(); }
  std::size_t d_k() const { return heads.front().w_q.cols(); }
};

template <typename T>
struct FeedForward {
  Tensor<T> w1;  // [d_model, d_ff]
  Tensor<T> b1;  // [d_ff]
  Tensor<T> w2;  // [d_ff, d_model]
  Tensor<T> b2;  // [d_model]
};

template <typename T>
struct MultiHeadOutput {
  Tensor<T> output;                 // [n_q, d_model]
  std::vector<Tensor<T>> weights;  // per head, [n_q, n_k]
};

// `per_head_bias`, when non-empty, must hold exactly one [n_q, n_k] tensor per head.
template <typename T>
MultiHeadOutput<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& k_in,
                                        const Tensor<T>& v_in, const MultiHeadAttention<T>& mha,
                                        std::span<const Tensor<T>> per_head_bias = {},
                                        const AttentionMask* mask = nullptr);

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForward<T>& ffn);

// Inverted dropout; identity when !training or rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::uint64_t seed, bool training);

// Parameter initialisers (Xavier-uniform for projections).
template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);
template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, std::mt19937_64& rng);

template <typename T>
MultiHeadAttention<T> make_multi_head_attention(std::size_t d_model, std::size_t heads,
                                                std::mt19937_64& rng);
template <typename T>
FeedForward<T> make_feed_forward(std::size_t d_model, std::size_t d_ff, std::mt19937_64& rng);

// Uniform double in [0, 1) from the top 53 bits; portable across standard libraries.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace ktrans
