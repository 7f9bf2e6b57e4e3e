#pragma once

// K-Transformer: an encoder-decoder Transformer whose encoder self-attention
// heads receive an additive, cluster-derived pre-softmax bias.
//
// For every source sentence the position-free token embeddings are clustered
// with K-Means (K_eff = min(clusters_k, length)). Head h of every encoder
// self-attention layer then adds
//
//   bias[i][j] = gain_same[h] * [a(i) == a(j)]
//              + gain_affinity[h] * cos(e_j, c_{h mod K_eff})
//
// where a(.) is the cluster assignment, e_j the raw embedding of key token j
// and c the centroids. Both gains are learnable per-head scalars that start
// at exactly zero, so an untrained K-Transformer computes the same logits as
// the plain Transformer. Clustering output is a constant of the forward pass.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ktrans/cluster.hpp"
#include "ktrans/layers.hpp"
#include "ktrans/tensor.hpp"
#include "ktrans/vocab_ids.hpp"

namespace ktrans {

enum class ClusterMode { off, same_cluster, centroid_affinity, both };

std::string_view to_string(ClusterMode mode);
ClusterMode parse_cluster_mode(std::string_view text);

struct ModelConfig {
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t d_ff = 2048;
  std::size_t layers_enc = 2;
  std::size_t layers_dec = 2;
  double dropout = 0.1;
  std::size_t max_len = 50;
  std::size_t clusters_k = 4;
  ClusterMode cluster_mode = ClusterMode::both;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  std::uint64_t seed = 1;
  std::size_t kmeans_max_iter = 100;
  double kmeans_tol = 1e-6;

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

enum class RunMode { training, eval };

template <typename T>
struct ClusterBiasParams {
  Tensor<T> gain_same;      // [heads]
  Tensor<T> gain_affinity;  // [heads]

  static ClusterBiasParams zeros(std::size_t heads);
};

template <typename T>
struct EncoderLayer {
  MultiHeadAttention<T> self_attention;
  LayerNormParams<T> norm_attention;
  FeedForward<T> ffn;
  LayerNormParams<T> norm_ffn;
  ClusterBiasParams<T> cluster;
};

template <typename T>
struct DecoderLayer {
  MultiHeadAttention<T> self_attention;
  LayerNormParams<T> norm_self;
  MultiHeadAttention<T> cross_attention;
  LayerNormParams<T> norm_cross;
  FeedForward<T> ffn;
  LayerNormParams<T> norm_ffn;
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct EncoderOutput {
  Tensor<T> memory;        // [padded_len, d_model]
  ClusterResult clusters;  // over the valid prefix
  std::size_t valid_len = 0;
};

// Per-call stream of dropout seeds (splitmix64 over a base seed).
class DropoutSeeds {
 public:
  explicit DropoutSeeds(std::uint64_t base) : state_(base) {}
  std::uint64_t next();

 private:
  std::uint64_t state_;
};

// K-Means on the raw embeddings of one sentence with K_eff = min(k, n).
ClusterResult cluster_source(const Tensor<double>& embeddings, std::size_t k,
                             const KMeansOptions& options);

// [padded_len, padded_len] bias for `head`; rows/columns past the clustered
// tokens are zero. Only the gains carry gradient.
template <typename T>
Tensor<T> cluster_bias(const ClusterResult& result, const Tensor<double>& embeddings,
                       std::size_t head, const ClusterBiasParams<T>& params, ClusterMode mode,
                       std::size_t padded_len = 0);

template <typename T>
class KTransformer {
 public:
  explicit KTransformer(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }

  // `ids` may be padded; the first `valid_len` entries are the sentence.
  EncoderOutput<T> encode(std::span<const int> ids, std::size_t valid_len, RunMode mode,
                          DropoutSeeds* seeds = nullptr) const;
  EncoderOutput<T> encode(std::span<const int> ids, RunMode mode = RunMode::eval) const {
    return encode(ids, ids.size(), mode);
  }

  // `target_in` is the <BOS>-prefixed decoder input (possibly padded).
  Tensor<T> decode_forward(std::span<const int> target_in, std::size_t valid_len,
                           const EncoderOutput<T>& encoded, RunMode mode,
                           DropoutSeeds* seeds = nullptr) const;
  Tensor<T> decode_forward(std::span<const int> target_in, const EncoderOutput<T>& encoded,
                           RunMode mode = RunMode::eval) const {
    return decode_forward(target_in, target_in.size(), encoded, mode);
  }

  // Greedy argmax decoding from <BOS>; stops at <EOS> or max_out_len tokens.
  std::vector<int> greedy_translate(std::span<const int> source_ids,
                                    std::size_t max_out_len) const;

  std::vector<NamedParameter<T>> parameters() const;

  Tensor<T> source_embedding;  // [src_vocab, d_model]
  Tensor<T> target_embedding;  // [tgt_vocab, d_model]
  PositionalEncodingTable<T> positions;
  std::vector<EncoderLayer<T>> encoder;
  std::vector<DecoderLayer<T>> decoder;
  Tensor<T> output_weight;  // [d_model, tgt_vocab]
  Tensor<T> output_bias;    // [tgt_vocab]

 private:
  void check_ids(std::span<const int> ids, std::size_t vocab, std::size_t limit,
                 const char* side) const;
  Tensor<T> add_positions(const Tensor<T>& x) const;

  ModelConfig config_;
};

// Mean token cross-entropy over positions whose target is not <PAD>.
template <typename T>
Tensor<T> sequence_loss(const Tensor<T>& logits, std::span<const int> targets);

}  // namespace ktrans
