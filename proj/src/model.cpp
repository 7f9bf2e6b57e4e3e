#include "ktrans/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ktrans {

namespace {

bool uses_same(ClusterMode m) { return m == ClusterMode::same_cluster || m == ClusterMode::both; }
bool uses_affinity(ClusterMode m) {
  return m == ClusterMode::centroid_affinity || m == ClusterMode::both;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return dot / (na * nb);
}

// Constant matrices shared by every head: the same-cluster indicator and one
// key-affinity matrix per centroid.
template <typename T>
struct ClusterFeatures {
  Tensor<T> same;
  std::vector<Tensor<T>> affinity;
};

template <typename T>
ClusterFeatures<T> cluster_features(const ClusterResult& result,
                                    const Tensor<double>& embeddings, std::size_t padded_len,
                                    ClusterMode mode) {
  const std::size_t n = result.assignments.size();
  const std::size_t len = padded_len == 0 ? n : padded_len;
  if (len < n) throw DimensionError("cluster_bias: padded length shorter than sentence");
  ClusterFeatures<T> f;
  if (uses_same(mode)) {
    std::vector<T> same(len * len, T(0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (result.assignments[i] == result.assignments[j]) same[i * len + j] = T(1);
    f.same = Tensor<T>({len, len}, std::move(same));
  }
  if (uses_affinity(mode)) {
    const std::size_t d = embeddings.cols();
    for (std::size_t c = 0; c < result.k(); ++c) {
      const auto centroid = result.centroids.data().subspan(c * d, d);
      std::vector<T> aff(len * len, T(0));
      for (std::size_t j = 0; j < n; ++j) {
        const T cj = static_cast<T>(cosine(embeddings.data().subspan(j * d, d), centroid));
        for (std::size_t i = 0; i < n; ++i) aff[i * len + j] = cj;
      }
      f.affinity.push_back(Tensor<T>({len, len}, std::move(aff)));
    }
  }
  return f;
}

template <typename T>
Tensor<T> head_bias(const ClusterFeatures<T>& f, std::size_t head,
                    const ClusterBiasParams<T>& params, ClusterMode mode, std::size_t len) {
  Tensor<T> bias;
  if (uses_same(mode)) bias = scale_by(f.same, pick(params.gain_same, head));
  if (uses_affinity(mode)) {
    auto term = scale_by(f.affinity[head % f.affinity.size()], pick(params.gain_affinity, head));
    bias = bias.defined() ? add(bias, term) : term;
  }
  return bias.defined() ? bias : Tensor<T>::zeros({len, len});
}

template <typename T>
void append_attention(std::vector<NamedParameter<T>>& out, const std::string& prefix,
                      const MultiHeadAttention<T>& mha) {
  for (std::size_t h = 0; h < mha.heads.size(); ++h) {
    const std::string p = prefix + ".head" + std::to_string(h);
    out.push_back({p + ".w_q", mha.heads[h].w_q});
    out.push_back({p + ".w_k", mha.heads[h].w_k});
    out.push_back({p + ".w_v", mha.heads[h].w_v});
  }
  out.push_back({prefix + ".w_o", mha.w_o});
}

template <typename T>
void append_norm(std::vector<NamedParameter<T>>& out, const std::string& prefix,
                 const LayerNormParams<T>& ln) {
  out.push_back({prefix + ".gain", ln.gain});
  out.push_back({prefix + ".shift", ln.shift});
}

template <typename T>
void append_ffn(std::vector<NamedParameter<T>>& out, const std::string& prefix,
                const FeedForward<T>& ffn) {
  out.push_back({prefix + ".w1", ffn.w1});
  out.push_back({prefix + ".b1", ffn.b1});
  out.push_back({prefix + ".w2", ffn.w2});
  out.push_back({prefix + ".b2", ffn.b2});
}

template <typename T>
LayerNormParams<T> trainable_norm(std::size_t d) {
  auto ln = LayerNormParams<T>::identity(d);
  ln.gain.set_requires_grad(true);
  ln.shift.set_requires_grad(true);
  return ln;
}

}  // namespace

std::string_view to_string(ClusterMode mode) {
  switch (mode) {
    case ClusterMode::off: return "off";
    case ClusterMode::same_cluster: return "same_cluster";
    case ClusterMode::centroid_affinity: return "centroid_affinity";
    case ClusterMode::both: return "both";
  }
  return "off";
}

ClusterMode parse_cluster_mode(std::string_view text) {
  if (text == "off") return ClusterMode::off;
  if (text == "same_cluster") return ClusterMode::same_cluster;
  if (text == "centroid_affinity") return ClusterMode::centroid_affinity;
  if (text == "both") return ClusterMode::both;
  throw std::invalid_argument("unknown cluster mode '" + std::string(text) +
                              "' (expected off|same_cluster|centroid_affinity|both)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (heads == 0 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if (d_model % 2 != 0) fail("d_model must be even for positional encoding");
  if (d_ff == 0) fail("d_ff must be positive");
  if (layers_enc == 0 || layers_dec == 0) fail("layer counts must be positive");
  if (!(dropout >= 0.0) || dropout >= 1.0) fail("dropout must lie in [0, 1)");
  if (max_len == 0) fail("max_len must be positive");
  if (clusters_k == 0) fail("clusters_k must be positive");
  if (src_vocab < static_cast<std::size_t>(kNumSpecialTokens) ||
      tgt_vocab < static_cast<std::size_t>(kNumSpecialTokens)) {
    fail("vocabulary sizes must cover the reserved tokens");
  }
}

std::uint64_t DropoutSeeds::next() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

ClusterResult cluster_source(const Tensor<double>& embeddings, std::size_t k,
                             const KMeansOptions& options) {
  if (embeddings.rows() == 0) throw std::invalid_argument("cluster_source: empty sentence");
  return kmeans_fit(embeddings, std::min(k, embeddings.rows()), options);
}

template <typename T>
ClusterBiasParams<T> ClusterBiasParams<T>::zeros(std::size_t heads) {
  return {Tensor<T>::zeros({heads}, true), Tensor<T>::zeros({heads}, true)};
}

template <typename T>
Tensor<T> cluster_bias(const ClusterResult& result, const Tensor<double>& embeddings,
                       std::size_t head, const ClusterBiasParams<T>& params, ClusterMode mode,
                       std::size_t padded_len) {
  if (head >= params.gain_same.numel()) {
    throw std::out_of_range("cluster_bias: head " + std::to_string(head) + " out of range");
  }
  const std::size_t len = padded_len == 0 ? result.assignments.size() : padded_len;
  return head_bias(cluster_features<T>(result, embeddings, padded_len, mode), head, params, mode,
                   len);
}

template <typename T>
KTransformer<T>::KTransformer(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const std::size_t d = config_.d_model;
  source_embedding = normal_init<T>({config_.src_vocab, d}, 1.0, rng);
  target_embedding = normal_init<T>({config_.tgt_vocab, d}, 1.0, rng);
  // One extra row for the <BOS> shift on the decoder side.
  positions = positional_encoding<T>(config_.max_len + 1, d);
  for (std::size_t l = 0; l < config_.layers_enc; ++l) {
    EncoderLayer<T> layer;
    layer.self_attention = make_multi_head_attention<T>(d, config_.heads, rng);
    layer.norm_attention = trainable_norm<T>(d);
    layer.ffn = make_feed_forward<T>(d, config_.d_ff, rng);
    layer.norm_ffn = trainable_norm<T>(d);
    layer.cluster = ClusterBiasParams<T>::zeros(config_.heads);
    encoder.push_back(std::move(layer));
  }
  for (std::size_t l = 0; l < config_.layers_dec; ++l) {
    DecoderLayer<T> layer;
    layer.self_attention = make_multi_head_attention<T>(d, config_.heads, rng);
    layer.norm_self = trainable_norm<T>(d);
    layer.cross_attention = make_multi_head_attention<T>(d, config_.heads, rng);
    layer.norm_cross = trainable_norm<T>(d);
    layer.ffn = make_feed_forward<T>(d, config_.d_ff, rng);
    layer.norm_ffn = trainable_norm<T>(d);
    decoder.push_back(std::move(layer));
  }
  output_weight = xavier_uniform<T>(d, config_.tgt_vocab, rng);
  output_bias = Tensor<T>::zeros({config_.tgt_vocab}, true);
}

template <typename T>
void KTransformer<T>::check_ids(std::span<const int> ids, std::size_t vocab, std::size_t limit,
                                const char* side) const {
  if (ids.empty()) throw std::invalid_argument(std::string(side) + ": empty sequence");
  if (ids.size() > limit) {
    throw std::length_error(std::string(side) + ": length " + std::to_string(ids.size()) +
                            " exceeds limit " + std::to_string(limit));
  }
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range(std::string(side) + ": token id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
  }
}

template <typename T>
Tensor<T> KTransformer<T>::add_positions(const Tensor<T>& x) const {
  return add(x, take_rows(positions.table, x.rows()));
}

template <typename T>
EncoderOutput<T> KTransformer<T>::encode(std::span<const int> ids, std::size_t valid_len,
                                         RunMode mode, DropoutSeeds* seeds) const {
  check_ids(ids, config_.src_vocab, config_.max_len, "encode");
  if (valid_len == 0 || valid_len > ids.size()) {
    throw std::invalid_argument("encode: valid length outside [1, padded length]");
  }
  DropoutSeeds local(config_.seed);
  if (!seeds) seeds = &local;
  const bool training = mode == RunMode::training;
  const std::size_t len = ids.size();

  EncoderOutput<T> out;
  out.valid_len = valid_len;
  auto embedded = gather_rows(source_embedding, ids);

  ClusterFeatures<T> features;
  const bool clustered = config_.cluster_mode != ClusterMode::off;
  if (clustered) {
    const std::size_t d = config_.d_model;
    Tensor<double> raw({valid_len, d},
                       std::vector<double>(embedded.data().begin(),
                                           embedded.data().begin() +
                                               static_cast<std::ptrdiff_t>(valid_len * d)));
    out.clusters = cluster_source(
        raw, config_.clusters_k, {config_.seed, config_.kmeans_max_iter, config_.kmeans_tol});
    features = cluster_features<T>(out.clusters, raw, len, config_.cluster_mode);
  }

  auto h = dropout(add_positions(embedded), config_.dropout, seeds->next(), training);
  const auto pad_mask = AttentionMask::key_padding(len, len, valid_len);
  const AttentionMask* mask = valid_len < len ? &pad_mask : nullptr;
  for (const auto& layer : encoder) {
    std::vector<Tensor<T>> biases;
    if (clustered) {
      for (std::size_t head = 0; head < config_.heads; ++head)
        biases.push_back(head_bias(features, head, layer.cluster, config_.cluster_mode, len));
    }
    auto attended = multi_head_attention<T>(h, h, h, layer.self_attention, biases, mask).output;
    h = residual_layernorm(h, dropout(attended, config_.dropout, seeds->next(), training),
                           layer.norm_attention);
    auto ff = feed_forward(h, layer.ffn);
    h = residual_layernorm(h, dropout(ff, config_.dropout, seeds->next(), training),
                           layer.norm_ffn);
  }
  out.memory = h;
  return out;
}

template <typename T>
Tensor<T> KTransformer<T>::decode_forward(std::span<const int> target_in, std::size_t valid_len,
                                          const EncoderOutput<T>& encoded, RunMode mode,
                                          DropoutSeeds* seeds) const {
  check_ids(target_in, config_.tgt_vocab, config_.max_len + 1, "decode");
  if (valid_len == 0 || valid_len > target_in.size()) {
    throw std::invalid_argument("decode: valid length outside [1, padded length]");
  }
  DropoutSeeds local(config_.seed ^ 0xD1B54A32D192ED03ULL);
  if (!seeds) seeds = &local;
  const bool training = mode == RunMode::training;
  const std::size_t len = target_in.size();
  const std::size_t src_len = encoded.memory.rows();

  auto self_mask = AttentionMask::causal(len);
  if (valid_len < len) self_mask = self_mask.merged(AttentionMask::key_padding(len, len, valid_len));
  const auto cross_mask = AttentionMask::key_padding(len, src_len, encoded.valid_len);
  const AttentionMask* cross = encoded.valid_len < src_len ? &cross_mask : nullptr;

  auto h = dropout(add_positions(gather_rows(target_embedding, target_in)), config_.dropout,
                   seeds->next(), training);
  for (const auto& layer : decoder) {
    auto self = multi_head_attention<T>(h, h, h, layer.self_attention, {}, &self_mask).output;
    h = residual_layernorm(h, dropout(self, config_.dropout, seeds->next(), training),
                           layer.norm_self);
    auto crossed = multi_head_attention<T>(h, encoded.memory, encoded.memory,
                                           layer.cross_attention, {}, cross)
                       .output;
    h = residual_layernorm(h, dropout(crossed, config_.dropout, seeds->next(), training),
                           layer.norm_cross);
    auto ff = feed_forward(h, layer.ffn);
    h = residual_layernorm(h, dropout(ff, config_.dropout, seeds->next(), training),
                           layer.norm_ffn);
  }
  return add_row_vector(matmul(h, output_weight), output_bias);
}

template <typename T>
std::vector<int> KTransformer<T>::greedy_translate(std::span<const int> source_ids,
                                                   std::size_t max_out_len) const {
  std::vector<int> output;
  if (source_ids.empty()) return output;
  max_out_len = std::min(max_out_len, config_.max_len);
  const auto encoded = encode(source_ids, source_ids.size(), RunMode::eval);
  std::vector<int> prefix{kBosId};
  while (output.size() < max_out_len) {
    const auto logits = decode_forward(prefix, prefix.size(), encoded, RunMode::eval);
    const std::size_t v = logits.cols();
    const auto last = logits.data().subspan((logits.rows() - 1) * v, v);
    const auto best = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    if (best == kEosId) break;
    output.push_back(best);
    prefix.push_back(best);
  }
  return output;
}

template <typename T>
std::vector<NamedParameter<T>> KTransformer<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  out.push_back({"source_embedding", source_embedding});
  out.push_back({"target_embedding", target_embedding});
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    const std::string p = "encoder." + std::to_string(l);
    append_attention(out, p + ".self", encoder[l].self_attention);
    append_norm(out, p + ".norm_attention", encoder[l].norm_attention);
    append_ffn(out, p + ".ffn", encoder[l].ffn);
    append_norm(out, p + ".norm_ffn", encoder[l].norm_ffn);
    out.push_back({p + ".cluster.gain_same", encoder[l].cluster.gain_same});
    out.push_back({p + ".cluster.gain_affinity", encoder[l].cluster.gain_affinity});
  }
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    const std::string p = "decoder." + std::to_string(l);
    append_attention(out, p + ".self", decoder[l].self_attention);
    append_norm(out, p + ".norm_self", decoder[l].norm_self);
    append_attention(out, p + ".cross", decoder[l].cross_attention);
    append_norm(out, p + ".norm_cross", decoder[l].norm_cross);
    append_ffn(out, p + ".ffn", decoder[l].ffn);
    append_norm(out, p + ".norm_ffn", decoder[l].norm_ffn);
  }
  out.push_back({"output.weight", output_weight});
  out.push_back({"output.bias", output_bias});
  return out;
}

template <typename T>
Tensor<T> sequence_loss(const Tensor<T>& logits, std::span<const int> targets) {
  const auto counted = std::count_if(targets.begin(), targets.end(),
                                     [](int id) { return id != kPadId; });
  if (counted == 0) throw std::invalid_argument("sequence_loss: target is entirely padding");
  return scale(cross_entropy_sum(logits, targets, kPadId), T(1) / static_cast<T>(counted));
}

template struct ClusterBiasParams<float>;
template struct ClusterBiasParams<double>;
template class KTransformer<float>;
template class KTransformer<double>;
template Tensor<float> cluster_bias(const ClusterResult&, const Tensor<double>&, std::size_t,
                                    const ClusterBiasParams<float>&, ClusterMode, std::size_t);
template Tensor<double> cluster_bias(const ClusterResult&, const Tensor<double>&, std::size_t,
                                     const ClusterBiasParams<double>&, ClusterMode, std::size_t);
template Tensor<float> sequence_loss(const Tensor<float>&, std::span<const int>);
template Tensor<double> sequence_loss(const Tensor<double>&, std::span<const int>);

}  // namespace ktrans
