#pragma once

// Teacher-forced training with Adam, global-norm clipping, linear warmup,
// periodic greedy-decoding validation and best/final checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ktrans/adam.hpp"
#include "ktrans/checkpoint.hpp"
#include "ktrans/corpus.hpp"
#include "ktrans/model.hpp"

namespace ktrans {

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t warmup_steps = 0;
  std::size_t max_steps = 1000;
  std::size_t batch_size = 16;
  std::size_t val_interval = 100;  // 0: validate only after the last step
  std::size_t val_max_pairs = 0;   // 0: the whole validation set
  std::uint64_t seed = 1;          // batch order and dropout masks
  double clip_norm = 1.0;          // 0 disables clipping
  std::filesystem::path checkpoint_dir;  // empty: nothing written

  void validate() const;
};

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> val_bleu;
  std::int64_t wall_ms = 0;
};

enum class TrainStatus { completed, diverged };

struct TrainResult {
  TrainStatus status = TrainStatus::completed;
  std::size_t steps = 0;
  std::vector<TrainLogRow> log;
  std::optional<double> best_val_bleu;
  std::string message;  // divergence diagnostic
};

struct TrainData {
  const ParallelCorpus* train = nullptr;
  const ParallelCorpus* validation = nullptr;  // optional
  const Vocabulary* source_vocab = nullptr;
  const Vocabulary* target_vocab = nullptr;
  CheckpointExtras extras;  // copied into every checkpoint written
};

// Sum of token cross-entropies over the batch divided by its non-pad target
// token count.
template <typename T>
Tensor<T> batch_loss(const KTransformer<T>& model, const Batch& batch, RunMode mode,
                     DropoutSeeds* seeds = nullptr);

// Smoothed corpus BLEU of greedy translations against the target side, over
// pairs that pass the length filter.
template <typename T>
std::optional<double> validation_bleu(const KTransformer<T>& model, const ParallelCorpus& corpus,
                                      const Vocabulary& source_vocab,
                                      const Vocabulary& target_vocab, std::size_t max_pairs = 0);

// Writes <dir>/final.ckpt (starting with the initial weights), <dir>/best.ckpt
// on each validation improvement and appends to <dir>/train_log.csv. A
// non-finite loss or gradient stops training before the offending update,
// leaving final.ckpt at the last good weights.
template <typename T>
TrainResult train(KTransformer<T>& model, const TrainData& data, const TrainConfig& config,
                  const std::function<void(const TrainLogRow&)>& on_step = {});

std::string format_log_row(const TrainLogRow& row);
inline constexpr const char* kTrainLogHeader = "step,loss,val_bleu,wall_ms";

}  // namespace ktrans
