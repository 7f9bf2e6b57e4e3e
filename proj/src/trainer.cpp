#include "ktrans/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "ktrans/metrics.hpp"

namespace ktrans {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  DropoutSeeds s(a ^ (b * 0x9E3779B97F4A7C15ULL));
  return s.next();
}

template <typename T>
std::vector<Tensor<T>> parameter_handles(const KTransformer<T>& model) {
  std::vector<Tensor<T>> out;
  for (auto& p : model.parameters()) out.push_back(p.tensor);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning rate must be > 0");
  }
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  if (!(clip_norm >= 0.0)) throw std::invalid_argument("clip norm must be >= 0");
}

std::string format_log_row(const TrainLogRow& row) {
  char buf[128];
  std::string bleu;
  if (row.val_bleu) {
    char b[32];
    std::snprintf(b, sizeof b, "%.6f", *row.val_bleu);
    bleu = b;
  }
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%s,%lld", row.step, row.loss, bleu.c_str(),
                static_cast<long long>(row.wall_ms));
  return buf;
}

template <typename T>
Tensor<T> batch_loss(const KTransformer<T>& model, const Batch& batch, RunMode mode,
                     DropoutSeeds* seeds) {
  std::optional<Tensor<T>> total;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto enc = model.encode(batch.source[i], batch.source_len[i], mode, seeds);
    const auto logits = model.decode_forward(batch.target_in[i], batch.target_len[i], enc, mode, seeds);
    auto ce = cross_entropy_sum(logits, std::span<const int>(batch.target_out[i]), kPadId);
    total = total ? add(*total, ce) : ce;
    tokens += batch.target_len[i];
  }
  if (!total || tokens == 0) throw std::invalid_argument("batch_loss: empty batch");
  return scale(*total, static_cast<T>(1.0 / static_cast<double>(tokens)));
}

template <typename T>
std::optional<double> validation_bleu(const KTransformer<T>& model, const ParallelCorpus& corpus,
                                      const Vocabulary& source_vocab,
                                      const Vocabulary& target_vocab, std::size_t max_pairs) {
  std::vector<TranslationPair> pairs;
  const auto max_len = model.config().max_len;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (max_pairs && pairs.size() >= max_pairs) break;
    if (!within_length(corpus.source[i], corpus.target[i], max_len)) continue;
    const auto src = encode(corpus.source[i], source_vocab).ids;
    const auto out = model.greedy_translate(src, max_len);
    pairs.push_back({decode(out, target_vocab), corpus.target[i]});
  }
  if (pairs.empty()) return std::nullopt;
  BleuOptions opt;
  opt.smooth = true;
  return corpus_bleu(pairs, opt).score;
}

template <typename T>
TrainResult train(KTransformer<T>& model, const TrainData& data, const TrainConfig& config,
                  const std::function<void(const TrainLogRow&)>& on_step) {
  config.validate();
  if (!data.train || !data.source_vocab || !data.target_vocab) {
    throw std::invalid_argument("train: corpus and vocabularies are required");
  }
  const auto& cfg = model.config();
  const auto params = parameter_handles(model);
  auto adam = AdamState<T>::for_parameters(params, config.learning_rate);

  const bool write = !config.checkpoint_dir.empty();
  std::ofstream log_file;
  if (write) {
    std::filesystem::create_directories(config.checkpoint_dir);
    const auto log_path = config.checkpoint_dir / "train_log.csv";
    const bool fresh = !std::filesystem::exists(log_path) || std::filesystem::file_size(log_path) == 0;
    log_file.open(log_path, std::ios::app);
    if (!log_file) throw DataError("cannot open " + log_path.string());
    if (fresh) log_file << kTrainLogHeader << '\n' << std::flush;
  }
  auto save = [&](const char* name) {
    if (write) save_checkpoint(config.checkpoint_dir / name, model, &adam, data.extras);
  };

  TrainResult result;
  save("final.ckpt");

  const auto start = std::chrono::steady_clock::now();
  std::vector<Batch> batches;
  std::size_t cursor = 0, epoch = 0;
  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    if (cursor == batches.size()) {
      batches = make_batches(*data.train, *data.source_vocab, *data.target_vocab, cfg.max_len,
                             config.batch_size, mix(config.seed, epoch++));
      cursor = 0;
    }
    const Batch& batch = batches[cursor++];

    for (auto p : params) p.zero_grad();
    TrainLogRow row;
    row.step = step;
    try {
      GradientTape<T> tape;
      DropoutSeeds seeds(mix(config.seed ^ 0x5bd1e995ULL, step));
      const auto loss = batch_loss(model, batch, RunMode::training, &seeds);
      row.loss = static_cast<double>(loss.item());
      if (!std::isfinite(row.loss)) throw NonFiniteError("loss is " + std::to_string(row.loss));
      tape.backward(loss);
      auto grads = collect_gradients(params);
      for (const auto& g : grads)
        for (T x : g)
          if (!std::isfinite(static_cast<double>(x))) throw NonFiniteError("non-finite gradient");
      clip_global_norm(grads, config.clip_norm);
      adam.learning_rate = config.learning_rate;
      if (config.warmup_steps > 0 && step < config.warmup_steps) {
        adam.learning_rate *= static_cast<double>(step) / static_cast<double>(config.warmup_steps);
      }
      adam_step(params, grads, adam);
    } catch (const NonFiniteError& e) {
      result.status = TrainStatus::diverged;
      result.message = "diverged at step " + std::to_string(step) + ": " + e.what();
      for (auto p : params) p.zero_grad();
      save("final.ckpt");
      return result;
    }
    for (auto p : params) p.zero_grad();
    result.steps = step;

    const bool last = step == config.max_steps;
    if (data.validation && ((config.val_interval && step % config.val_interval == 0) || last)) {
      row.val_bleu = validation_bleu(model, *data.validation, *data.source_vocab,
                                     *data.target_vocab, config.val_max_pairs);
      if (row.val_bleu && (!result.best_val_bleu || *row.val_bleu > *result.best_val_bleu)) {
        result.best_val_bleu = row.val_bleu;
        save("best.ckpt");
      }
    }
    row.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - start)
                      .count();
    if (write) log_file << format_log_row(row) << '\n' << std::flush;
    if (on_step) on_step(row);
    result.log.push_back(row);
  }
  save("final.ckpt");
  return result;
}

#define KTRANS_INSTANTIATE(T)                                                                     \
  template Tensor<T> batch_loss(const KTransformer<T>&, const Batch&, RunMode, DropoutSeeds*);   \
  template std::optional<double> validation_bleu(const KTransformer<T>&, const ParallelCorpus&,   \
                                                 const Vocabulary&, const Vocabulary&,            \
                                                 std::size_t);                                    \
  template TrainResult train(KTransformer<T>&, const TrainData&, const TrainConfig&,             \
                             const std::function<void(const TrainLogRow&)>&);

KTRANS_INSTANTIATE(float)
KTRANS_INSTANTIATE(double)

}  // namespace ktrans
