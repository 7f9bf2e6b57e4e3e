#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "ktrans/checkpoint.hpp"
#include "ktrans/cli.hpp"

namespace ktrans::cli {

namespace {

namespace fs = std::filesystem;

std::vector<std::vector<std::string>> read_tokenized(const fs::path& path) {
  std::vector<std::vector<std::string>> out;
  for (const auto& line : read_lines(path)) out.push_back(split_whitespace(line));
  return out;
}

std::vector<std::string> join_all(const std::vector<std::vector<std::string>>& sentences) {
  std::vector<std::string> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(join_tokens(s));
  return out;
}

std::map<std::string, std::string> read_key_values(const fs::path& path) {
  std::map<std::string, std::string> out;
  for (const auto& line : read_lines(path)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

std::string fixed(double v, int digits = 6) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::size_t count_kept(const ParallelCorpus& c, std::size_t max_len) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < c.size(); ++i) n += within_length(c.source[i], c.target[i], max_len);
  return n;
}

template <typename T>
TrainResult run_training(const RunConfig& config, const PreparedData& data,
                         const CheckpointExtras& extras, std::ostream* progress) {
  KTransformer<T> model(config.model);
  TrainData td;
  td.train = &data.train;
  td.validation = data.validation ? &*data.validation : nullptr;
  td.source_vocab = &data.source_vocab;
  td.target_vocab = &data.target_vocab;
  td.extras = extras;
  auto cfg = config.train;
  cfg.checkpoint_dir = config.out_dir;
  return train(model, td, cfg, [&](const TrainLogRow& row) {
    if (!progress) return;
    if (row.val_bleu || row.step % 100 == 0 || row.step == cfg.max_steps) {
      *progress << "step " << row.step << " loss " << fixed(row.loss, 4);
      if (row.val_bleu) *progress << " val_bleu " << fixed(*row.val_bleu * 100.0, 2);
      *progress << '\n' << std::flush;
    }
  });
}

template <typename T>
std::size_t run_translate(const TranslateOptions& options) {
  auto ck = load_checkpoint<T>(options.checkpoint);
  const auto source_vocab = Vocabulary::from_tokens(ck.extras.source_vocab);
  const auto target_vocab = Vocabulary::from_tokens(ck.extras.target_vocab);
  const auto& model = ck.model;
  if (source_vocab.size() != model.config().src_vocab ||
      target_vocab.size() != model.config().tgt_vocab) {
    throw CheckpointError(options.checkpoint.string() + ": embedded vocabularies do not match the model");
  }
  auto profile = LanguageProfile::space_tokenized;
  if (const auto it = ck.extras.meta.find("source_profile"); it != ck.extras.meta.end()) {
    profile = parse_profile(it->second);
  }
  std::vector<std::string> out;
  for (const auto& line : read_lines(options.input)) {
    auto tokens = preprocess(line, profile);
    if (tokens.size() > model.config().max_len) tokens.resize(model.config().max_len);
    if (tokens.empty()) {
      out.emplace_back();
      continue;
    }
    const auto ids = encode(tokens, source_vocab).ids;
    out.push_back(join_tokens(decode(model.greedy_translate(ids, options.max_out_len), target_vocab)));
  }
  write_lines(options.output, out);
  return out.size();
}

}  // namespace

PreprocessStats cmd_preprocess(const PreprocessOptions& o) {
  auto corpus = load_parallel_corpus(o.src, o.tgt, o.profile_src, o.profile_tgt);
  if (corpus.size() == 0) throw DataError("empty corpus: " + o.src.string() + " has no lines");
  PreprocessStats stats;
  stats.pairs_total = corpus.size();
  stats.pairs_kept = count_kept(corpus, o.max_len);
  if (stats.pairs_kept == 0) throw DataError("empty corpus after the length-" + std::to_string(o.max_len) + " filter");

  ParallelCorpus kept;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (!within_length(corpus.source[i], corpus.target[i], o.max_len)) continue;
    kept.source.push_back(corpus.source[i]);
    kept.target.push_back(corpus.target[i]);
  }
  const auto sv = Vocabulary::build(kept.source, o.max_vocab, o.min_freq);
  const auto tv = Vocabulary::build(kept.target, o.max_vocab, o.min_freq);
  stats.src_vocab = sv.size();
  stats.tgt_vocab = tv.size();

  fs::create_directories(o.out_dir);
  write_lines(o.out_dir / "train.src.tok", join_all(corpus.source));
  write_lines(o.out_dir / "train.tgt.tok", join_all(corpus.target));
  sv.save(o.out_dir / "vocab.src.txt");
  tv.save(o.out_dir / "vocab.tgt.txt");
  if (o.valid_src.has_value() != o.valid_tgt.has_value()) {
    throw UsageError("--valid-src and --valid-tgt must be given together");
  }
  if (o.valid_src) {
    auto valid = load_parallel_corpus(*o.valid_src, *o.valid_tgt, o.profile_src, o.profile_tgt);
    stats.valid_total = valid.size();
    stats.valid_kept = count_kept(valid, o.max_len);
    write_lines(o.out_dir / "valid.src.tok", join_all(valid.source));
    write_lines(o.out_dir / "valid.tgt.tok", join_all(valid.target));
  }
  write_lines(o.out_dir / "stats.txt",
              {"pairs_total=" + std::to_string(stats.pairs_total),
               "pairs_kept=" + std::to_string(stats.pairs_kept),
               "max_len=" + std::to_string(o.max_len),
               "valid_total=" + std::to_string(stats.valid_total),
               "valid_kept=" + std::to_string(stats.valid_kept),
               "src_vocab=" + std::to_string(stats.src_vocab),
               "tgt_vocab=" + std::to_string(stats.tgt_vocab),
               "source_profile=" + std::string(to_string(o.profile_src)),
               "target_profile=" + std::string(to_string(o.profile_tgt))});
  return stats;
}

PreparedData load_prepared(const fs::path& dir) {
  if (!fs::exists(dir / "stats.txt")) {
    throw DataError("no preprocessed corpus in " + dir.string() + " (run ktrans preprocess first)");
  }
  const auto stats = read_key_values(dir / "stats.txt");
  PreparedData d;
  d.train.source = read_tokenized(dir / "train.src.tok");
  d.train.target = read_tokenized(dir / "train.tgt.tok");
  if (d.train.source.size() != d.train.target.size()) {
    throw DataError("alignment mismatch in " + dir.string());
  }
  auto profile = [&](const char* key) {
    const auto it = stats.find(key);
    return it == stats.end() ? LanguageProfile::space_tokenized : parse_profile(it->second);
  };
  d.train.source_profile = profile("source_profile");
  d.train.target_profile = profile("target_profile");
  if (fs::exists(dir / "valid.src.tok")) {
    ParallelCorpus v;
    v.source = read_tokenized(dir / "valid.src.tok");
    v.target = read_tokenized(dir / "valid.tgt.tok");
    if (v.source.size() != v.target.size()) throw DataError("validation alignment mismatch");
    v.source_profile = d.train.source_profile;
    v.target_profile = d.train.target_profile;
    d.validation = std::move(v);
  }
  d.source_vocab = Vocabulary::load(dir / "vocab.src.txt");
  d.target_vocab = Vocabulary::load(dir / "vocab.tgt.txt");
  return d;
}

TrainOutcome cmd_train(const RunConfig& config, std::ostream* progress) {
  const auto data = load_prepared(config.data_dir);
  RunConfig resolved = config;
  resolved.model.src_vocab = data.source_vocab.size();
  resolved.model.tgt_vocab = data.target_vocab.size();
  try {
    resolved.model.validate();
    resolved.train.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
  fs::create_directories(resolved.out_dir);
  {
    std::ofstream echo(resolved.out_dir / "config.resolved", std::ios::binary | std::ios::trunc);
    echo << resolved.to_text();
  }
  CheckpointExtras extras;
  extras.meta["source_profile"] = std::string(to_string(data.train.source_profile));
  extras.meta["target_profile"] = std::string(to_string(data.train.target_profile));
  extras.source_vocab = data.source_vocab.regular_tokens();
  extras.target_vocab = data.target_vocab.regular_tokens();

  TrainOutcome outcome;
  outcome.out_dir = resolved.out_dir;
  outcome.result = resolved.dtype == "f32"
                       ? run_training<float>(resolved, data, extras, progress)
                       : run_training<double>(resolved, data, extras, progress);
  return outcome;
}

std::size_t cmd_translate(const TranslateOptions& options) {
  const auto info = inspect_checkpoint(options.checkpoint);
  return info.dtype == "f32" ? run_translate<float>(options) : run_translate<double>(options);
}

BleuReport cmd_evaluate(const fs::path& hyp, const fs::path& ref, const BleuOptions& options) {
  const auto h = read_lines(hyp);
  const auto r = read_lines(ref);
  if (h.size() != r.size()) {
    throw DataError("misaligned files: " + std::to_string(h.size()) + " hypothesis lines vs " +
                    std::to_string(r.size()) + " reference lines");
  }
  if (h.empty()) throw DataError("empty input: no lines to score");
  std::vector<TranslationPair> pairs;
  for (std::size_t i = 0; i < h.size(); ++i) pairs.push_back({split_whitespace(h[i]), split_whitespace(r[i])});
  try {
    return corpus_bleu(pairs, options);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
}

std::string format_evaluation(const BleuReport& rep) {
  std::ostringstream out;
  out << "BLEU = " << fixed(rep.score) << " (" << fixed(rep.score * 100.0, 2) << ")\n";
  for (std::size_t n = 0; n < rep.precisions.size(); ++n) {
    out << "p" << n + 1 << " = ";
    if (rep.precisions[n]) {
      out << fixed(*rep.precisions[n]) << " (" << fixed(*rep.precisions[n] * 100.0, 2) << ") ["
          << rep.counts[n].matched << "/" << rep.counts[n].total << "]\n";
    } else {
      out << "n/a\n";
    }
  }
  out << "bp = " << fixed(rep.bp) << " (" << fixed(rep.bp * 100.0, 2) << ")\n";
  out << "c = " << rep.c << "\nr = " << rep.r << "\n";
  return out.str();
}

}  // namespace ktrans::cli
