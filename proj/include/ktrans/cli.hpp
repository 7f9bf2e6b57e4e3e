#pragma once

// Command implementations behind the ktrans executable. Each command is a
// plain function so tests can drive it in-process; tools/ktrans.cpp only
// parses flags and maps exceptions to exit codes.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ktrans/corpus.hpp"
#include "ktrans/metrics.hpp"
#include "ktrans/model.hpp"
#include "ktrans/trainer.hpp"

namespace ktrans::cli {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitData = 3, kExitDiverged = 4 };

inline constexpr const char* kRunDirEnv = "KTRANS_RUN_DIR";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat "key = value" settings covering the model, the trainer and paths.
// '#' starts a comment; blank lines are ignored; unknown keys are errors.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "run";
  std::string dtype = "f64";  // f64 | f32

  void set(const std::string& key, const std::string& value);
  static std::vector<std::string> keys();

  static RunConfig load(const std::filesystem::path& path);
  void apply_file(const std::filesystem::path& path);
  std::string to_text() const;
};

// Default run directory: $KTRANS_RUN_DIR when set, else `fallback`.
std::filesystem::path default_run_dir(const std::filesystem::path& fallback = "run");

// ---- preprocess -----------------------------------------------------------

struct PreprocessOptions {
  std::filesystem::path src, tgt;
  std::optional<std::filesystem::path> valid_src, valid_tgt;
  LanguageProfile profile_src = LanguageProfile::space_tokenized;
  LanguageProfile profile_tgt = LanguageProfile::space_tokenized;
  std::filesystem::path out_dir;
  std::size_t max_len = 50;
  std::size_t max_vocab = 32000;
  std::size_t min_freq = 1;
};

struct PreprocessStats {
  std::size_t pairs_total = 0;
  std::size_t pairs_kept = 0;
  std::size_t valid_total = 0;
  std::size_t valid_kept = 0;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
};

// Writes train.{src,tgt}.tok (one preprocessed sentence per line, tokens
// separated by single spaces), optional valid.{src,tgt}.tok,
// vocab.{src,tgt}.txt and stats.txt.
PreprocessStats cmd_preprocess(const PreprocessOptions& options);

struct PreparedData {
  ParallelCorpus train;
  std::optional<ParallelCorpus> validation;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
};

PreparedData load_prepared(const std::filesystem::path& data_dir);

// ---- train ----------------------------------------------------------------

struct TrainOutcome {
  TrainResult result;
  std::filesystem::path out_dir;
};

// Echoes config.resolved into out_dir, trains and writes checkpoints and the
// log there. Progress lines go to `progress` when given.
TrainOutcome cmd_train(const RunConfig& config, std::ostream* progress = nullptr);

// ---- translate ------------------------------------------------------------

struct TranslateOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path input;
  std::filesystem::path output;
  std::size_t max_out_len = 50;
};

// Raw text in, space-separated target tokens out, one line per line. Sources
// longer than the model's max_len are cut to max_len tokens.
std::size_t cmd_translate(const TranslateOptions& options);

// ---- evaluate -------------------------------------------------------------

// Both files hold whitespace-separated tokens, aligned by line.
BleuReport cmd_evaluate(const std::filesystem::path& hyp, const std::filesystem::path& ref,
                        const BleuOptions& options);
std::string format_evaluation(const BleuReport& report);

// ---- report ---------------------------------------------------------------

struct ReportOptions {
  std::vector<std::pair<std::string, std::filesystem::path>> systems;
  std::filesystem::path ref;
  std::optional<std::filesystem::path> src;  // bucket by reference length when absent
  std::vector<std::size_t> edges = kDefaultBucketEdges;
  std::filesystem::path out;  // writes <out>.csv, <out>.svg, <out>_summary.csv
  std::string dataset = "test";
  BleuOptions bleu;
};

struct SystemReport {
  std::string name;
  std::vector<BucketRow> buckets;
  BleuReport overall;
};

std::vector<SystemReport> cmd_report(const ReportOptions& options);

std::string report_csv(const std::vector<SystemReport>& systems, std::size_t n_max);
std::string report_summary_csv(const std::vector<SystemReport>& systems, const std::string& dataset);
std::string report_svg(const std::vector<SystemReport>& systems);

std::pair<std::string, std::filesystem::path> parse_system_spec(const std::string& spec);
std::vector<std::size_t> parse_edges(const std::string& text);

}  // namespace ktrans::cli
