#pragma once

// Corpus preparation: line normalisation and tokenisation, vocabularies with
// reserved ids, integer encoding and length-filtered padded batches.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ktrans/vocab_ids.hpp"

namespace ktrans {

enum class LanguageProfile { space_tokenized, char_tokenized };

std::string_view to_string(LanguageProfile profile);
LanguageProfile parse_profile(std::string_view text);

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Code point substitutions applied before tokenisation: full-width ASCII
// variants to ASCII, ideographic space to space, curly quotes to straight
// quotes, dashes to '-', ellipsis to "...".
class SymbolTable {
 public:
  static const SymbolTable& builtin();
  // Tab-separated hex code points: "FF01\t0021", multi-point targets
  // space-separated. '#' starts a comment line.
  static SymbolTable load(const std::filesystem::path& path);

  void set(char32_t from, std::u32string to) { map_[from] = std::move(to); }
  const std::u32string* find(char32_t cp) const;
  bool operator==(const SymbolTable& other) const { return map_ == other.map_; }
  std::size_t size() const { return map_.size(); }

 private:
  std::unordered_map<char32_t, std::u32string> map_;
};

// Case folding, symbol normalisation, control-character removal, then either
// whitespace + punctuation splitting or per-character splitting.
std::vector<std::string> preprocess(std::string_view line, LanguageProfile profile,
                                    const SymbolTable& symbols = SymbolTable::builtin());

std::string join_tokens(const std::vector<std::string>& tokens);
std::vector<std::string> split_whitespace(std::string_view line);

class Vocabulary {
 public:
  Vocabulary();

  // Frequency-ranked (ties lexicographic), tokens below min_freq dropped,
  // truncated so the total size including reserved ids is at most max_size.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences,
                          std::size_t max_size, std::size_t min_freq = 1);
  // Non-reserved tokens in id order starting at id 4.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

  // One token per line; line i holds id i + 4.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  int id(std::string_view token) const;  // kUnkId when absent
  const std::string& token(int id) const;  // throws std::out_of_range
  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const;
  // Tokens from id 4 upwards.
  std::vector<std::string> regular_tokens() const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct TokenSequence {
  std::vector<int> ids;
  std::vector<std::string> raw;
};

TokenSequence encode(const std::vector<std::string>& tokens, const Vocabulary& vocab);
std::vector<std::string> decode(const std::vector<int>& ids, const Vocabulary& vocab);

struct ParallelCorpus {
  std::vector<std::vector<std::string>> source;
  std::vector<std::vector<std::string>> target;
  LanguageProfile source_profile = LanguageProfile::space_tokenized;
  LanguageProfile target_profile = LanguageProfile::space_tokenized;

  std::size_t size() const { return source.size(); }
};

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

// Reads and preprocesses two line-aligned UTF-8 files.
ParallelCorpus load_parallel_corpus(const std::filesystem::path& source_path,
                                    const std::filesystem::path& target_path,
                                    LanguageProfile source_profile,
                                    LanguageProfile target_profile,
                                    const SymbolTable& symbols = SymbolTable::builtin());

// Pairs whose sides both hold between 1 and max_len tokens.
bool within_length(const std::vector<std::string>& source, const std::vector<std::string>& target,
                   std::size_t max_len);

struct Batch {
  std::vector<std::vector<int>> source;      // padded with <PAD>
  std::vector<std::vector<int>> target_in;   // <BOS> + target, padded
  std::vector<std::vector<int>> target_out;  // target + <EOS>, padded
  std::vector<std::size_t> source_len;
  std::vector<std::size_t> target_len;       // length of target_in / target_out
  std::vector<std::vector<std::uint8_t>> source_mask;  // 1 for real tokens
  std::vector<std::vector<std::uint8_t>> target_mask;
  std::vector<std::size_t> pair_index;       // index into the corpus

  std::size_t size() const { return source.size(); }
};

// Drops pairs outside [1, max_len] on either side, shuffles the rest with the
// seed and cuts them into batches padded to their own longest member.
std::vector<Batch> make_batches(const ParallelCorpus& corpus, const Vocabulary& source_vocab,
                                const Vocabulary& target_vocab, std::size_t max_len,
                                std::size_t batch_size, std::uint64_t seed);

}  // namespace ktrans
