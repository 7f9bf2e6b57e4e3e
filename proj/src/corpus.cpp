#include "ktrans/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "ktrans/layers.hpp"

namespace ktrans {

namespace {

constexpr char32_t kReplacement = 0xFFFD;

std::u32string decode_utf8(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    int extra = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      cp = b0 & 0x1F;
      extra = 1;
    } else if ((b0 & 0xF0) == 0xE0) {
      cp = b0 & 0x0F;
      extra = 2;
    } else if ((b0 & 0xF8) == 0xF0) {
      cp = b0 & 0x07;
      extra = 3;
    } else {
      out.push_back(kReplacement);
      ++i;
      continue;
    }
    if (i + static_cast<std::size_t>(extra) >= s.size()) {
      out.push_back(kReplacement);
      break;
    }
    bool ok = true;
    for (int k = 1; k <= extra; ++k) {
      const auto b = static_cast<unsigned char>(s[i + static_cast<std::size_t>(k)]);
      if ((b & 0xC0) != 0x80) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (b & 0x3F);
    }
    if (!ok) {
      out.push_back(kReplacement);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += static_cast<std::size_t>(extra) + 1;
  }
  return out;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

std::vector<std::uint8_t> padding_mask(std::size_t valid, std::size_t total) {
  std::vector<std::uint8_t> m(total, 0);
  std::fill(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(valid), std::uint8_t{1});
  return m;
}

bool is_space(char32_t cp) {
  return cp == U' ' || cp == U'\t' || cp == U'\n' || cp == U'\r' || cp == U'\v' || cp == U'\f';
}

bool is_control(char32_t cp) {
  return (cp < 0x20 && !is_space(cp)) || cp == 0x7F || (cp >= 0x80 && cp <= 0x9F);
}

bool is_ascii_punct(char32_t cp) {
  return (cp >= 0x21 && cp <= 0x2F) || (cp >= 0x3A && cp <= 0x40) ||
         (cp >= 0x5B && cp <= 0x60) || (cp >= 0x7B && cp <= 0x7E);
}

// ASCII and Latin-1 capitals.
char32_t fold_case(char32_t cp) {
  if (cp >= U'A' && cp <= U'Z') return cp + 0x20;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;
  return cp;
}

}  // namespace

std::string_view to_string(LanguageProfile profile) {
  return profile == LanguageProfile::char_tokenized ? "char_tokenized" : "space_tokenized";
}

LanguageProfile parse_profile(std::string_view text) {
  if (text == "space_tokenized" || text == "space") return LanguageProfile::space_tokenized;
  if (text == "char_tokenized" || text == "char") return LanguageProfile::char_tokenized;
  throw std::invalid_argument("unknown language profile '" + std::string(text) +
                              "' (expected space_tokenized|char_tokenized)");
}

// ---- SymbolTable ----------------------------------------------------------

const SymbolTable& SymbolTable::builtin() {
  static const SymbolTable table = [] {
    SymbolTable t;
    for (char32_t cp = 0xFF01; cp <= 0xFF5E; ++cp) t.set(cp, std::u32string(1, cp - 0xFEE0));
    t.set(0x3000, U" ");
    t.set(0x2018, U"'");
    t.set(0x2019, U"'");
    t.set(0x201C, U"\"");
    t.set(0x201D, U"\"");
    t.set(0x2013, U"-");
    t.set(0x2014, U"-");
    t.set(0x2026, U"...");
    return t;
  }();
  return table;
}

SymbolTable SymbolTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open symbol table " + path.string());
  SymbolTable t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected a tab");
    }
    try {
      const auto from = static_cast<char32_t>(std::stoul(line.substr(0, tab), nullptr, 16));
      std::u32string to;
      std::istringstream rest(line.substr(tab + 1));
      std::string hex;
      while (rest >> hex) to.push_back(static_cast<char32_t>(std::stoul(hex, nullptr, 16)));
      t.set(from, std::move(to));
    } catch (const std::logic_error&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad code point");
    }
  }
  return t;
}

const std::u32string* SymbolTable::find(char32_t cp) const {
  const auto it = map_.find(cp);
  return it == map_.end() ? nullptr : &it->second;
}

// ---- Tokenisation ---------------------------------------------------------

std::vector<std::string> preprocess(std::string_view line, LanguageProfile profile,
                                    const SymbolTable& symbols) {
  std::u32string normalized;
  for (char32_t cp : decode_utf8(line)) {
    if (const auto* sub = symbols.find(cp)) {
      normalized += *sub;
    } else {
      normalized.push_back(cp);
    }
  }
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char32_t raw : normalized) {
    if (is_control(raw)) continue;
    const char32_t cp = fold_case(raw);
    if (is_space(cp)) {
      flush();
    } else if (profile == LanguageProfile::char_tokenized) {
      append_utf8(current, cp);
      flush();
    } else if (is_ascii_punct(cp)) {
      flush();
      append_utf8(current, cp);
      flush();
    } else {
      append_utf8(current, cp);
    }
  }
  flush();
  return tokens;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

std::vector<std::string> split_whitespace(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream in{std::string(line)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

// ---- Vocabulary -----------------------------------------------------------

Vocabulary::Vocabulary() {
  for (const char* special : {"<PAD>", "<UNK>", "<BOS>", "<EOS>"}) add(special);
}

void Vocabulary::add(std::string token) {
  const auto [it, inserted] = index_.emplace(token, static_cast<int>(tokens_.size()));
  if (!inserted) throw DataError("duplicate vocabulary token '" + token + "'");
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sentences,
                             std::size_t max_size, std::size_t min_freq) {
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& s : sentences)
    for (const auto& tok : s) {
      ++counts[tok];
      ++total;
    }
  if (total == 0) throw DataError("empty corpus: no tokens to build a vocabulary from");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [tok, n] : ranked) {
    if (v.size() >= max_size) break;
    if (n < min_freq) break;
    if (v.index_.count(tok)) continue;  // a literal "<UNK>" in the data
    v.add(tok);
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  Vocabulary v;
  for (const auto& t : tokens) v.add(t);
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  write_lines(path, regular_tokens());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  return from_tokens(read_lines(path));
}

int Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.count(std::string(token)) != 0;
}

std::vector<std::string> Vocabulary::regular_tokens() const {
  return {tokens_.begin() + kNumSpecialTokens, tokens_.end()};
}

TokenSequence encode(const std::vector<std::string>& tokens, const Vocabulary& vocab) {
  TokenSequence seq;
  seq.raw = tokens;
  seq.ids.reserve(tokens.size());
  for (const auto& t : tokens) seq.ids.push_back(vocab.id(t));
  return seq;
}

std::vector<std::string> decode(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(vocab.token(id));
  return out;
}

// ---- Files and batching ---------------------------------------------------

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

ParallelCorpus load_parallel_corpus(const std::filesystem::path& source_path,
                                    const std::filesystem::path& target_path,
                                    LanguageProfile source_profile,
                                    LanguageProfile target_profile,
                                    const SymbolTable& symbols) {
  const auto src = read_lines(source_path);
  const auto tgt = read_lines(target_path);
  if (src.size() != tgt.size()) {
    throw DataError("alignment mismatch: " + std::to_string(src.size()) + " source lines vs " +
                    std::to_string(tgt.size()) + " target lines");
  }
  ParallelCorpus corpus;
  corpus.source_profile = source_profile;
  corpus.target_profile = target_profile;
  for (std::size_t i = 0; i < src.size(); ++i) {
    corpus.source.push_back(preprocess(src[i], source_profile, symbols));
    corpus.target.push_back(preprocess(tgt[i], target_profile, symbols));
  }
  return corpus;
}

bool within_length(const std::vector<std::string>& source, const std::vector<std::string>& target,
                   std::size_t max_len) {
  return !source.empty() && !target.empty() && source.size() <= max_len &&
         target.size() <= max_len;
}

std::vector<Batch> make_batches(const ParallelCorpus& corpus, const Vocabulary& source_vocab,
                                const Vocabulary& target_vocab, std::size_t max_len,
                                std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch_size must be >= 1");
  if (corpus.source.size() != corpus.target.size()) {
    throw DataError("make_batches: unequal source/target pair counts");
  }
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (within_length(corpus.source[i], corpus.target[i], max_len)) kept.push_back(i);
  if (kept.empty()) throw DataError("empty corpus after length filtering");

  std::mt19937_64 rng(seed);
  for (std::size_t i = kept.size() - 1; i > 0; --i) {
    const auto j = std::min(i, static_cast<std::size_t>(unit_uniform(rng) * static_cast<double>(i + 1)));
    std::swap(kept[i], kept[j]);
  }

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < kept.size(); start += batch_size) {
    const std::size_t end = std::min(kept.size(), start + batch_size);
    Batch b;
    std::size_t src_max = 0, tgt_max = 0;
    for (std::size_t p = start; p < end; ++p) {
      src_max = std::max(src_max, corpus.source[kept[p]].size());
      tgt_max = std::max(tgt_max, corpus.target[kept[p]].size() + 1);
    }
    for (std::size_t p = start; p < end; ++p) {
      const auto idx = kept[p];
      auto src = encode(corpus.source[idx], source_vocab).ids;
      auto tgt = encode(corpus.target[idx], target_vocab).ids;
      b.source_len.push_back(src.size());
      b.target_len.push_back(tgt.size() + 1);
      std::vector<int> in{kBosId};
      const std::size_t src_len = src.size();
      src.resize(src_max, kPadId);
      in.insert(in.end(), tgt.begin(), tgt.end());
      std::vector<int> out = tgt;
      out.push_back(kEosId);
      in.resize(tgt_max, kPadId);
      out.resize(tgt_max, kPadId);
      b.source_mask.push_back(padding_mask(src_len, src_max));
      b.target_mask.push_back(padding_mask(tgt.size() + 1, tgt_max));
      b.source.push_back(std::move(src));
      b.target_in.push_back(std::move(in));
      b.target_out.push_back(std::move(out));
      b.pair_index.push_back(idx);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace ktrans
