#pragma once

// BLEU with clipped n-gram precision and brevity penalty, corpus-level
// micro-averaging, and a source-length bucketed breakdown.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ktrans {

using Tokens = std::vector<std::string>;

struct NgramCount {
  std::uint64_t matched = 0;
  std::uint64_t total = 0;

  bool defined() const { return total > 0; }
  double value() const { return static_cast<double>(matched) / static_cast<double>(total); }
};

// Clipped counts of order n. total == 0 when the candidate is shorter than n.
NgramCount ngram_precision(const Tokens& candidate, const Tokens& reference, std::size_t n);

// 1 when c > r, exp(1 - r/c) otherwise. Requires c, r >= 1.
double brevity_penalty(std::size_t c, std::size_t r);

struct BleuOptions {
  std::size_t n_max = 4;
  std::vector<double> weights;  // empty means uniform
  bool smooth = false;          // add-one on every defined order
};

struct BleuReport {
  std::vector<NgramCount> counts;               // per order 1..n_max
  std::vector<std::optional<double>> precisions;  // absent for dropped orders
  std::vector<double> weights;                  // renormalised, 0 for dropped orders
  double bp = 0.0;
  double score = 0.0;
  std::size_t c = 0;
  std::size_t r = 0;
};

// Throws std::invalid_argument on an empty reference, n_max == 0 or bad weights.
BleuReport bleu(const Tokens& candidate, const Tokens& reference, const BleuOptions& options = {});

struct TranslationPair {
  Tokens candidate;
  Tokens reference;
};

// Numerators and denominators summed over the corpus before division.
BleuReport corpus_bleu(const std::vector<TranslationPair>& pairs, const BleuOptions& options = {});

struct BucketedPair {
  std::size_t source_len = 0;
  Tokens candidate;
  Tokens reference;
};

// Rows cover [0, e0], [e0+1, e1], ..., [e_last+1, inf).
struct BucketRow {
  std::size_t low = 0;
  std::optional<std::size_t> high;  // absent for the overflow bucket
  std::size_t pair_count = 0;
  std::optional<BleuReport> report;  // absent when the bucket is empty
};

inline const std::vector<std::size_t> kDefaultBucketEdges{10, 20, 30, 40, 50};

std::size_t bucket_index(std::size_t source_len, const std::vector<std::size_t>& edges);

std::vector<BucketRow> length_bucket_report(const std::vector<BucketedPair>& pairs,
                                            const std::vector<std::size_t>& edges = kDefaultBucketEdges,
                                            const BleuOptions& options = {});

// bucket_low,bucket_high,pair_count,bleu,p1..pN,bp with blanks for absent values.
std::string bucket_report_csv(const std::vector<BucketRow>& rows, std::size_t n_max = 4);

}  // namespace ktrans
