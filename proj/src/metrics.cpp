#include "ktrans/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ktrans {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::uint64_t>;

NgramCounts count_ngrams(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

std::vector<double> base_weights(const BleuOptions& options) {
  if (options.n_max == 0) throw std::invalid_argument("bleu: n_max must be >= 1");
  if (options.weights.empty()) {
    return std::vector<double>(options.n_max, 1.0 / static_cast<double>(options.n_max));
  }
  if (options.weights.size() != options.n_max) {
    throw std::invalid_argument("bleu: expected " + std::to_string(options.n_max) + " weights");
  }
  double total = 0.0;
  for (double w : options.weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("bleu: weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("bleu: weights must sum to 1");
  return options.weights;
}

// Combination step shared by sentence and corpus scores.
BleuReport combine(std::vector<NgramCount> counts, std::size_t c, std::size_t r,
                   const BleuOptions& options) {
  auto weights = base_weights(options);
  BleuReport rep;
  rep.counts = std::move(counts);
  rep.c = c;
  rep.r = r;
  rep.precisions.assign(options.n_max, std::nullopt);
  rep.weights.assign(options.n_max, 0.0);
  if (c == 0) return rep;  // score 0, bp 0

  double valid_weight = 0.0;
  std::size_t valid_orders = 0;
  for (std::size_t k = 0; k < options.n_max; ++k) {
    const auto& nc = rep.counts[k];
    if (!nc.defined()) continue;
    ++valid_orders;
    valid_weight += weights[k];
    rep.precisions[k] = options.smooth ? static_cast<double>(nc.matched + 1) /
                                             static_cast<double>(nc.total + 1)
                                       : nc.value();
  }
  for (std::size_t k = 0; k < options.n_max; ++k) {
    if (!rep.precisions[k]) continue;
    rep.weights[k] = valid_weight > 0.0 ? weights[k] / valid_weight
                                        : 1.0 / static_cast<double>(valid_orders);
  }

  rep.bp = brevity_penalty(c, r);
  double log_sum = 0.0;
  for (std::size_t k = 0; k < options.n_max; ++k) {
    if (!rep.precisions[k] || rep.weights[k] == 0.0) continue;
    if (*rep.precisions[k] == 0.0) return rep;  // log of zero: score stays 0
    log_sum += rep.weights[k] * std::log(*rep.precisions[k]);
  }
  rep.score = rep.bp * std::exp(log_sum);
  return rep;
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

NgramCount ngram_precision(const Tokens& candidate, const Tokens& reference, std::size_t n) {
  if (n == 0) throw std::invalid_argument("ngram_precision: n must be >= 1");
  NgramCount out;
  if (candidate.size() < n) return out;
  out.total = candidate.size() - n + 1;
  const auto ref = count_ngrams(reference, n);
  for (const auto& [gram, count] : count_ngrams(candidate, n)) {
    const auto it = ref.find(gram);
    if (it != ref.end()) out.matched += std::min(count, it->second);
  }
  return out;
}

double brevity_penalty(std::size_t c, std::size_t r) {
  if (c == 0 || r == 0) throw std::invalid_argument("brevity_penalty: lengths must be >= 1");
  if (c > r) return 1.0;
  return std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
}

BleuReport bleu(const Tokens& candidate, const Tokens& reference, const BleuOptions& options) {
  if (reference.empty()) throw std::invalid_argument("bleu: empty reference");
  std::vector<NgramCount> counts;
  for (std::size_t n = 1; n <= options.n_max; ++n)
    counts.push_back(ngram_precision(candidate, reference, n));
  return combine(std::move(counts), candidate.size(), reference.size(), options);
}

BleuReport corpus_bleu(const std::vector<TranslationPair>& pairs, const BleuOptions& options) {
  if (pairs.empty()) throw std::invalid_argument("corpus_bleu: empty input");
  std::vector<NgramCount> counts(options.n_max);
  std::size_t c = 0, r = 0;
  for (const auto& p : pairs) {
    for (std::size_t n = 1; n <= options.n_max; ++n) {
      const auto nc = ngram_precision(p.candidate, p.reference, n);
      counts[n - 1].matched += nc.matched;
      counts[n - 1].total += nc.total;
    }
    c += p.candidate.size();
    r += p.reference.size();
  }
  if (r == 0) throw std::invalid_argument("corpus_bleu: every reference is empty");
  return combine(std::move(counts), c, r, options);
}

std::size_t bucket_index(std::size_t source_len, const std::vector<std::size_t>& edges) {
  return static_cast<std::size_t>(std::lower_bound(edges.begin(), edges.end(), source_len) -
                                  edges.begin());
}

std::vector<BucketRow> length_bucket_report(const std::vector<BucketedPair>& pairs,
                                            const std::vector<std::size_t>& edges,
                                            const BleuOptions& options) {
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (edges[i] <= edges[i - 1]) {
      throw std::invalid_argument("length_bucket_report: bucket edges must increase strictly");
    }
  }
  std::vector<std::vector<TranslationPair>> split(edges.size() + 1);
  for (const auto& p : pairs) split[bucket_index(p.source_len, edges)].push_back({p.candidate, p.reference});

  std::vector<BucketRow> rows;
  for (std::size_t b = 0; b <= edges.size(); ++b) {
    BucketRow row;
    row.low = b == 0 ? 0 : edges[b - 1] + 1;
    if (b < edges.size()) row.high = edges[b];
    row.pair_count = split[b].size();
    if (!split[b].empty()) row.report = corpus_bleu(split[b], options);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string bucket_report_csv(const std::vector<BucketRow>& rows, std::size_t n_max) {
  std::ostringstream out;
  out << "bucket_low,bucket_high,pair_count,bleu";
  for (std::size_t n = 1; n <= n_max; ++n) out << ",p" << n;
  out << ",bp\n";
  for (const auto& row : rows) {
    out << row.low << ',' << (row.high ? std::to_string(*row.high) : std::string("inf")) << ','
        << row.pair_count << ',';
    if (row.report) out << format_number(row.report->score);
    for (std::size_t n = 0; n < n_max; ++n) {
      out << ',';
      if (row.report && n < row.report->precisions.size() && row.report->precisions[n]) {
        out << format_number(*row.report->precisions[n]);
      }
    }
    out << ',';
    if (row.report) out << format_number(row.report->bp);
    out << '\n';
  }
  return out.str();
}

}  // namespace ktrans
