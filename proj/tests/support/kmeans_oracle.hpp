#pragma once

#include <limits>
#include <vector>

namespace ktrans::testing {

// Exhaustive minimum of the (1/N)-normalized K-Means objective over every
// labelling of n points with k labels (k^n labellings, fine for n <= 8).
inline double brute_force_kmeans_mse(const std::vector<double>& pts, std::size_t n, std::size_t d,
                                     std::size_t k) {
  std::vector<std::size_t> label(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<double> sum(k * d, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[label[i]];
      for (std::size_t j = 0; j < d; ++j) sum[label[i] * d + j] += pts[i * d + j];
    }
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = sum[label[i] * d + j] / static_cast<double>(count[label[i]]);
        const double diff = pts[i * d + j] - c;
        cost += diff * diff;
      }
    best = std::min(best, cost / static_cast<double>(n));
    std::size_t pos = 0;
    while (pos < n && ++label[pos] == k) label[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

}  // namespace ktrans::testing
