#include "ktrans/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "ktrans/layers.hpp"

namespace ktrans {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

std::span<const double> row(std::span<const double> flat, std::size_t r, std::size_t d) {
  return flat.subspan(r * d, d);
}

void require_width(const Tensor<double>& points, const Tensor<double>& centroids) {
  if (points.rank() != 2 || centroids.rank() != 2 || points.cols() != centroids.cols()) {
    throw DimensionError("k-means: points " + shape_to_string(points.shape()) +
                         " vs centroids " + shape_to_string(centroids.shape()));
  }
}

// Mean of each cluster's members, summed in point order.
std::vector<double> update_centroids(std::span<const double> pts, std::size_t n, std::size_t d,
                                     std::size_t k, std::span<const std::size_t> assignments) {
  std::vector<double> sums(k * d, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = assignments[i];
    ++counts[c];
    for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += pts[i * d + j];
  }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < d; ++j) sums[c * d + j] /= static_cast<double>(counts[c]);
  return sums;
}

// Moves a point into every empty cluster: the point farthest from its own
// centroid among clusters that can spare a member.
void repair_empty_clusters(std::span<const double> pts, std::size_t n, std::size_t d,
                           std::vector<double>& centroids, std::vector<std::size_t>& assignments,
                           std::size_t k) {
  std::vector<std::size_t> counts(k, 0);
  for (auto a : assignments) ++counts[a];
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] != 0) continue;
    std::size_t best = n;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (counts[assignments[i]] < 2) continue;
      const double dist =
          squared_distance(row(pts, i, d),
                           std::span<const double>(centroids).subspan(assignments[i] * d, d));
      if (dist > best_dist) {
        best_dist = dist;
        best = i;
      }
    }
    --counts[assignments[best]];
    assignments[best] = c;
    counts[c] = 1;
    std::copy_n(pts.begin() + static_cast<std::ptrdiff_t>(best * d), d,
                centroids.begin() + static_cast<std::ptrdiff_t>(c * d));
  }
}

}  // namespace

std::vector<std::size_t> assign(const Tensor<double>& points, const Tensor<double>& centroids) {
  require_width(points, centroids);
  const std::size_t n = points.rows(), k = centroids.rows(), d = points.cols();
  const auto pts = points.data();
  const auto cen = centroids.data();
  std::vector<std::size_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = squared_distance(row(pts, i, d), row(cen, 0, d));
    for (std::size_t c = 1; c < k; ++c) {
      const double dist = squared_distance(row(pts, i, d), row(cen, c, d));
      if (dist < best) {
        best = dist;
        out[i] = c;
      }
    }
  }
  return out;
}

double mse(const Tensor<double>& points, const Tensor<double>& centroids,
           std::span<const std::size_t> assignments) {
  require_width(points, centroids);
  const std::size_t n = points.rows(), d = points.cols();
  if (assignments.size() != n) {
    throw DimensionError("mse: " + std::to_string(assignments.size()) + " assignments for " +
                         std::to_string(n) + " points");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (assignments[i] >= centroids.rows()) throw std::out_of_range("mse: assignment out of range");
    total += squared_distance(row(points.data(), i, d), row(centroids.data(), assignments[i], d));
  }
  return total / static_cast<double>(n);
}

ClusterResult kmeans_fit(const Tensor<double>& points, std::size_t k,
                         const KMeansOptions& options) {
  if (points.rank() != 2) throw DimensionError("kmeans_fit: points must be a matrix");
  const std::size_t n = points.rows(), d = points.cols();
  if (k == 0) throw std::invalid_argument("kmeans_fit: k must be at least 1");
  if (k > n) {
    throw std::invalid_argument("kmeans_fit: k = " + std::to_string(k) + " exceeds " +
                                std::to_string(n) + " points");
  }
  const auto pts = points.data();
  for (double v : pts) {
    if (!std::isfinite(v)) throw std::invalid_argument("kmeans_fit: non-finite point coordinate");
  }

  // Partial Fisher-Yates over point indices.
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(unit_uniform(rng) * static_cast<double>(n - i));
    std::swap(order[i], order[std::min(j, n - 1)]);
  }
  std::vector<double> centroids(k * d);
  for (std::size_t c = 0; c < k; ++c)
    std::copy_n(pts.begin() + static_cast<std::ptrdiff_t>(order[c] * d), d,
                centroids.begin() + static_cast<std::ptrdiff_t>(c * d));

  ClusterResult result;
  std::vector<std::size_t> assignments;
  const std::size_t max_iter = std::max<std::size_t>(options.max_iter, 1);
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    assignments = assign(points, Tensor<double>({k, d}, centroids));
    repair_empty_clusters(pts, n, d, centroids, assignments, k);
    auto updated = update_centroids(pts, n, d, k, assignments);
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c)
      shift = std::max(shift, std::sqrt(squared_distance(
                                  std::span<const double>(updated).subspan(c * d, d),
                                  std::span<const double>(centroids).subspan(c * d, d))));
    centroids = std::move(updated);
    result.iterations = iter + 1;
    result.mse_trace.push_back(mse(points, Tensor<double>({k, d}, centroids), assignments));
    if (shift < options.tol) break;
  }
  result.centroids = Tensor<double>({k, d}, std::move(centroids));
  result.assignments = std::move(assignments);
  result.mse = result.mse_trace.back();
  return result;
}

template <typename T>
Tensor<double> to_double(const Tensor<T>& x) {
  return Tensor<double>(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
}

template Tensor<double> to_double(const Tensor<float>&);
template Tensor<double> to_double(const Tensor<double>&);

}  // namespace ktrans
