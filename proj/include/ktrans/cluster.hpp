#pragma once

// Lloyd's K-Means over row vectors.

#include <cstdint>
#include <span>
#include <vector>

#include "ktrans/tensor.hpp"

namespace ktrans {

struct ClusterResult {
  Tensor<double> centroids;          // [K, d]
  std::vector<std::size_t> assignments;  // one cluster index per point
  double mse = 0.0;
  std::size_t iterations = 0;
  std::vector<double> mse_trace;     // objective after each Lloyd iteration

  std::size_t k() const { return centroids.rows(); }
};

struct KMeansOptions {
  std::uint64_t seed = 0;
  std::size_t max_iter = 100;
  double tol = 1e-6;
};

// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
std::vector<std::size_t> assign(const Tensor<double>& points, const Tensor<double>& centroids);

// (1/N) * sum over all points of the squared distance to the assigned centroid.
double mse(const Tensor<double>& points, const Tensor<double>& centroids,
           std::span<const std::size_t> assignments);

// Seeded sampling of k distinct points, then alternate assignment and
// mean-update until the largest centroid shift drops below tol. A cluster
// left empty by assignment takes the point farthest from its centroid.
ClusterResult kmeans_fit(const Tensor<double>& points, std::size_t k,
                         const KMeansOptions& options = {});

template <typename T>
Tensor<double> to_double(const Tensor<T>& x);

}  // namespace ktrans
