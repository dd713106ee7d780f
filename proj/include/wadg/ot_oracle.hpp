#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "wadg/tensor.hpp"

// Reference implementations used by tests and diagnostics. Nothing here
// shares code with the losses module.
namespace wadg::oracle {

/// Empirical distribution with uniform weights 1/N over the rows of `points`.
struct PointCloud {
  Tensor points;  // [N x d]

  explicit PointCloud(Tensor pts);
  std::size_t size() const { return points.rows(); }
  std::size_t dim() const { return points.cols(); }
};

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method,
/// O(n^3)). Returns assignment[row] = column.
std::vector<std::size_t> solve_assignment(const Tensor& cost);

/// Exact W1 between equal-size clouds with Euclidean ground cost:
/// (1/N) min over permutations of sum ||a_i - b_sigma(i)||.
double exact_w1_assignment(const PointCloud& a, const PointCloud& b);

/// Same quantity by enumerating all N! permutations; N <= 8.
double exact_w1_exhaustive(const PointCloud& a, const PointCloud& b);

/// (1/N) sum |sort(a)_i - sort(b)_i| for equal-size 1-D samples.
double exact_w1_sorted_1d(std::span<const double> a, std::span<const double> b);

struct ReferenceMsParams {
  double lambda_center = 0.5;
  double epsilon = 1e-5;
  double alpha = 2.0;
  double beta = 40.0;
  bool literal_min_positive = false;
};

struct ReferenceWeight {
  std::size_t anchor = 0;
  std::size_t other = 0;
  bool positive = false;
  double weight = 0.0;
};

struct ReferenceMsResult {
  std::vector<std::vector<std::size_t>> positives;
  std::vector<std::vector<std::size_t>> negatives;
  double loss = 0.0;
  std::vector<ReferenceWeight> weights;
};

/// Literal O(N^2) recomputation of similarity, mining, pair weights and the
/// multi-similarity loss from row-normalized embeddings.
ReferenceMsResult reference_ms_pipeline(const Tensor& embeddings, std::span<const int> labels,
                                        const ReferenceMsParams& params);

/// The same pipeline starting from a given similarity matrix.
ReferenceMsResult reference_ms_from_similarity(const Tensor& S, std::span<const int> labels,
                                               const ReferenceMsParams& params);

}  // namespace wadg::oracle
