#include "wadg/ot_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace wadg::oracle {

PointCloud::PointCloud(Tensor pts) : points(std::move(pts)) {
  if (points.rank() != 2 || points.rows() == 0) throw std::invalid_argument("point cloud needs N >= 1 rows");
  if (!points.all_finite()) throw std::invalid_argument("point cloud has non-finite entries");
}

std::vector<std::size_t> solve_assignment(const Tensor& cost) {
  const std::size_t n = cost.rows();
  if (cost.rank() != 2 || cost.cols() != n) throw std::invalid_argument("assignment needs a square cost matrix");
  constexpr double inf = std::numeric_limits<double>::infinity();
  // Potentials u (rows), v (columns); p[col] = row matched to col, 1-based with 0 as sentinel.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

namespace {

Tensor euclidean_costs(const PointCloud& a, const PointCloud& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("exact W1 oracle needs equal-size clouds (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  if (a.dim() != b.dim()) throw std::invalid_argument("point clouds differ in dimension");
  const std::size_t n = a.size();
  Tensor cost(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double ss = 0.0;
      for (std::size_t k = 0; k < a.dim(); ++k) {
        const double d = a.points.at(i, k) - b.points.at(j, k);
        ss += d * d;
      }
      cost.at(i, j) = std::sqrt(ss);
    }
  return cost;
}

}  // namespace

double exact_w1_assignment(const PointCloud& a, const PointCloud& b) {
  const Tensor cost = euclidean_costs(a, b);
  const auto assignment = solve_assignment(cost);
  double total = 0.0;
  for (std::size_t i = 0; i < assignment.size(); ++i) total += cost.at(i, assignment[i]);
  return total / static_cast<double>(assignment.size());
}

double exact_w1_exhaustive(const PointCloud& a, const PointCloud& b) {
  const Tensor cost = euclidean_costs(a, b);
  const std::size_t n = a.size();
  if (n > 8) throw std::invalid_argument("exhaustive assignment limited to N <= 8");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += cost.at(i, perm[i]);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(n);
}

double exact_w1_sorted_1d(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("sorted 1-D W1 needs equal sample counts");
  if (a.empty()) throw std::invalid_argument("sorted 1-D W1 needs samples");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  double total = 0.0;
  for (std::size_t i = 0; i < sa.size(); ++i) total += std::abs(sa[i] - sb[i]);
  return total / static_cast<double>(sa.size());
}

ReferenceMsResult reference_ms_pipeline(const Tensor& embeddings, std::span<const int> labels,
                                        const ReferenceMsParams& params) {
  const std::size_t n = embeddings.rows(), d = embeddings.cols();
  Tensor S(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += embeddings.at(i, k) * embeddings.at(j, k);
      S.at(i, j) = dot;
    }
  return reference_ms_from_similarity(S, labels, params);
}

ReferenceMsResult reference_ms_from_similarity(const Tensor& S, std::span<const int> labels,
                                               const ReferenceMsParams& params) {
  const std::size_t n = labels.size();
  ReferenceMsResult r;
  r.positives.assign(n, {});
  r.negatives.assign(n, {});
  const double lam = params.lambda_center, eps = params.epsilon, a = params.alpha, b = params.beta;

  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> same, other;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      (labels[k] == labels[i] ? same : other).push_back(S.at(i, k));
    }
    if (same.empty() || other.empty()) continue;
    const double min_same = *std::min_element(same.begin(), same.end());
    const double other_ref = params.literal_min_positive ? *std::min_element(other.begin(), other.end())
                                                         : *std::max_element(other.begin(), other.end());
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] != labels[i] && S.at(i, j) >= min_same - eps) r.negatives[i].push_back(j);
      if (labels[j] == labels[i] && S.at(i, j) <= other_ref + eps) r.positives[i].push_back(j);
    }
  }

  // Plain exponentials, no stabilization: inputs in tests keep beta*(S-lambda) far below overflow.
  double total = 0.0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& P = r.positives[i];
    const auto& N = r.negatives[i];
    if (P.empty() && N.empty()) continue;
    ++anchors;
    double sp = 0.0, sn = 0.0;
    for (auto k : P) sp += std::exp(-a * (S.at(i, k) - lam));
    for (auto k : N) sn += std::exp(b * (S.at(i, k) - lam));
    total += std::log(1.0 + sp) / a + std::log(1.0 + sn) / b;

    for (auto j : N) {
      double denom = 1.0;
      for (auto k : N) denom += std::exp(b * (S.at(i, k) - lam));
      r.weights.push_back({i, j, false, std::exp(b * (S.at(i, j) - lam)) / denom});
    }
    for (auto j : P) {
      double denom = std::exp(-a * (lam - S.at(i, j)));
      for (auto k : P) denom += std::exp(-a * (S.at(i, k) - S.at(i, j)));
      r.weights.push_back({i, j, true, 1.0 / denom});
    }
  }
  r.loss = anchors == 0 ? 0.0 : total / static_cast<double>(anchors);
  return r;
}

}  // namespace wadg::oracle
