#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "geomark/error.hpp"

namespace geomark {

using Vector = std::vector<double>;
using VectorView = std::span<const double>;

/// Orthonormal set of directions, strongest first. `eigenvalues` holds the
/// variance captured by each direction when the basis came from PCA.
struct ComponentBasis {
  std::size_t dim = 0;
  std::vector<Vector> vectors;
  std::vector<double> eigenvalues;

  std::size_t size() const noexcept { return vectors.size(); }
  bool empty() const noexcept { return vectors.empty(); }
};

namespace detail {

inline void require_same_dim(VectorView u, VectorView v) {
  if (u.size() != v.size()) {
    throw Error(ErrorCode::DimMismatch,
                "dims " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  }
}

// Four independent accumulators; fixed summation order keeps results
// reproducible while letting the compiler pipeline the loop.
template <typename Op>
double reduce4(const double* u, const double* v, std::size_t n, Op op) {
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    a0 += op(u[i], v[i]);
    a1 += op(u[i + 1], v[i + 1]);
    a2 += op(u[i + 2], v[i + 2]);
    a3 += op(u[i + 3], v[i + 3]);
  }
  for (; i < n; ++i) a0 += op(u[i], v[i]);
  return (a0 + a1) + (a2 + a3);
}

inline double mul(double a, double b) { return a * b; }
inline double sqdiff(double a, double b) { return (a - b) * (a - b); }

}  // namespace detail

inline double dot(VectorView u, VectorView v) {
  detail::require_same_dim(u, v);
  return detail::reduce4(u.data(), v.data(), u.size(), detail::mul);
}

inline double norm(VectorView v) { return std::sqrt(dot(v, v)); }

inline double l2_distance(VectorView u, VectorView v) {
  detail::require_same_dim(u, v);
  return std::sqrt(detail::reduce4(u.data(), v.data(), u.size(), detail::sqdiff));
}

inline double squared_distance(VectorView u, VectorView v) {
  return detail::reduce4(u.data(), v.data(), u.size(), detail::sqdiff);
}

inline bool all_finite(VectorView v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline Vector normalize(VectorView v) {
  const double n = norm(v);
  if (!(n > 1e-30)) throw Error(ErrorCode::ZeroVector, "cannot normalize a zero-norm vector");
  Vector out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

inline double cosine(VectorView u, VectorView v) {
  detail::require_same_dim(u, v);
  const double nu = norm(u);
  const double nv = norm(v);
  if (!(nu > 1e-30) || !(nv > 1e-30)) throw Error(ErrorCode::ZeroVector, "cosine of a zero-norm vector");
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

/// Distance between the unit-normalized versions of u and v.
inline double l2_unit_distance(VectorView u, VectorView v) {
  detail::require_same_dim(u, v);
  const double nu = norm(u);
  const double nv = norm(v);
  if (!(nu > 1e-30) || !(nv > 1e-30)) throw Error(ErrorCode::ZeroVector, "distance of a zero-norm vector");
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double diff = u[i] / nu - v[i] / nv;
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

/// Lower empirical quantile: the ceil(rho * N)-th smallest value.
inline double quantile(std::vector<double> values, double rho) {
  if (values.empty()) throw Error(ErrorCode::EmptyInput, "quantile of an empty multiset");
  if (!(rho > 0.0 && rho < 1.0)) throw Error(ErrorCode::RhoOutOfRange, "rho must lie in (0,1), got " + std::to_string(rho));
  const auto n = values.size();
  // rho * n can land a hair above an integer (0.07 * 100); the slack keeps ceil honest.
  auto rank = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, n);
  auto nth = values.begin() + static_cast<std::ptrdiff_t>(rank - 1);
  std::nth_element(values.begin(), nth, values.end());
  return *nth;
}

/// v minus its projection onto span(basis).
inline Vector project_out(VectorView v, const ComponentBasis& basis) {
  Vector out(v.begin(), v.end());
  for (const auto& b : basis.vectors) {
    const double coef = dot(v, b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= coef * b[i];
  }
  return out;
}

struct KMeansResult {
  std::vector<std::size_t> assignments;
  std::vector<Vector> centroids;
  std::size_t iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding. Empty clusters steal the point
/// that lies farthest from its current centroid.
inline KMeansResult kmeans(const std::vector<Vector>& points, std::size_t n_clusters, std::size_t max_iters,
                           std::uint64_t seed) {
  const std::size_t n = points.size();
  if (n_clusters == 0) throw Error(ErrorCode::InvalidArgument, "n_clusters must be positive");
  if (n_clusters > n) {
    throw Error(ErrorCode::TooFewPoints,
                std::to_string(n) + " points for " + std::to_string(n_clusters) + " clusters");
  }
  const std::size_t dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw Error(ErrorCode::DimMismatch, "kmeans points differ in dimension");
  }

  std::mt19937_64 rng(seed);
  KMeansResult result;
  auto& centroids = result.centroids;

  // k-means++ seeding
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  centroids.push_back(points[pick(rng)]);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  while (centroids.size() < n_clusters) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(points[i], centroids.back()));
      total += nearest[i];
    }
    std::size_t chosen = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng);
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= nearest[i];
        if (target <= 0.0 && nearest[i] > 0.0) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = pick(rng);
    }
    centroids.push_back(points[chosen]);
  }

  auto& assign = result.assignments;
  assign.assign(n, n_clusters);
  std::vector<double> dist_to_own(n, 0.0);
  for (std::size_t iter = 0; iter < std::max<std::size_t>(max_iters, 1); ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < n_clusters; ++c) {
        const double d = squared_distance(points[i], centroids[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[i] != best) changed = true;
      assign[i] = best;
      dist_to_own[i] = best_d;
    }

    std::vector<std::size_t> counts(n_clusters, 0);
    for (auto a : assign) ++counts[a];
    for (std::size_t c = 0; c < n_clusters; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[assign[i]] > 1 && dist_to_own[i] > far_d) {
          far_d = dist_to_own[i];
          far = i;
        }
      }
      --counts[assign[far]];
      assign[far] = c;
      counts[c] = 1;
      dist_to_own[far] = 0.0;
      changed = true;
    }

    for (auto& c : centroids) std::fill(c.begin(), c.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& c = centroids[assign[i]];
      for (std::size_t j = 0; j < dim; ++j) c[j] += points[i][j];
    }
    for (std::size_t c = 0; c < n_clusters; ++c) {
      for (double& x : centroids[c]) x /= static_cast<double>(counts[c]);
    }
    result.iterations = iter + 1;
    if (!changed) break;
  }
  return result;
}

/// Top-n principal directions of the mean-centered points, found by power
/// iteration on the covariance with deflation. Stops early (returning fewer
/// than n vectors) once the remaining variance is numerically zero.
inline ComponentBasis top_principal_components(const std::vector<Vector>& points, std::size_t n_components) {
  if (points.size() < 2) throw Error(ErrorCode::TooFewPoints, "PCA needs at least two points");
  const std::size_t dim = points.front().size();
  if (n_components > dim) throw Error(ErrorCode::InvalidArgument, "more components requested than dimensions");
  ComponentBasis basis;
  basis.dim = dim;
  if (n_components == 0) return basis;

  Vector mean(dim, 0.0);
  for (const auto& p : points) {
    if (p.size() != dim) throw Error(ErrorCode::DimMismatch, "PCA points differ in dimension");
    for (std::size_t j = 0; j < dim; ++j) mean[j] += p[j];
  }
  for (double& m : mean) m /= static_cast<double>(points.size());

  // Dense covariance, row-major. Cheap next to repeated passes over the data.
  std::vector<double> cov(dim * dim, 0.0);
  Vector centered(dim);
  for (const auto& p : points) {
    for (std::size_t j = 0; j < dim; ++j) centered[j] = p[j] - mean[j];
    for (std::size_t r = 0; r < dim; ++r) {
      const double cr = centered[r];
      if (cr == 0.0) continue;
      double* row = cov.data() + r * dim;
      for (std::size_t c = r; c < dim; ++c) row[c] += cr * centered[c];
    }
  }
  const double scale = 1.0 / static_cast<double>(points.size() - 1);
  for (std::size_t r = 0; r < dim; ++r) {
    for (std::size_t c = r; c < dim; ++c) {
      cov[r * dim + c] *= scale;
      cov[c * dim + r] = cov[r * dim + c];
    }
  }
  double trace = 0.0;
  for (std::size_t j = 0; j < dim; ++j) trace += cov[j * dim + j];
  if (!(trace > 1e-300)) throw Error(ErrorCode::DegenerateData, "covariance is numerically zero");

  auto multiply = [&](const Vector& v, Vector& out) {
    for (std::size_t r = 0; r < dim; ++r) {
      const double* row = cov.data() + r * dim;
      double acc = 0.0;
      for (std::size_t c = 0; c < dim; ++c) acc += row[c] * v[c];
      out[r] = acc;
    }
  };
  auto orthogonalize = [&](Vector& v) {
    for (const auto& b : basis.vectors) {
      const double coef = dot(v, b);
      for (std::size_t j = 0; j < dim; ++j) v[j] -= coef * b[j];
    }
  };

  std::mt19937_64 rng(0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vector next(dim);
  for (std::size_t comp = 0; comp < n_components; ++comp) {
    Vector v(dim);
    for (double& x : v) x = gauss(rng);
    orthogonalize(v);
    v = normalize(v);
    double eigenvalue = 0.0;
    for (int iter = 0; iter < 1000; ++iter) {
      multiply(v, next);
      orthogonalize(next);
      const double len = norm(next);
      if (!(len > 1e-14 * trace)) {
        eigenvalue = 0.0;
        break;
      }
      for (double& x : next) x /= len;
      eigenvalue = len;
      double delta = 0.0;
      for (std::size_t j = 0; j < dim; ++j) delta = std::max(delta, std::abs(next[j] - v[j]));
      v.swap(next);
      if (delta < 1e-10) break;
    }
    if (!(eigenvalue > 1e-12 * trace)) break;

    std::size_t big = 0;
    for (std::size_t j = 1; j < dim; ++j) {
      if (std::abs(v[j]) > std::abs(v[big])) big = j;
    }
    if (v[big] < 0.0) {
      for (double& x : v) x = -x;
    }
    // Deflate so the next power iteration sees the remaining spectrum.
    for (std::size_t r = 0; r < dim; ++r) {
      for (std::size_t c = 0; c < dim; ++c) cov[r * dim + c] -= eigenvalue * v[r] * v[c];
    }
    basis.vectors.push_back(std::move(v));
    basis.eigenvalues.push_back(eigenvalue);
  }
  return basis;
}

}  // namespace geomark
