#pragma once

// Slow, obviously-correct reference implementations the library is checked
// against. Nothing here calls into the code under test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Vec = std::vector<double>;

inline double dist(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Greedy maximin recomputed from scratch at every step.
inline std::vector<std::string> fps(const std::vector<std::string>& ids, const std::vector<Vec>& pts,
                                    const std::string& target, std::size_t k) {
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == target) chosen.push_back(i);
  std::vector<std::string> out;
  while (out.size() < k) {
    std::size_t best = ids.size();
    double best_gap = -1.0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      double gap = INFINITY;
      for (auto c : chosen) gap = std::min(gap, dist(pts[i], pts[c]));
      if (gap > best_gap || (gap == best_gap && ids[i] < ids[best])) {
        best = i;
        best_gap = gap;
      }
    }
    chosen.push_back(best);
    out.push_back(ids[best]);
  }
  return out;
}

/// sup_t (F_benign(t) - F_backdoor(t)) evaluated at every sample point.
inline double ks_statistic(const Vec& backdoor, const Vec& benign) {
  double d = 0.0;
  auto cdf = [](const Vec& xs, double t) {
    return static_cast<double>(std::count_if(xs.begin(), xs.end(), [t](double x) { return x <= t; })) /
           static_cast<double>(xs.size());
  };
  for (const auto* xs : {&backdoor, &benign})
    for (double t : *xs) d = std::max(d, cdf(benign, t) - cdf(backdoor, t));
  return d;
}

struct Permutation {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// Label-shuffling p-value with the usual +1 correction. The pooled values
/// are sorted once; each round only shuffles the group labels.
inline Permutation ks_permutation(const Vec& backdoor, const Vec& benign, std::size_t rounds, std::uint64_t seed) {
  Permutation r;
  r.statistic = ks_statistic(backdoor, benign);
  Vec pool = backdoor;
  pool.insert(pool.end(), benign.begin(), benign.end());
  std::sort(pool.begin(), pool.end());
  std::vector<char> label(pool.size(), 0);
  std::fill(label.begin(), label.begin() + static_cast<std::ptrdiff_t>(backdoor.size()), 1);
  const double m = static_cast<double>(backdoor.size());
  const double n = static_cast<double>(benign.size());
  std::mt19937_64 rng(seed);
  std::size_t hits = 0;
  for (std::size_t k = 0; k < rounds; ++k) {
    std::shuffle(label.begin(), label.end(), rng);
    double d = 0.0, b = 0.0, c = 0.0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      (label[i] ? b : c) += 1.0;
      if (i + 1 < pool.size() && pool[i + 1] == pool[i]) continue;
      d = std::max(d, c / n - b / m);
    }
    if (d >= r.statistic - 1e-12) ++hits;
  }
  r.p_value = static_cast<double>(hits + 1) / static_cast<double>(rounds + 1);
  return r;
}

struct KsCase {
  Vec backdoor;
  Vec benign;
  Permutation oracle;
};

/// Small two-sample problems with a random location shift, kept when the
/// permutation p-value lands in [p_lo, p_hi].
inline std::vector<KsCase> ks_cases(std::size_t count, double p_lo, double p_hi, std::size_t rounds,
                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> size(10, 40);
  std::uniform_real_distribution<double> shift(0.0, 1.2);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<KsCase> out;
  while (out.size() < count) {
    KsCase c;
    const double s = shift(rng);
    c.backdoor.resize(size(rng));
    c.benign.resize(size(rng));
    for (auto& x : c.backdoor) x = g(rng) + s;
    for (auto& x : c.benign) x = g(rng);
    c.oracle = ks_permutation(c.backdoor, c.benign, rounds, rng());
    if (c.oracle.p_value >= p_lo && c.oracle.p_value <= p_hi) out.push_back(std::move(c));
  }
  return out;
}

/// Eigenvectors of the sample covariance, largest eigenvalue first.
inline std::vector<Vec> principal_axes(const std::vector<Vec>& pts) {
  const auto n = static_cast<Eigen::Index>(pts.size());
  const auto d = static_cast<Eigen::Index>(pts.front().size());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = pts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  x.rowwise() -= x.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(x.transpose() * x / static_cast<double>(n - 1));
  std::vector<Vec> axes;
  for (Eigen::Index c = d - 1; c >= 0; --c) {
    Vec v(static_cast<std::size_t>(d));
    for (Eigen::Index j = 0; j < d; ++j) v[static_cast<std::size_t>(j)] = es.eigenvectors()(j, c);
    axes.push_back(v);
  }
  return axes;
}

/// Angle in degrees between two lines through the origin (sign ignored).
inline double line_angle_deg(const Vec& a, const Vec& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double c = std::min(1.0, std::abs(ab) / std::sqrt(aa * bb));
  return std::acos(c) * 180.0 / M_PI;
}

/// Anisotropic Gaussian cloud: axis j of a random rotation gets std scales[j].
inline std::vector<Vec> anisotropic_cloud(std::size_t n, const Vec& scales, std::uint64_t seed) {
  const auto d = static_cast<Eigen::Index>(scales.size());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(d, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
  std::vector<Vec> pts;
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd z(d);
    for (Eigen::Index j = 0; j < d; ++j) z(j) = g(rng) * scales[static_cast<std::size_t>(j)];
    const Eigen::VectorXd x = q * z;
    pts.emplace_back(x.data(), x.data() + d);
  }
  return pts;
}

}  // namespace oracle
