#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "geomark/embedding_set.hpp"
#include "geomark/error.hpp"
#include "geomark/extraction.hpp"
#include "geomark/vecmath.hpp"
#include "geomark/watermark.hpp"

namespace geomark {

struct CseConfig {
  std::size_t n_components = 20;
  std::size_t n_clusters = 50;
  double selection_fraction = 0.25;
  std::size_t max_iters = 100;
  std::uint64_t seed = 0;
};

struct CseOutcome {
  EmbeddingSet cleansed;
  ComponentBasis removed_basis;
  std::vector<std::string> suspected_ids;
  /// Set when PCA ran out of variance before n_components directions.
  bool degenerate = false;
};

/// Clustering, Selection, Elimination.
///
/// Clustering: k-means over the copied (protected) vectors.
/// Selection: within each cluster, rank members by cosine to the cluster
/// centroid, once in the copied space and once in the attacker's reference
/// space; members whose copied rank falls furthest behind their reference
/// rank are suspected (top `selection_fraction` per cluster).
/// Elimination: PCA over the suspected deviations (copied - reference),
/// projected out of every copied vector, which is then renormalized.
inline CseOutcome cse_attack(const EmbeddingSet& copied, const EmbeddingSet& reference, const CseConfig& cfg) {
  if (cfg.n_components < 1) throw Error(ErrorCode::InvalidArgument, "n_components must be at least 1");
  if (cfg.n_clusters < 2) throw Error(ErrorCode::InvalidArgument, "n_clusters must be at least 2");
  if (!(cfg.selection_fraction > 0.0 && cfg.selection_fraction < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "selection_fraction must lie in (0,1)");
  }
  if (copied.size() != reference.size()) throw Error(ErrorCode::IdMismatch, "copied and reference sets differ in size");
  if (copied.dim() != reference.dim()) throw Error(ErrorCode::DimMismatch, "copied and reference dims differ");
  for (const auto& id : copied.ids()) {
    if (!reference.contains(id)) throw Error(ErrorCode::IdMismatch, "reference lacks id '" + id + "'");
  }
  if (copied.size() < cfg.n_clusters) {
    throw Error(ErrorCode::TooFewPoints, std::to_string(copied.size()) + " vectors for " +
                                             std::to_string(cfg.n_clusters) + " clusters");
  }

  const std::size_t n = copied.size();
  const std::size_t dim = copied.dim();
  const auto km = kmeans(copied.vectors(), cfg.n_clusters, cfg.max_iters, cfg.seed);

  std::vector<std::vector<std::size_t>> members(cfg.n_clusters);
  for (std::size_t i = 0; i < n; ++i) members[km.assignments[i]].push_back(i);

  CseOutcome out;
  std::vector<Vector> deviations;
  for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
    const auto& idx = members[c];
    if (idx.empty()) continue;
    Vector ref_centroid(dim, 0.0);
    for (auto i : idx) {
      const auto& r = reference.at(copied.id(i));
      for (std::size_t j = 0; j < dim; ++j) ref_centroid[j] += r[j];
    }
    std::vector<double> sim_copy(idx.size());
    std::vector<double> sim_ref(idx.size());
    for (std::size_t m = 0; m < idx.size(); ++m) {
      sim_copy[m] = cosine(copied.vector(idx[m]), km.centroids[c]);
      sim_ref[m] = cosine(reference.at(copied.id(idx[m])), ref_centroid);
    }
    auto ranks = [&](const std::vector<double>& sim) {
      std::vector<std::size_t> order(sim.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
      std::vector<double> rank(sim.size());
      for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = static_cast<double>(r);
      return rank;
    };
    const auto rank_copy = ranks(sim_copy);
    const auto rank_ref = ranks(sim_ref);

    std::vector<std::size_t> order(idx.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double da = rank_copy[a] - rank_ref[a];
      const double db = rank_copy[b] - rank_ref[b];
      if (da != db) return da > db;
      return copied.id(idx[a]) < copied.id(idx[b]);
    });
    const auto take = static_cast<std::size_t>(std::ceil(cfg.selection_fraction * static_cast<double>(idx.size())));
    for (std::size_t r = 0; r < std::min(take, idx.size()); ++r) {
      const auto i = idx[order[r]];
      out.suspected_ids.push_back(copied.id(i));
      const auto& ref = reference.at(copied.id(i));
      Vector dev(dim);
      for (std::size_t j = 0; j < dim; ++j) dev[j] = copied.vector(i)[j] - ref[j];
      deviations.push_back(std::move(dev));
    }
  }
  if (deviations.size() < 2) throw Error(ErrorCode::TooFewPoints, "fewer than two suspected vectors");

  out.removed_basis = top_principal_components(deviations, std::min(cfg.n_components, dim));
  out.degenerate = out.removed_basis.size() < cfg.n_components;
  out.cleansed = EmbeddingSet(dim);
  out.cleansed.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.cleansed.add_raw(copied.id(i), normalize(project_out(copied.vector(i), out.removed_basis)));
  }
  return out;
}

/// Cosine between w and its best reconstruction from span(basis), i.e. the
/// norm of the projection of unit w onto that span.
inline double reconstruction_cosine(const ComponentBasis& basis, VectorView w) {
  if (basis.dim != 0 && basis.dim != w.size()) throw Error(ErrorCode::DimMismatch, "basis and target dims differ");
  const Vector unit = normalize(w);
  double acc = 0.0;
  for (const auto& b : basis.vectors) {
    const double c = dot(unit, b);
    acc += c * c;
  }
  return std::clamp(std::sqrt(acc), 0.0, 1.0);
}

inline double cse_reconstruction_cosine(const CseOutcome& outcome, const WatermarkSecret& secret) {
  return reconstruction_cosine(outcome.removed_basis, secret.target_w);
}

/// Rotates every vector's coordinates right by shift (mod dim).
inline EmbeddingSet dimension_shift(const EmbeddingSet& set, std::size_t shift) {
  EmbeddingSet out(set.dim());
  out.reserve(set.size());
  const std::size_t dim = set.dim();
  const std::size_t s = dim == 0 ? 0 : shift % dim;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& v = set.vector(i);
    Vector r(dim);
    for (std::size_t j = 0; j < dim; ++j) r[(j + s) % dim] = v[j];
    out.add_raw(set.id(i), std::move(r));
  }
  return out;
}

/// Keeps the first `keep` coordinates and renormalizes.
inline EmbeddingSet dimension_reduction(const EmbeddingSet& set, std::size_t keep) {
  if (keep < 1 || keep > set.dim()) {
    throw Error(ErrorCode::KeepOutOfRange, "keep=" + std::to_string(keep) + " outside [1," +
                                               std::to_string(set.dim()) + "]");
  }
  EmbeddingSet out(keep);
  out.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& v = set.vector(i);
    out.add_raw(set.id(i), normalize(VectorView(v.data(), keep)));
  }
  return out;
}

inline std::size_t default_shift(std::size_t dim) { return dim / 15; }
inline std::size_t default_keep(std::size_t dim) { return (2 * dim) / 3; }

struct ParaphraseConfig {
  std::size_t k_candidates = 5;
  double sim_threshold = 0.80;
  double noise_scale = 0.5;
  std::uint64_t seed = 0;
};

/// Simulated rewriting: each input is replaced by a random surviving
/// perturbation (provider-space cosine >= threshold), or kept when none survive.
inline Corpus paraphrase_corpus(const Corpus& corpus, const SyntheticProvider& provider, const ParaphraseConfig& cfg) {
  if (cfg.k_candidates < 1) throw Error(ErrorCode::InvalidArgument, "k_candidates must be at least 1");
  if (!(cfg.sim_threshold > 0.0 && cfg.sim_threshold <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "sim_threshold must lie in (0,1]");
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Corpus out;
  out.reserve(corpus.size());
  std::vector<Vector> survivors;
  for (const auto& x : corpus) {
    const Vector base = encode(provider, x.features);
    survivors.clear();
    for (std::size_t c = 0; c < cfg.k_candidates; ++c) {
      Vector cand = x.features;
      for (double& v : cand) v += cfg.noise_scale * gauss(rng);
      if (cosine(base, encode(provider, cand)) >= cfg.sim_threshold) survivors.push_back(std::move(cand));
    }
    if (survivors.empty()) {
      out.push_back(x);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, survivors.size() - 1);
      out.push_back({x.id, survivors[pick(rng)]});
    }
  }
  return out;
}

}  // namespace geomark
