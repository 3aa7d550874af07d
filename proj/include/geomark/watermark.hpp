#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "geomark/embedding_set.hpp"
#include "geomark/error.hpp"
#include "geomark/format.hpp"
#include "geomark/vecmath.hpp"

namespace geomark {

enum class AnchorStrategy { fps, random };

inline std::string to_string(AnchorStrategy s) { return s == AnchorStrategy::fps ? "fps" : "random"; }

inline AnchorStrategy parse_strategy(const std::string& s) {
  if (s == "fps") return AnchorStrategy::fps;
  if (s == "random") return AnchorStrategy::random;
  throw Error(ErrorCode::InvalidArgument, "unknown anchor strategy '" + s + "'");
}

struct WatermarkParams {
  std::size_t k = 5;
  double rho = 0.04;
  double lambda = 0.4;
  AnchorStrategy strategy = AnchorStrategy::fps;
  std::uint64_t seed = 0;
};

/// The provider's secret. Only `target_w`, `anchors` and `radii` are needed
/// online; everything else is provenance.
struct WatermarkSecret {
  std::string target_id;
  Vector target_w;
  std::vector<std::string> anchor_ids;
  std::vector<Vector> anchors;
  std::vector<double> radii;
  double lambda = 0.4;
  double rho = 0.04;
  std::size_t k = 0;
  AnchorStrategy strategy = AnchorStrategy::fps;
  std::uint64_t seed = 0;

  std::size_t dim() const noexcept { return target_w.size(); }
};

struct ProtectionOutcome {
  EmbeddingSet protected_set;
  /// Activated anchor indices, aligned with the set order.
  std::vector<std::vector<std::size_t>> activations;

  std::size_t activated_count() const {
    return static_cast<std::size_t>(
        std::count_if(activations.begin(), activations.end(), [](const auto& a) { return !a.empty(); }));
  }
  double activated_fraction() const {
    return activations.empty() ? 0.0 : static_cast<double>(activated_count()) / static_cast<double>(activations.size());
  }
};

struct VerificationSets {
  std::vector<std::string> backdoor_ids;
  std::vector<std::string> benign_ids;
};

// Initialization ------------------------------------------------------------

inline std::string select_target(const EmbeddingSet& embeddings, std::uint64_t seed) {
  if (embeddings.size() < 2) {
    throw Error(ErrorCode::EmptySet, "need at least two embeddings to pick a target and an anchor");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, embeddings.size() - 1);
  return embeddings.id(pick(rng));
}

/// Greedy maximin selection seeded with the target: each anchor is the
/// embedding farthest from the target and all previously chosen anchors.
/// Ties go to the lexicographically smallest id.
inline std::vector<std::string> fps_anchors(const EmbeddingSet& embeddings, const std::string& target_id,
                                            std::size_t k) {
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be at least 1");
  if (k + 1 > embeddings.size()) {
    throw Error(ErrorCode::TooFewEmbeddings,
                std::to_string(embeddings.size()) + " embeddings cannot supply a target and " + std::to_string(k) +
                    " anchors");
  }
  const auto target = embeddings.find(target_id);
  if (!target) throw Error(ErrorCode::IdMismatch, "target '" + target_id + "' not in set");

  const std::size_t n = embeddings.size();
  std::vector<char> chosen(n, 0);
  chosen[*target] = 1;
  std::vector<double> gap(n);
  for (std::size_t i = 0; i < n; ++i) gap[i] = l2_distance(embeddings.vector(i), embeddings.vector(*target));

  std::vector<std::string> anchors;
  anchors.reserve(k);
  while (anchors.size() < k) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (chosen[i]) continue;
      if (best == n || gap[i] > gap[best] || (gap[i] == gap[best] && embeddings.id(i) < embeddings.id(best))) {
        best = i;
      }
    }
    chosen[best] = 1;
    anchors.push_back(embeddings.id(best));
    const auto& a = embeddings.vector(best);
    for (std::size_t i = 0; i < n; ++i) gap[i] = std::min(gap[i], l2_distance(embeddings.vector(i), a));
  }
  return anchors;
}

/// Ablation: k distinct non-target ids drawn uniformly.
inline std::vector<std::string> random_anchors(const EmbeddingSet& embeddings, const std::string& target_id,
                                               std::size_t k, std::uint64_t seed) {
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be at least 1");
  if (k + 1 > embeddings.size()) {
    throw Error(ErrorCode::TooFewEmbeddings, "not enough embeddings for " + std::to_string(k) + " anchors");
  }
  std::vector<std::size_t> pool;
  pool.reserve(embeddings.size() - 1);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings.id(i) != target_id) pool.push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<std::string> anchors;
  for (std::size_t j = 0; j < k; ++j) {
    std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
    std::swap(pool[j], pool[pick(rng)]);
    anchors.push_back(embeddings.id(pool[j]));
  }
  return anchors;
}

namespace detail {

inline double radius_or_throw(std::vector<double> distances, double rho, std::size_t anchor_index) {
  const double tau = quantile(std::move(distances), rho);
  if (!(tau > 1e-12)) {
    throw Error(ErrorCode::DegenerateRadius, "anchor " + std::to_string(anchor_index) + " calibrated to radius " +
                                                 format_double(tau));
  }
  return tau;
}

}  // namespace detail

/// Radii from the full distance multiset, anchor vectors given explicitly.
/// An anchor that is itself a member of the set sees its zero self-distance
/// here, which can collapse the radius at small rho.
inline std::vector<double> calibrate_radii(const EmbeddingSet& embeddings, const std::vector<Vector>& anchors,
                                           double rho) {
  if (!(rho > 0.0 && rho < 1.0)) throw Error(ErrorCode::RhoOutOfRange, "rho must lie in (0,1)");
  if (embeddings.empty()) throw Error(ErrorCode::EmptyInput, "no embeddings to calibrate against");
  std::vector<double> radii;
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    std::vector<double> d;
    d.reserve(embeddings.size());
    for (const auto& e : embeddings.vectors()) d.push_back(l2_distance(e, anchors[k]));
    radii.push_back(detail::radius_or_throw(std::move(d), rho, k));
  }
  return radii;
}

/// Radii for anchors drawn from the set; each anchor's own entry is left out
/// of its distance multiset.
inline std::vector<double> calibrate_radii(const EmbeddingSet& embeddings, const std::vector<std::string>& anchor_ids,
                                           double rho) {
  if (!(rho > 0.0 && rho < 1.0)) throw Error(ErrorCode::RhoOutOfRange, "rho must lie in (0,1)");
  std::vector<double> radii;
  for (std::size_t k = 0; k < anchor_ids.size(); ++k) {
    const auto self = embeddings.find(anchor_ids[k]);
    if (!self) throw Error(ErrorCode::IdMismatch, "anchor '" + anchor_ids[k] + "' not in set");
    const auto& a = embeddings.vector(*self);
    std::vector<double> d;
    d.reserve(embeddings.size());
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
      if (i != *self) d.push_back(l2_distance(embeddings.vector(i), a));
    }
    if (d.empty()) throw Error(ErrorCode::EmptyInput, "no embeddings besides the anchor");
    radii.push_back(detail::radius_or_throw(std::move(d), rho, k));
  }
  return radii;
}

inline WatermarkSecret initialize_secret(const EmbeddingSet& embeddings, const WatermarkParams& params) {
  if (params.k == 0) throw Error(ErrorCode::InvalidArgument, "k must be at least 1");
  if (!(params.lambda > 0.0)) throw Error(ErrorCode::InvalidArgument, "lambda must be positive");
  if (!(params.rho > 0.0 && params.rho < 1.0)) throw Error(ErrorCode::RhoOutOfRange, "rho must lie in (0,1)");

  WatermarkSecret secret;
  secret.target_id = select_target(embeddings, params.seed);
  secret.target_w = embeddings.at(secret.target_id);
  secret.anchor_ids = params.strategy == AnchorStrategy::fps
                          ? fps_anchors(embeddings, secret.target_id, params.k)
                          : random_anchors(embeddings, secret.target_id, params.k, params.seed ^ 0x5bd1e995ULL);
  for (const auto& id : secret.anchor_ids) secret.anchors.push_back(embeddings.at(id));
  secret.radii = calibrate_radii(embeddings, secret.anchor_ids, params.rho);
  secret.lambda = params.lambda;
  secret.rho = params.rho;
  secret.k = params.k;
  secret.strategy = params.strategy;
  secret.seed = params.seed;
  return secret;
}

// Injection -----------------------------------------------------------------

/// Indices k with ||e - a_k|| <= tau_k. Every anchor is checked, so the cost
/// is K distance evaluations regardless of the outcome.
inline std::vector<std::size_t> activation_set(VectorView e, const WatermarkSecret& secret) {
  if (e.size() != secret.dim()) {
    throw Error(ErrorCode::DimMismatch, "query dim " + std::to_string(e.size()) + " vs secret dim " +
                                            std::to_string(secret.dim()));
  }
  std::vector<std::size_t> active;
  for (std::size_t k = 0; k < secret.anchors.size(); ++k) {
    if (l2_distance(e, secret.anchors[k]) <= secret.radii[k]) active.push_back(k);
  }
  return active;
}

struct Injection {
  Vector embedding;
  std::vector<std::size_t> activated;
};

/// One shared-target pull no matter how many neighborhoods fire.
inline Injection inject(VectorView e_o, const WatermarkSecret& secret) {
  Injection out;
  out.activated = activation_set(e_o, secret);
  if (out.activated.empty()) {
    out.embedding.assign(e_o.begin(), e_o.end());
    return out;
  }
  Vector shifted(e_o.begin(), e_o.end());
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += secret.lambda * secret.target_w[i];
  out.embedding = normalize(shifted);
  return out;
}

inline ProtectionOutcome protect_set(const EmbeddingSet& embeddings, const WatermarkSecret& secret) {
  ProtectionOutcome out;
  out.protected_set = EmbeddingSet(embeddings.dim());
  out.protected_set.reserve(embeddings.size());
  out.activations.reserve(embeddings.size());
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    auto inj = inject(embeddings.vector(i), secret);
    out.protected_set.add_raw(embeddings.id(i), std::move(inj.embedding));
    out.activations.push_back(std::move(inj.activated));
  }
  return out;
}

/// Mean cosine between clean and protected vectors, a utility measure.
inline double mean_fidelity(const EmbeddingSet& clean, const EmbeddingSet& protected_set) {
  if (clean.empty()) return 1.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) acc += cosine(clean.vector(i), protected_set.at(clean.id(i)));
  return acc / static_cast<double>(clean.size());
}

/// Seeded draw of ids whose clean embedding activates (backdoor) and ids that
/// activate nowhere (benign). The target itself is never drawn.
inline VerificationSets build_verification_sets(const EmbeddingSet& embeddings, const WatermarkSecret& secret,
                                                std::size_t n_backdoor, std::size_t n_benign, std::uint64_t seed,
                                                bool allow_empty = false) {
  if (!allow_empty && (n_backdoor == 0 || n_benign == 0)) {
    throw Error(ErrorCode::InvalidArgument, "verification groups must be nonempty");
  }
  std::vector<std::string> backdoor_pool;
  std::vector<std::string> benign_pool;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const auto& id = embeddings.id(i);
    if (id == secret.target_id) continue;
    (activation_set(embeddings.vector(i), secret).empty() ? benign_pool : backdoor_pool).push_back(id);
  }
  if (backdoor_pool.size() < n_backdoor || benign_pool.size() < n_benign) {
    throw Error(ErrorCode::InsufficientSamples,
                "requested " + std::to_string(n_backdoor) + " backdoor / " + std::to_string(n_benign) +
                    " benign, available " + std::to_string(backdoor_pool.size()) + " backdoor / " +
                    std::to_string(benign_pool.size()) + " benign");
  }
  std::mt19937_64 rng(seed);
  auto draw = [&rng](std::vector<std::string>& pool, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
      std::swap(pool[j], pool[pick(rng)]);
    }
    pool.resize(n);
    return pool;
  };
  VerificationSets sets;
  sets.backdoor_ids = draw(backdoor_pool, n_backdoor);
  sets.benign_ids = draw(benign_pool, n_benign);
  return sets;
}

// Persistence ---------------------------------------------------------------

inline std::string secret_to_json(const WatermarkSecret& s) {
  std::ostringstream os;
  os << "{\n";
  os << "  \"version\": 1,\n";
  os << "  \"dim\": " << s.dim() << ",\n";
  os << "  \"target_id\": " << nlohmann::json(s.target_id).dump() << ",\n";
  os << "  \"target_w\": " << format_array(s.target_w) << ",\n";
  os << "  \"anchor_ids\": " << nlohmann::json(s.anchor_ids).dump() << ",\n";
  os << "  \"anchors\": [";
  for (std::size_t k = 0; k < s.anchors.size(); ++k) os << (k ? ",\n    " : "\n    ") << format_array(s.anchors[k]);
  os << "\n  ],\n";
  os << "  \"radii\": " << format_array(s.radii) << ",\n";
  os << "  \"lambda\": " << format_double(s.lambda) << ",\n";
  os << "  \"rho\": " << format_double(s.rho) << ",\n";
  os << "  \"k\": " << s.k << ",\n";
  os << "  \"strategy\": \"" << to_string(s.strategy) << "\",\n";
  os << "  \"seed\": " << s.seed << "\n";
  os << "}\n";
  return os.str();
}

inline WatermarkSecret secret_from_json(const std::string& text) {
  WatermarkSecret s;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("version").get<int>() != 1) throw Error(ErrorCode::CorruptFile, "unsupported secret version");
    s.target_id = j.at("target_id").get<std::string>();
    s.target_w = j.at("target_w").get<Vector>();
    s.anchor_ids = j.at("anchor_ids").get<std::vector<std::string>>();
    s.anchors = j.at("anchors").get<std::vector<Vector>>();
    s.radii = j.at("radii").get<std::vector<double>>();
    s.lambda = j.at("lambda").get<double>();
    s.rho = j.at("rho").get<double>();
    s.k = j.at("k").get<std::size_t>();
    s.strategy = parse_strategy(j.at("strategy").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    const auto dim = j.at("dim").get<std::size_t>();
    if (s.target_w.size() != dim) throw Error(ErrorCode::CorruptFile, "target_w does not match dim");
    for (const auto& a : s.anchors) {
      if (a.size() != dim) throw Error(ErrorCode::CorruptFile, "anchor does not match dim");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptFile, std::string("secret.json: ") + e.what());
  }
  if (s.anchors.size() != s.k || s.radii.size() != s.k || s.anchor_ids.size() != s.k) {
    throw Error(ErrorCode::CorruptFile, "secret.json: anchor, radius and k counts disagree");
  }
  return s;
}

inline std::string secret_fingerprint(const WatermarkSecret& s) { return hex64(fnv1a64(secret_to_json(s))); }

}  // namespace geomark
