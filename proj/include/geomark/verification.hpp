#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geomark/error.hpp"
#include "geomark/format.hpp"
#include "geomark/vecmath.hpp"
#include "geomark/watermark.hpp"

namespace geomark {

inline constexpr double kDefaultSignificance = 0.05;

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

struct VerificationReport {
  double p_value = 1.0;
  double delta_cos = 0.0;
  double delta_l2 = 0.0;
  double ks_statistic = 0.0;
  std::size_t n_backdoor = 0;
  std::size_t n_benign = 0;
  double threshold = kDefaultSignificance;
  bool verdict = false;
  std::vector<double> per_sample_cos_backdoor;
  std::vector<double> per_sample_cos_benign;
};

namespace detail {

inline void require_nonempty(std::size_t backdoor, std::size_t benign) {
  if (backdoor == 0) throw Error(ErrorCode::EmptyGroup, "backdoor group is empty");
  if (benign == 0) throw Error(ErrorCode::EmptyGroup, "benign group is empty");
}

template <typename Metric>
double group_gap(const std::vector<Vector>& backdoor, const std::vector<Vector>& benign, VectorView w_hat,
                 Metric metric) {
  require_nonempty(backdoor.size(), benign.size());
  double b = 0.0;
  for (const auto& e : backdoor) b += metric(e, w_hat);
  double n = 0.0;
  for (const auto& e : benign) n += metric(e, w_hat);
  return b / static_cast<double>(backdoor.size()) - n / static_cast<double>(benign.size());
}

}  // namespace detail

inline double delta_cos(const std::vector<Vector>& backdoor, const std::vector<Vector>& benign, VectorView w_hat) {
  return detail::group_gap(backdoor, benign, w_hat, [](VectorView a, VectorView b) { return cosine(a, b); });
}

inline double delta_l2(const std::vector<Vector>& backdoor, const std::vector<Vector>& benign, VectorView w_hat) {
  return detail::group_gap(backdoor, benign,
                           w_hat, [](VectorView a, VectorView b) { return l2_unit_distance(a, b); });
}

/// One-sided two-sample Kolmogorov-Smirnov test of "backdoor similarities are
/// stochastically larger than benign ones".
///
/// D = sup_t (F_benign(t) - F_backdoor(t)), clamped at zero, and
/// p = exp(-2 D^2 mn / (m + n)), the asymptotic one-sided tail bound.
inline KsResult ks_one_sided(std::vector<double> backdoor, std::vector<double> benign) {
  detail::require_nonempty(backdoor.size(), benign.size());
  std::sort(backdoor.begin(), backdoor.end());
  std::sort(benign.begin(), benign.end());
  const double m = static_cast<double>(backdoor.size());
  const double n = static_cast<double>(benign.size());

  double d = 0.0;
  std::size_t i = 0;  // backdoor values <= t
  std::size_t j = 0;  // benign values <= t
  while (i < backdoor.size() || j < benign.size()) {
    double t;
    if (j >= benign.size()) t = backdoor[i];
    else if (i >= backdoor.size()) t = benign[j];
    else t = std::min(backdoor[i], benign[j]);
    while (i < backdoor.size() && backdoor[i] <= t) ++i;
    while (j < benign.size() && benign[j] <= t) ++j;
    d = std::max(d, static_cast<double>(j) / n - static_cast<double>(i) / m);
  }
  KsResult r;
  r.statistic = std::clamp(d, 0.0, 1.0);
  r.p_value = std::clamp(std::exp(-2.0 * r.statistic * r.statistic * m * n / (m + n)), 0.0, 1.0);
  return r;
}

using SurrogateQuery = std::function<Vector(const std::string&)>;

/// Queries the suspect for every id and the target, then scores every sample
/// against the suspect's own rendering of the target.
inline VerificationReport verify(const SurrogateQuery& query, const WatermarkSecret& secret,
                                 const std::vector<std::string>& backdoor_ids,
                                 const std::vector<std::string>& benign_ids,
                                 double threshold = kDefaultSignificance) {
  detail::require_nonempty(backdoor_ids.size(), benign_ids.size());
  auto fetch = [&query](const std::string& id) {
    Vector v;
    try {
      v = query(id);
    } catch (const Error& e) {
      throw Error(ErrorCode::QueryFailure, id + " (" + e.what() + ")");
    } catch (const std::exception& e) {
      throw Error(ErrorCode::QueryFailure, id + " (" + e.what() + ")");
    }
    if (v.empty()) throw Error(ErrorCode::QueryFailure, id + " (empty response)");
    if (!all_finite(v)) throw Error(ErrorCode::QueryFailure, id + " (non-finite response)");
    return v;
  };

  const Vector w_hat = fetch(secret.target_id);
  std::vector<Vector> backdoor;
  std::vector<Vector> benign;
  backdoor.reserve(backdoor_ids.size());
  benign.reserve(benign_ids.size());
  for (const auto& id : backdoor_ids) backdoor.push_back(fetch(id));
  for (const auto& id : benign_ids) benign.push_back(fetch(id));

  VerificationReport r;
  r.n_backdoor = backdoor.size();
  r.n_benign = benign.size();
  for (const auto& e : backdoor) r.per_sample_cos_backdoor.push_back(cosine(e, w_hat));
  for (const auto& e : benign) r.per_sample_cos_benign.push_back(cosine(e, w_hat));
  r.delta_cos = delta_cos(backdoor, benign, w_hat);
  r.delta_l2 = delta_l2(backdoor, benign, w_hat);
  const auto ks = ks_one_sided(r.per_sample_cos_backdoor, r.per_sample_cos_benign);
  r.ks_statistic = ks.statistic;
  r.p_value = ks.p_value;
  r.threshold = threshold;
  r.verdict = r.p_value < threshold;
  return r;
}

struct ReportMetadata {
  std::string secret_fingerprint;
  std::string timestamp;
  std::string attack_label = "none";
};

inline nlohmann::json report_to_json(const VerificationReport& r, const ReportMetadata& meta) {
  nlohmann::json j;
  j["p_value"] = r.p_value;
  j["delta_cos"] = r.delta_cos;
  j["delta_l2"] = r.delta_l2;
  j["ks_statistic"] = r.ks_statistic;
  j["n_backdoor"] = r.n_backdoor;
  j["n_benign"] = r.n_benign;
  j["threshold"] = r.threshold;
  j["verdict"] = r.verdict;
  j["per_sample_cos_backdoor"] = r.per_sample_cos_backdoor;
  j["per_sample_cos_benign"] = r.per_sample_cos_benign;
  j["metadata"] = {{"secret_fingerprint", meta.secret_fingerprint},
                   {"timestamp", meta.timestamp},
                   {"attack_label", meta.attack_label}};
  return j;
}

inline VerificationReport report_from_json(const nlohmann::json& j) {
  VerificationReport r;
  r.p_value = j.at("p_value").get<double>();
  r.delta_cos = j.at("delta_cos").get<double>();
  r.delta_l2 = j.at("delta_l2").get<double>();
  r.ks_statistic = j.at("ks_statistic").get<double>();
  r.n_backdoor = j.at("n_backdoor").get<std::size_t>();
  r.n_benign = j.at("n_benign").get<std::size_t>();
  r.threshold = j.value("threshold", kDefaultSignificance);
  r.verdict = j.at("verdict").get<bool>();
  r.per_sample_cos_backdoor = j.at("per_sample_cos_backdoor").get<std::vector<double>>();
  r.per_sample_cos_benign = j.at("per_sample_cos_benign").get<std::vector<double>>();
  return r;
}

inline std::string report_csv_header() {
  return "attack_label,p_value,delta_cos,delta_l2,ks_statistic,n_backdoor,n_benign,verdict";
}

inline std::string report_csv_row(const VerificationReport& r, const ReportMetadata& meta) {
  return meta.attack_label + "," + format_double(r.p_value) + "," + format_double(r.delta_cos) + "," +
         format_double(r.delta_l2) + "," + format_double(r.ks_statistic) + "," + std::to_string(r.n_backdoor) + "," +
         std::to_string(r.n_benign) + "," + (r.verdict ? "true" : "false");
}

}  // namespace geomark
