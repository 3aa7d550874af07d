#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geomark/datastore.hpp"
#include "geomark/error.hpp"
#include "geomark/extraction.hpp"
#include "geomark/vecmath.hpp"
#include "geomark/watermark.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose `_res` macro breaks Eigen.
#include <httplib.h>

namespace geomark {

inline constexpr const char* kProxyModelName = "geomark-proxy/1";

enum class ProviderMode { synthetic, file_backed };

struct ServiceConfig {
  std::string listen_address = "127.0.0.1:8080";
  std::string secret_path;
  ProviderMode provider_mode = ProviderMode::synthetic;
  ProviderParams synthetic;
  std::string embeddings_path;
  std::size_t max_batch = 256;
  std::size_t request_timeout_ms = 30000;
  /// Adds the per-item `watermarked` field. Off in production: it leaks
  /// neighborhood membership.
  bool debug_activation = false;
};

inline ServiceConfig service_config_from_json(const nlohmann::json& j, ServiceConfig base = {}) {
  base.listen_address = j.value("listen_address", base.listen_address);
  base.secret_path = j.value("secret_path", base.secret_path);
  if (j.contains("provider")) {
    const auto& p = j.at("provider");
    const auto mode = p.value("mode", std::string("synthetic"));
    if (mode == "synthetic") {
      base.provider_mode = ProviderMode::synthetic;
      base.synthetic.seed = p.value("seed", base.synthetic.seed);
      base.synthetic.input_dim = p.value("input_dim", base.synthetic.input_dim);
      base.synthetic.output_dim = p.value("output_dim", base.synthetic.output_dim);
      base.synthetic.n_modes = p.value("n_modes", base.synthetic.n_modes);
    } else if (mode == "file_backed") {
      base.provider_mode = ProviderMode::file_backed;
      base.embeddings_path = p.at("embeddings_path").get<std::string>();
    } else {
      throw Error(ErrorCode::InvalidArgument, "unknown provider mode '" + mode + "'");
    }
  }
  base.max_batch = j.value("max_batch", base.max_batch);
  base.request_timeout_ms = j.value("request_timeout_ms", base.request_timeout_ms);
  base.debug_activation = j.value("debug_activation", base.debug_activation);
  return base;
}

/// Environment layer: GEOMARK_SECRET and GEOMARK_LISTEN override the file.
inline void apply_service_env(ServiceConfig& cfg,
                              const std::function<const char*(const char*)>& getenv_fn = [](const char* k) {
                                return std::getenv(k);
                              }) {
  if (const char* s = getenv_fn("GEOMARK_SECRET"); s && *s) cfg.secret_path = s;
  if (const char* s = getenv_fn("GEOMARK_LISTEN"); s && *s) cfg.listen_address = s;
}

inline std::pair<std::string, int> split_listen_address(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos || colon + 1 == addr.size()) {
    throw Error(ErrorCode::InvalidArgument, "listen address '" + addr + "' is not host:port");
  }
  int port = 0;
  try {
    port = std::stoi(addr.substr(colon + 1));
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidArgument, "bad port in '" + addr + "'");
  }
  if (port < 0 || port > 65535) throw Error(ErrorCode::InvalidArgument, "port out of range in '" + addr + "'");
  return {addr.substr(0, colon), port};
}

/// Immutable state shared read-only by every request handler.
struct ProxyState {
  WatermarkSecret secret;
  std::optional<SyntheticProvider> provider;
  std::optional<EmbeddingSet> table;
  std::size_t max_batch = 256;
  std::size_t request_timeout_ms = 30000;
  bool debug_activation = false;

  std::size_t dim() const { return secret.dim(); }

  /// Clean provider embedding for one input.
  Vector embed(const std::string& id, const std::vector<double>& features) const {
    if (provider) return encode(*provider, features);
    if (!table->contains(id)) throw Error(ErrorCode::IdMismatch, "unknown id '" + id + "'");
    return table->at(id);
  }
};

inline ProxyState make_proxy_state(const ServiceConfig& cfg) {
  if (cfg.max_batch < 1) throw Error(ErrorCode::InvalidArgument, "max_batch must be at least 1");
  if (cfg.secret_path.empty()) throw Error(ErrorCode::InvalidArgument, "no secret path configured");
  ProxyState st;
  st.secret = read_secret(cfg.secret_path);
  if (cfg.provider_mode == ProviderMode::synthetic) {
    st.provider = make_provider(cfg.synthetic);
    if (st.provider->output_dim != st.secret.dim()) {
      throw Error(ErrorCode::DimMismatch, "provider dim " + std::to_string(st.provider->output_dim) +
                                              " vs secret dim " + std::to_string(st.secret.dim()));
    }
  } else {
    st.table = read_embeddings(cfg.embeddings_path);
    if (st.table->dim() != st.secret.dim()) {
      throw Error(ErrorCode::DimMismatch, "embeddings dim " + std::to_string(st.table->dim()) + " vs secret dim " +
                                              std::to_string(st.secret.dim()));
    }
  }
  st.max_batch = cfg.max_batch;
  st.request_timeout_ms = cfg.request_timeout_ms;
  st.debug_activation = cfg.debug_activation;
  return st;
}

/// Doubles held by the secret at serving time: one target, K anchors, K radii.
inline std::size_t secret_resident_doubles(const WatermarkSecret& s) {
  std::size_t n = s.target_w.size() + s.radii.size();
  for (const auto& a : s.anchors) n += a.size();
  return n;
}

struct HttpReply {
  int status = 200;
  std::string body;
};

inline HttpReply error_reply(int status, const std::string& code, const std::string& message) {
  return {status, nlohmann::json{{"error", {{"code", code}, {"message", message}}}}.dump()};
}

/// POST /v1/embeddings, independent of the HTTP layer. The clock is injectable
/// so the timeout path is testable.
inline HttpReply handle_embeddings(const ProxyState& st, const std::string& body,
                                   const std::function<std::chrono::steady_clock::time_point()>& now =
                                       [] { return std::chrono::steady_clock::now(); }) {
  const auto start = now();
  nlohmann::json req;
  try {
    req = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    return error_reply(400, "bad_request", std::string("malformed JSON: ") + e.what());
  }
  if (!req.is_object() || !req.contains("inputs") || !req["inputs"].is_array()) {
    return error_reply(400, "bad_request", "body must be an object with an \"inputs\" array");
  }
  const auto& inputs = req["inputs"];
  if (inputs.size() > st.max_batch) {
    return error_reply(400, "batch_too_large",
                       "batch too large: " + std::to_string(inputs.size()) + " > " + std::to_string(st.max_batch));
  }

  nlohmann::json data = nlohmann::json::array();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& item = inputs[i];
    const std::string where = "inputs[" + std::to_string(i) + "]";
    if (!item.is_object() || !item.contains("id") || !item["id"].is_string()) {
      return error_reply(400, "bad_request", where + " needs a string id");
    }
    std::vector<double> features;
    if (item.contains("features")) {
      if (!item["features"].is_array()) return error_reply(400, "bad_request", where + ".features must be an array");
      for (const auto& x : item["features"]) {
        if (!x.is_number()) return error_reply(400, "bad_request", where + ".features must be numeric");
        features.push_back(x.get<double>());
      }
    } else if (st.provider) {
      return error_reply(400, "bad_request", where + " needs features");
    }
    const auto id = item["id"].get<std::string>();
    Injection inj;
    try {
      inj = inject(st.embed(id, features), st.secret);
    } catch (const Error& e) {
      const int status = e.code() == ErrorCode::IdMismatch ? 404 : 400;
      return error_reply(status, std::string(to_string(e.code())), where + ": " + e.what());
    }
    nlohmann::json out{{"id", id}, {"embedding", inj.embedding}};
    if (st.debug_activation) out["watermarked"] = !inj.activated.empty();
    data.push_back(std::move(out));
    if (now() - start > std::chrono::milliseconds(st.request_timeout_ms)) {
      return error_reply(504, "timeout", "request exceeded " + std::to_string(st.request_timeout_ms) + " ms");
    }
  }
  return {200, nlohmann::json{{"model", kProxyModelName}, {"data", std::move(data)}}.dump()};
}

inline HttpReply handle_healthz(const ProxyState& st) {
  return {200, nlohmann::json{{"status", "ok"}, {"dim", st.dim()}, {"k", st.secret.anchors.size()}}.dump()};
}

inline void register_routes(httplib::Server& server, const ProxyState& st) {
  server.Post("/v1/embeddings", [&st](const httplib::Request& req, httplib::Response& res) {
    HttpReply r;
    try {
      r = handle_embeddings(st, req.body);
    } catch (const std::exception& e) {
      r = error_reply(500, "internal", e.what());
    }
    res.status = r.status;
    res.set_content(r.body, "application/json");
  });
  server.Get("/healthz", [&st](const httplib::Request&, httplib::Response& res) {
    const auto r = handle_healthz(st);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  });
}

/// Binds and blocks until `server.stop()`. Startup problems throw.
inline void serve(const ServiceConfig& cfg, httplib::Server& server, std::ostream& log = std::cerr) {
  const ProxyState st = make_proxy_state(cfg);
  const auto [host, port] = split_listen_address(cfg.listen_address);
  log << "geomark-proxy: dim=" << st.dim() << " k=" << st.secret.anchors.size()
      << " secret_resident_doubles=" << secret_resident_doubles(st.secret) << " ("
      << secret_resident_doubles(st.secret) * sizeof(double) << " bytes)"
      << " provider=" << (st.provider ? "synthetic" : "file_backed") << " max_batch=" << st.max_batch
      << (st.debug_activation ? " debug_activation=on" : "") << "\n";
  register_routes(server, st);
  const auto ms = static_cast<time_t>(cfg.request_timeout_ms);
  server.set_read_timeout(ms / 1000, static_cast<time_t>((ms % 1000) * 1000));
  server.set_write_timeout(ms / 1000, static_cast<time_t>((ms % 1000) * 1000));
  if (!server.bind_to_port(host, port)) {
    throw Error(ErrorCode::IoError, "cannot bind " + cfg.listen_address);
  }
  log << "geomark-proxy: listening on " << cfg.listen_address << "\n";
  server.listen_after_bind();
}

// Benchmark -----------------------------------------------------------------

struct LatencyReport {
  std::size_t n_queries = 0;
  std::size_t dim = 0;
  std::size_t k = 0;
  double mean_us = 0.0;
  double p50_us = 0.0;
  double p95_us = 0.0;
  double p99_us = 0.0;
  double activated_fraction = 0.0;
};

inline nlohmann::json latency_to_json(const LatencyReport& r) {
  return {{"n_queries", r.n_queries}, {"dim", r.dim},         {"k", r.k},
          {"mean_us", r.mean_us},     {"p50_us", r.p50_us},   {"p95_us", r.p95_us},
          {"p99_us", r.p99_us},       {"activated_fraction", r.activated_fraction}};
}

/// Random secret for timing: unit target and anchors with radius sqrt(2),
/// which a random unit query meets about half the time per anchor.
inline WatermarkSecret make_bench_secret(std::size_t k, std::size_t dim, std::uint64_t seed) {
  if (k < 1 || dim < 2) throw Error(ErrorCode::BadDims, "bench secret needs k >= 1 and dim >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto unit = [&] {
    Vector v(dim);
    for (auto& x : v) x = gauss(rng);
    return normalize(v);
  };
  WatermarkSecret s;
  s.target_id = "bench-target";
  s.target_w = unit();
  for (std::size_t i = 0; i < k; ++i) {
    s.anchor_ids.push_back("bench-anchor-" + std::to_string(i));
    s.anchors.push_back(unit());
    s.radii.push_back(std::sqrt(2.0));
  }
  s.k = k;
  s.seed = seed;
  return s;
}

/// Times the watermark step alone (activation + injection) over `n_queries`
/// random unit queries; query generation and bookkeeping are outside the clock.
inline LatencyReport bench_injection(const WatermarkSecret& secret, std::size_t n_queries, std::uint64_t seed = 1) {
  if (n_queries < 1000) throw Error(ErrorCode::InvalidArgument, "bench_injection needs at least 1000 queries");
  const std::size_t dim = secret.dim();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  constexpr std::size_t kPool = 256;
  std::vector<Vector> pool(kPool, Vector(dim));
  for (auto& v : pool) {
    for (auto& x : v) x = gauss(rng);
    v = normalize(v);
  }
  // Warm caches and the allocator before measuring.
  for (std::size_t i = 0; i < kPool; ++i) (void)inject(pool[i], secret);

  std::vector<double> us(n_queries);
  std::size_t activated = 0;
  double sink = 0.0;
  for (std::size_t i = 0; i < n_queries; ++i) {
    const auto& q = pool[i % kPool];
    const auto t0 = std::chrono::steady_clock::now();
    const auto inj = inject(q, secret);
    const auto t1 = std::chrono::steady_clock::now();
    us[i] = std::chrono::duration<double, std::micro>(t1 - t0).count();
    activated += !inj.activated.empty();
    sink += inj.embedding[i % dim];
  }
  if (!std::isfinite(sink)) throw Error(ErrorCode::DegenerateData, "non-finite benchmark output");

  LatencyReport r;
  r.n_queries = n_queries;
  r.dim = dim;
  r.k = secret.anchors.size();
  double total = 0.0;
  for (double u : us) total += u;
  r.mean_us = total / static_cast<double>(n_queries);
  std::sort(us.begin(), us.end());
  auto pct = [&us](double q) {
    const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(us.size()))) - 1;
    return us[std::min(idx, us.size() - 1)];
  };
  r.p50_us = pct(0.50);
  r.p95_us = pct(0.95);
  r.p99_us = pct(0.99);
  r.activated_fraction = static_cast<double>(activated) / static_cast<double>(n_queries);
  return r;
}

}  // namespace geomark
