#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <thread>

#include "geomark/service.hpp"

using namespace geomark;
using nlohmann::json;

namespace {

struct Proxy {
  SyntheticProvider provider = make_provider(ProviderParams{});
  Corpus corpus = sample_corpus(provider, 2000, 3);
  ProxyState state;

  Proxy() {
    WatermarkParams wp;
    wp.seed = 5;
    state.secret = initialize_secret(encode_corpus(provider, corpus), wp);
    state.provider = provider;
  }

  std::string request(std::size_t from, std::size_t count) const {
    json inputs = json::array();
    for (std::size_t i = from; i < from + count; ++i) {
      inputs.push_back({{"id", corpus[i].id}, {"features", corpus[i].features}});
    }
    return json{{"inputs", inputs}}.dump();
  }
};

const Proxy& proxy() {
  static const Proxy p;
  return p;
}

bool bitwise_equal(const Vector& a, const Vector& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::string error_code(const HttpReply& r) { return json::parse(r.body)["error"]["code"].get<std::string>(); }

}  // namespace

TEST(Handler, OnlineMatchesOfflineBitwise) {
  const auto& p = proxy();
  std::size_t mismatches = 0;
  std::size_t watermarked = 0;
  for (std::size_t start = 0; start < 1000; start += 100) {
    const auto reply = handle_embeddings(p.state, p.request(start, 100));
    ASSERT_EQ(reply.status, 200) << reply.body;
    const auto body = json::parse(reply.body);
    EXPECT_EQ(body["model"], kProxyModelName);
    for (std::size_t i = 0; i < 100; ++i) {
      const auto& item = body["data"][i];
      const auto& x = p.corpus[start + i];
      EXPECT_EQ(item["id"], x.id);
      EXPECT_FALSE(item.contains("watermarked"));
      const auto offline = inject(encode(p.provider, x.features), p.state.secret);
      watermarked += !offline.activated.empty();
      if (!bitwise_equal(item["embedding"].get<Vector>(), offline.embedding)) ++mismatches;
    }
  }
  EXPECT_EQ(mismatches, 0u);
  EXPECT_GT(watermarked, 0u);
}

TEST(Handler, BatchLimitAndBadRequests) {
  auto st = proxy().state;
  st.max_batch = 4;
  const auto big = handle_embeddings(st, proxy().request(0, 5));
  EXPECT_EQ(big.status, 400);
  EXPECT_EQ(error_code(big), "batch_too_large");
  EXPECT_EQ(handle_embeddings(st, proxy().request(0, 4)).status, 200);

  for (const char* body : {"not json", "{}", "{\"inputs\": 3}", "{\"inputs\": [{\"features\": [1]}]}",
                           "{\"inputs\": [{\"id\": \"a\"}]}", "{\"inputs\": [{\"id\": \"a\", \"features\": [\"x\"]}]}"}) {
    const auto r = handle_embeddings(st, body);
    EXPECT_EQ(r.status, 400) << body;
    EXPECT_EQ(error_code(r), "bad_request") << body;
  }
  const auto wrong_dim = handle_embeddings(st, "{\"inputs\": [{\"id\": \"a\", \"features\": [1, 2]}]}");
  EXPECT_EQ(wrong_dim.status, 400);
  EXPECT_EQ(error_code(wrong_dim), "DimMismatch");
}

TEST(Handler, DebugFlagExposesActivation) {
  auto st = proxy().state;
  st.debug_activation = true;
  const auto body = json::parse(handle_embeddings(st, proxy().request(0, 50)).body);
  for (std::size_t i = 0; i < 50; ++i) {
    const auto& x = proxy().corpus[i];
    const bool active = !activation_set(encode(proxy().provider, x.features), st.secret).empty();
    EXPECT_EQ(body["data"][i]["watermarked"].get<bool>(), active);
  }
}

TEST(Handler, TimeoutReturns504) {
  auto st = proxy().state;
  st.request_timeout_ms = 10;
  auto t = std::chrono::steady_clock::time_point{};
  auto clock = [&t] {
    t += std::chrono::milliseconds(7);
    return t;
  };
  const auto r = handle_embeddings(st, proxy().request(0, 5), clock);
  EXPECT_EQ(r.status, 504);
  EXPECT_EQ(error_code(r), "timeout");
}

TEST(Handler, FileBackedUnknownIdIs404) {
  ProxyState st;
  st.secret = proxy().state.secret;
  st.table = encode_corpus(proxy().provider, Corpus(proxy().corpus.begin(), proxy().corpus.begin() + 10));
  const auto ok = handle_embeddings(st, "{\"inputs\": [{\"id\": \"x000001\"}]}");
  EXPECT_EQ(ok.status, 200);
  const auto missing = handle_embeddings(st, "{\"inputs\": [{\"id\": \"nope\"}]}");
  EXPECT_EQ(missing.status, 404);
}

TEST(Handler, Healthz) {
  const auto body = json::parse(handle_healthz(proxy().state).body);
  EXPECT_EQ(body["status"], "ok");
  EXPECT_EQ(body["dim"], 256);
  EXPECT_EQ(body["k"], 5);
  EXPECT_EQ(secret_resident_doubles(proxy().state.secret), 256u + 5 * 256 + 5);
}

TEST(Http, ServesOverLoopback) {
  const auto& p = proxy();
  httplib::Server server;
  register_routes(server, p.state);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  const auto health = client.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);

  const auto res = client.Post("/v1/embeddings", p.request(1000, 20), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto body = json::parse(res->body);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto offline = inject(encode(p.provider, p.corpus[1000 + i].features), p.state.secret);
    EXPECT_TRUE(bitwise_equal(body["data"][i]["embedding"].get<Vector>(), offline.embedding));
  }
  server.stop();
  worker.join();
}

TEST(Config, FileThenEnvironment) {
  const auto cfg = service_config_from_json(json::parse(R"({
    "listen_address": "0.0.0.0:9000", "secret_path": "s.json", "max_batch": 16,
    "provider": {"mode": "file_backed", "embeddings_path": "e.bin"}})"));
  EXPECT_EQ(cfg.listen_address, "0.0.0.0:9000");
  EXPECT_EQ(cfg.provider_mode, ProviderMode::file_backed);
  EXPECT_EQ(cfg.max_batch, 16u);
  auto env = cfg;
  apply_service_env(env, [](const char* k) -> const char* {
    return std::string(k) == "GEOMARK_LISTEN" ? "127.0.0.1:7000" : nullptr;
  });
  EXPECT_EQ(env.listen_address, "127.0.0.1:7000");
  EXPECT_EQ(env.secret_path, "s.json");
  EXPECT_THROW(service_config_from_json(json::parse(R"({"provider": {"mode": "magic"}})")), Error);
  EXPECT_EQ(split_listen_address("127.0.0.1:8080"), (std::pair<std::string, int>{"127.0.0.1", 8080}));
  EXPECT_THROW(split_listen_address("localhost"), Error);
  EXPECT_THROW(split_listen_address("h:99999"), Error);
}

TEST(Config, MakeStateChecksDims) {
  const auto dir = std::filesystem::temp_directory_path() / ("geomark-svc-" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  write_secret(proxy().state.secret, (dir / "secret.json").string());
  ServiceConfig cfg;
  cfg.secret_path = (dir / "secret.json").string();
  EXPECT_EQ(make_proxy_state(cfg).dim(), 256u);
  cfg.synthetic.output_dim = 128;
  EXPECT_THROW(make_proxy_state(cfg), Error);
  cfg.secret_path.clear();
  EXPECT_THROW(make_proxy_state(cfg), Error);
  std::filesystem::remove_all(dir);
}

TEST(Bench, ReportsOrderedPercentiles) {
  const auto secret = make_bench_secret(5, 256, 1);
  const auto r = bench_injection(secret, 2000, 2);
  EXPECT_EQ(r.n_queries, 2000u);
  EXPECT_LE(r.p50_us, r.p95_us);
  EXPECT_LE(r.p95_us, r.p99_us);
  EXPECT_GT(r.mean_us, 0.0);
  EXPECT_GT(r.activated_fraction, 0.5);
  EXPECT_THROW(bench_injection(secret, 999), Error);
  EXPECT_THROW(make_bench_secret(0, 256, 1), Error);
}
