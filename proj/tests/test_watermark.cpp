#include <gtest/gtest.h>

#include <map>
#include <random>

#include "geomark/watermark.hpp"
#include "oracles.hpp"

using namespace geomark;

namespace {

EmbeddingSet random_sphere(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  EmbeddingSet set(dim);
  for (std::size_t i = 0; i < n; ++i) {
    Vector v(dim);
    for (auto& x : v) x = g(rng);
    char id[32];
    std::snprintf(id, sizeof id, "e%05zu", i);
    set.add(id, v);
  }
  return set;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no geomark::Error thrown";
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST(Fps, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> size(10, 200);
  std::uniform_int_distribution<std::size_t> kk(1, 8);
  std::uniform_int_distribution<std::size_t> dd(2, 24);
  for (int instance = 0; instance < 100; ++instance) {
    const auto set = random_sphere(size(rng), dd(rng), 1000 + instance);
    const auto k = kk(rng);
    const auto target = set.id(std::uniform_int_distribution<std::size_t>(0, set.size() - 1)(rng));
    EXPECT_EQ(fps_anchors(set, target, k), oracle::fps(set.ids(), set.vectors(), target, k)) << "instance " << instance;
  }
}

TEST(Fps, TiesGoToSmallestId) {
  EmbeddingSet set(2);
  set.add("t", Vector{1.0, 0.0});
  set.add("z", Vector{0.0, 1.0});
  set.add("b", Vector{0.0, -1.0});
  set.add("y", Vector{0.0, 1.0});
  EXPECT_EQ(fps_anchors(set, "t", 1), std::vector<std::string>{"b"});
  EXPECT_EQ(fps_anchors(set, "t", 2), (std::vector<std::string>{"b", "y"}));
}

TEST(Fps, RejectsImpossibleRequests) {
  const auto set = random_sphere(5, 3, 1);
  EXPECT_EQ(code_of([&] { fps_anchors(set, set.id(0), 5); }), ErrorCode::TooFewEmbeddings);
  EXPECT_EQ(code_of([&] { fps_anchors(set, set.id(0), 0); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([&] { fps_anchors(set, "missing", 2); }), ErrorCode::IdMismatch);
}

TEST(Fps, SpreadsFartherThanRandomAnchors) {
  const auto set = random_sphere(500, 8, 3);
  const auto target = set.id(0);
  auto min_gap = [&](const std::vector<std::string>& anchors) {
    double m = INFINITY;
    for (const auto& a : anchors) m = std::min(m, l2_distance(set.at(a), set.at(target)));
    return m;
  };
  for (std::uint64_t s = 1; s <= 5; ++s) {
    EXPECT_GT(min_gap(fps_anchors(set, target, 5)), min_gap(random_anchors(set, target, 5, s)));
  }
}

TEST(RandomAnchors, DistinctAndExcludeTarget) {
  const auto set = random_sphere(30, 4, 5);
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto a = random_anchors(set, set.id(3), 8, s);
    EXPECT_EQ(a.size(), 8u);
    EXPECT_EQ(std::count(a.begin(), a.end(), set.id(3)), 0);
    std::sort(a.begin(), a.end());
    EXPECT_EQ(std::unique(a.begin(), a.end()), a.end());
  }
}

TEST(Target, UniformOverIds) {
  const auto set = random_sphere(10, 3, 7);
  std::map<std::string, int> counts;
  const int draws = 5000;
  for (int s = 0; s < draws; ++s) counts[select_target(set, static_cast<std::uint64_t>(s))]++;
  ASSERT_EQ(counts.size(), 10u);
  double chi2 = 0.0;
  const double expected = draws / 10.0;
  for (const auto& [id, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 27.88);  // chi-square, 9 dof, upper 0.001 point
}

TEST(Radii, CoverCeilRhoNOthers) {
  const auto set = random_sphere(777, 6, 9);
  for (double rho : {0.005, 0.01, 0.02, 0.04, 0.1}) {
    const auto anchors = fps_anchors(set, set.id(0), 5);
    const auto radii = calibrate_radii(set, anchors, rho);
    for (std::size_t k = 0; k < anchors.size(); ++k) {
      std::vector<double> d;
      for (std::size_t i = 0; i < set.size(); ++i)
        if (set.id(i) != anchors[k]) d.push_back(oracle::dist(set.vector(i), set.at(anchors[k])));
      std::sort(d.begin(), d.end());
      const auto rank = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(d.size()) - 1e-9));
      EXPECT_NEAR(radii[k], d[rank - 1], 1e-12);
      const auto inside = std::count_if(d.begin(), d.end(), [&](double x) { return x <= radii[k] + 1e-12; });
      EXPECT_EQ(static_cast<std::size_t>(inside), rank);
    }
  }
}

TEST(Radii, ExplicitAnchorsSeeSelfDistance) {
  const auto set = random_sphere(100, 4, 10);
  const auto radii = calibrate_radii(set, std::vector<Vector>{set.vector(0)}, 0.05);
  std::vector<double> d;
  for (const auto& v : set.vectors()) d.push_back(oracle::dist(v, set.vector(0)));
  std::sort(d.begin(), d.end());
  EXPECT_NEAR(radii[0], d[4], 1e-12);
}

TEST(Radii, DegenerateRadiusRaised) {
  EmbeddingSet set(2);
  for (int i = 0; i < 10; ++i) set.add("d" + std::to_string(i), Vector{1.0, 0.0});
  set.add("far", Vector{0.0, 1.0});
  EXPECT_EQ(code_of([&] { calibrate_radii(set, std::vector<std::string>{"d0"}, 0.2); }), ErrorCode::DegenerateRadius);
}

TEST(Secret, InitializeValidatesParameters) {
  const auto set = random_sphere(50, 4, 11);
  WatermarkParams p;
  p.rho = 1.0;
  EXPECT_EQ(code_of([&] { initialize_secret(set, p); }), ErrorCode::RhoOutOfRange);
  p = {};
  p.k = 0;
  EXPECT_EQ(code_of([&] { initialize_secret(set, p); }), ErrorCode::InvalidArgument);
  p = {};
  p.k = 60;
  EXPECT_EQ(code_of([&] { initialize_secret(set, p); }), ErrorCode::TooFewEmbeddings);
  EXPECT_EQ(code_of([&] { initialize_secret(EmbeddingSet(4), WatermarkParams{}); }), ErrorCode::EmptySet);
}

TEST(Secret, DeterministicAndJsonRoundTrip) {
  const auto set = random_sphere(400, 8, 12);
  WatermarkParams p;
  p.seed = 77;
  const auto a = initialize_secret(set, p);
  const auto b = initialize_secret(set, p);
  EXPECT_EQ(secret_to_json(a), secret_to_json(b));
  const auto c = secret_from_json(secret_to_json(a));
  EXPECT_EQ(c.target_w, a.target_w);
  EXPECT_EQ(c.anchors, a.anchors);
  EXPECT_EQ(c.radii, a.radii);
  EXPECT_EQ(c.anchor_ids, a.anchor_ids);
  EXPECT_EQ(secret_fingerprint(c), secret_fingerprint(a));
  EXPECT_EQ(code_of([] { secret_from_json("{\"version\": 1}"); }), ErrorCode::CorruptFile);
}

TEST(Injection, MatchesClosedForm) {
  const auto set = random_sphere(300, 5, 13);
  const auto secret = initialize_secret(set, WatermarkParams{});
  std::size_t activated = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& e = set.vector(i);
    bool inside = false;
    for (std::size_t k = 0; k < secret.k; ++k) inside |= oracle::dist(e, secret.anchors[k]) <= secret.radii[k];
    const auto inj = inject(e, secret);
    EXPECT_EQ(!inj.activated.empty(), inside);
    if (!inside) {
      EXPECT_EQ(inj.embedding, e);
      continue;
    }
    ++activated;
    Vector expect(e.size());
    for (std::size_t j = 0; j < e.size(); ++j) expect[j] = e[j] + secret.lambda * secret.target_w[j];
    const double n = oracle::dist(expect, Vector(e.size(), 0.0));
    for (std::size_t j = 0; j < e.size(); ++j) EXPECT_NEAR(inj.embedding[j], expect[j] / n, 1e-12);
    EXPECT_NEAR(norm(inj.embedding), 1.0, 1e-12);
  }
  EXPECT_GT(activated, 0u);
  EXPECT_LE(activated, static_cast<std::size_t>(secret.k * std::ceil(secret.rho * set.size())) + secret.k);
}

TEST(Injection, DimMismatchRaised) {
  const auto set = random_sphere(50, 4, 14);
  const auto secret = initialize_secret(set, WatermarkParams{});
  EXPECT_EQ(code_of([&] { inject(Vector(5, 0.5), secret); }), ErrorCode::DimMismatch);
}

TEST(Injection, FidelityBoundedBelow) {
  const auto set = random_sphere(2000, 64, 15);
  WatermarkParams p;
  p.seed = 3;
  const auto secret = initialize_secret(set, p);
  const auto out = protect_set(set, secret);
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (out.activations[i].empty()) continue;
    EXPECT_GE(cosine(set.vector(i), out.protected_set.vector(i)), std::sqrt(1.0 - 0.16) - 1e-12);
  }
  EXPECT_GT(mean_fidelity(set, out.protected_set), 0.97);
}

TEST(VerificationSets, DisjointSeededAndCorrectlyLabelled) {
  const auto set = random_sphere(1000, 6, 16);
  const auto secret = initialize_secret(set, WatermarkParams{});
  const auto a = build_verification_sets(set, secret, 40, 60, 9);
  const auto b = build_verification_sets(set, secret, 40, 60, 9);
  EXPECT_EQ(a.backdoor_ids, b.backdoor_ids);
  EXPECT_EQ(a.benign_ids, b.benign_ids);
  EXPECT_EQ(a.backdoor_ids.size(), 40u);
  EXPECT_EQ(a.benign_ids.size(), 60u);
  for (const auto& id : a.backdoor_ids) {
    EXPECT_FALSE(activation_set(set.at(id), secret).empty());
    EXPECT_NE(id, secret.target_id);
  }
  for (const auto& id : a.benign_ids) EXPECT_TRUE(activation_set(set.at(id), secret).empty());
  EXPECT_EQ(code_of([&] { build_verification_sets(set, secret, 100000, 10, 1); }), ErrorCode::InsufficientSamples);
  EXPECT_EQ(code_of([&] { build_verification_sets(set, secret, 0, 10, 1); }), ErrorCode::InvalidArgument);
}
