#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "geomark/datastore.hpp"

using namespace geomark;
namespace fs = std::filesystem;

namespace {

EmbeddingSet unit_set(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  EmbeddingSet set(dim);
  for (std::size_t i = 0; i < n; ++i) {
    Vector v(dim);
    for (auto& x : v) x = g(rng);
    set.add("id-" + std::to_string(i), v);
  }
  return set;
}

std::string corrupt_message(std::string_view bytes) {
  try {
    decode_embeddings(bytes);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptFile) << e.what();
    return e.what();
  }
  ADD_FAILURE() << "decoded without error";
  return {};
}

bool has(const std::string& text, const std::string& needle) { return text.find(needle) != std::string::npos; }

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("geomark-ds-" + std::to_string(::getpid()) + "-" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST(Binary, RoundTripIsBitExact) {
  const auto set = unit_set(200, 33, 1);
  const auto back = decode_embeddings(encode_embeddings_binary(set));
  ASSERT_EQ(back.ids(), set.ids());
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_EQ(std::memcmp(back.vector(i).data(), set.vector(i).data(), 33 * sizeof(double)), 0);
  }
  EXPECT_FALSE(back.renormalized());
}

TEST(Binary, RawFlagKeepsUnnormalizedVectors) {
  EmbeddingSet set(3);
  set.add_raw("a", Vector{3.0, 4.0, 0.0});
  set.add_raw("b", Vector{-0.5, 1e-300, 7.25});
  const auto back = decode_embeddings(encode_embeddings_binary(set, true));
  EXPECT_EQ(back.vectors(), set.vectors());
  const auto normalized = decode_embeddings(encode_embeddings_binary(set, false));
  EXPECT_NEAR(norm(normalized.vector(0)), 1.0, 1e-15);
  EXPECT_TRUE(normalized.renormalized());
}

TEST(Binary, HeaderLayout) {
  const auto bytes = encode_embeddings_binary(unit_set(2, 4, 2));
  EXPECT_EQ(bytes.substr(0, 4), "GMEB");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);  // version, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 2);  // count
  EXPECT_EQ(static_cast<unsigned char>(bytes[14]), 4);  // dim
}

TEST(Jsonl, RoundTripIsValueExact) {
  const auto set = unit_set(150, 17, 3);
  const auto text = encode_embeddings_jsonl(set);
  const auto back = decode_embeddings(text);
  ASSERT_EQ(back.ids(), set.ids());
  for (std::size_t i = 0; i < set.size(); ++i) EXPECT_EQ(back.vector(i), set.vector(i));
}

TEST(Jsonl, AcceptsBlankLinesAndNormalizes) {
  const auto set = decode_embeddings("{\"id\":\"a\",\"vector\":[3,4]}\n\n{\"id\":\"b\",\"vector\":[0,2]}\n");
  EXPECT_EQ(set.size(), 2u);
  EXPECT_NEAR(set.at("a")[0], 0.6, 1e-15);
  EXPECT_TRUE(set.renormalized());
}

TEST(Corrupt, EachCaseHasItsOwnError) {
  const auto good = encode_embeddings_binary(unit_set(3, 4, 4));

  std::string bad_version = good;
  bad_version[4] = 9;

  EmbeddingSet dup(2);
  dup.add_raw("x", Vector{1.0, 0.0});
  dup.add_raw("y", Vector{0.0, 1.0});
  auto duplicate = encode_embeddings_binary(dup);
  duplicate[duplicate.find('y')] = 'x';

  EmbeddingSet nonfinite(2);
  nonfinite.add_raw("x", Vector{NAN, 1.0});

  EmbeddingSet zero(2);
  zero.add_raw("z", Vector{0.0, 0.0});

  const std::vector<std::pair<std::string, std::string>> cases{
      {"XXXX" + good.substr(4), "bad magic"},
      {bad_version, "unsupported version"},
      {good.substr(0, good.size() - 5), "truncated"},
      {good + "junk", "trailing bytes"},
      {duplicate, "duplicate id"},
      {encode_embeddings_binary(nonfinite), "non-finite"},
      {encode_embeddings_binary(zero), "zero vector"},
      {"{\"id\":\"a\",\"vector\":[1,0]}\n{\"id\":\"b\",\"vec", "truncated"},
      {"{\"id\":\"a\",\"vector\":[1,0]}\n{\"id\":\"a\",\"vector\":[0,1]}\n", "duplicate id"},
      {"{\"id\":\"a\",\"vector\":[1,null]}\n", "non-finite"},
      {"{\"id\":\"a\",\"vector\":[1,0]}\n{\"id\":\"b\",\"vector\":[1,0,0]}\n", "has dim"},
      {"{nope\n{\"id\":\"a\",\"vector\":[1,0]}\n", "malformed JSON"},
  };
  for (const auto& [bytes, expected] : cases) EXPECT_TRUE(has(corrupt_message(bytes), expected)) << expected;
}

TEST_F(TempDir, FilesRoundTripAndNamePathOnError) {
  const auto set = unit_set(40, 8, 5);
  write_embeddings(set, path("e.bin"), FileFormat::binary);
  write_embeddings(set, path("e.jsonl"), FileFormat::jsonl);
  EXPECT_EQ(read_embeddings(path("e.bin")).vectors(), set.vectors());
  EXPECT_EQ(read_embeddings(path("e.jsonl")).vectors(), set.vectors());
  EXPECT_FALSE(fs::exists(path("e.bin.tmp")));

  write_file_atomic(path("broken.bin"), "GMEB\x01");
  try {
    read_embeddings(path("broken.bin"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_TRUE(has(e.what(), "broken.bin"));
    EXPECT_TRUE(has(e.what(), "truncated"));
  }
  try {
    read_embeddings(path("missing.bin"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IoError);
    EXPECT_TRUE(has(e.what(), "missing.bin"));
  }
}

TEST_F(TempDir, CorpusRoundTrip) {
  const auto corpus = sample_corpus(12, 30, 6);
  write_corpus(corpus, path("c.bin"));
  const auto back = read_corpus(path("c.bin"));
  ASSERT_EQ(back.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(back[i].id, corpus[i].id);
    EXPECT_EQ(back[i].features, corpus[i].features);
  }
}

TEST_F(TempDir, ModelRoundTripWithSidecar) {
  auto m = init_surrogate(5, 7, 3, 9);
  m.b1.setConstant(0.25);
  m.info.config.epochs = 12;
  m.info.epoch_loss = {0.5, 0.25};
  m.info.final_loss = 0.125;
  write_model(m, path("m.gmrk"));
  EXPECT_TRUE(fs::exists(path("m.gmrk.json")));
  const auto back = read_model(path("m.gmrk"));
  EXPECT_EQ(back.w1, m.w1);
  EXPECT_EQ(back.b1, m.b1);
  EXPECT_EQ(back.w2, m.w2);
  EXPECT_EQ(back.b2, m.b2);
  EXPECT_EQ(back.info.final_loss, 0.125);
  EXPECT_EQ(back.info.config.epochs, 12u);

  const auto bytes = encode_model_binary(m);
  EXPECT_EQ(bytes.substr(0, 4), "GMRK");
  EXPECT_THROW(decode_model_binary(bytes.substr(0, bytes.size() - 1)), Error);
  EXPECT_THROW(decode_model_binary("XXXX" + bytes.substr(4)), Error);
}

TEST_F(TempDir, SecretFileRoundTrip) {
  const auto set = unit_set(100, 6, 7);
  const auto secret = initialize_secret(set, WatermarkParams{});
  write_secret(secret, path("secret.json"));
  EXPECT_EQ(secret_fingerprint(read_secret(path("secret.json"))), secret_fingerprint(secret));
}

TEST(Format, ParseFileFormat) {
  EXPECT_EQ(parse_file_format("binary"), FileFormat::binary);
  EXPECT_EQ(parse_file_format("jsonl"), FileFormat::jsonl);
  EXPECT_THROW(parse_file_format("csv"), Error);
}
