#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "geomark/embedding_set.hpp"
#include "geomark/error.hpp"
#include "geomark/extraction.hpp"
#include "geomark/format.hpp"
#include "geomark/watermark.hpp"

namespace geomark {

enum class FileFormat { binary, jsonl };

inline FileFormat parse_file_format(std::string_view s) {
  if (s == "binary" || s == "bin") return FileFormat::binary;
  if (s == "jsonl") return FileFormat::jsonl;
  throw Error(ErrorCode::InvalidArgument, "unknown file format '" + std::string(s) + "'");
}

inline constexpr std::uint16_t kEmbeddingFileVersion = 1;
inline constexpr std::uint16_t kModelFileVersion = 1;
/// Header flag: vectors are stored as-is and must not be normalized on read
/// (input features, surrogate outputs).
inline constexpr std::uint32_t kFlagRaw = 1u;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xffu));
}

inline void put_f64(std::string& out, double x) { put_le(out, std::bit_cast<std::uint64_t>(x)); }

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return v;
  }

  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorCode::CorruptFile, "truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string errno_text() { return std::strerror(errno); }

}  // namespace detail

/// Writes `bytes` to a temp file beside `path`, fsyncs it and renames it into
/// place, so readers never observe a partial file.
inline void write_file_atomic(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorCode::IoError, path + ": " + detail::errno_text());
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      const auto cause = detail::errno_text();
      ::close(fd);
      ::unlink(tmp.c_str());
      throw Error(ErrorCode::IoError, path + ": " + cause);
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) {
    const auto cause = detail::errno_text();
    ::unlink(tmp.c_str());
    throw Error(ErrorCode::IoError, path + ": " + cause);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    const auto cause = detail::errno_text();
    ::unlink(tmp.c_str());
    throw Error(ErrorCode::IoError, path + ": " + cause);
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, path + ": cannot open for reading");
  std::ostringstream os;
  os << in.rdbuf();
  if (in.bad()) throw Error(ErrorCode::IoError, path + ": read failed");
  return std::move(os).str();
}

inline std::string encode_embeddings_binary(const EmbeddingSet& set, bool raw = false) {
  std::string out;
  out.reserve(22 + set.size() * (2 + 8 + set.dim() * 8));
  out += "GMEB";
  detail::put_le<std::uint16_t>(out, kEmbeddingFileVersion);
  detail::put_le<std::uint64_t>(out, set.size());
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(set.dim()));
  detail::put_le<std::uint32_t>(out, raw ? kFlagRaw : 0u);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& id = set.id(i);
    if (id.size() > 0xffff) throw Error(ErrorCode::InvalidArgument, "id longer than 65535 bytes");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
    out += id;
    for (double x : set.vector(i)) detail::put_f64(out, x);
  }
  return out;
}

inline std::string encode_embeddings_jsonl(const EmbeddingSet& set) {
  std::string out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    out += "{\"id\":";
    out += nlohmann::json(set.id(i)).dump();
    out += ",\"vector\":";
    out += format_array(set.vector(i));
    out += "}\n";
  }
  return out;
}

/// `raw` marks a binary file whose vectors must be read back untouched; JSONL
/// has no header and is always normalized on read.
inline void write_embeddings(const EmbeddingSet& set, const std::string& path, FileFormat format, bool raw = false) {
  write_file_atomic(path, format == FileFormat::binary ? encode_embeddings_binary(set, raw) : encode_embeddings_jsonl(set));
}

namespace detail {

/// Ingestion rule: vectors already unit-norm to rounding are kept bit-for-bit,
/// anything else is normalized and flagged when off by more than 1e-6.
struct Ingest {
  EmbeddingSet set;
  bool raw = false;
  bool renormalized = false;
  std::unordered_set<std::string> seen;

  void add(std::string id, Vector v) {
    if (!all_finite(v)) throw Error(ErrorCode::CorruptFile, "non-finite component in '" + id + "'");
    if (!seen.insert(id).second) throw Error(ErrorCode::CorruptFile, "duplicate id '" + id + "'");
    if (!raw) {
      const double n = norm(v);
      if (n <= 1e-30) throw Error(ErrorCode::CorruptFile, "zero vector '" + id + "'");
      if (std::abs(n - 1.0) > 1e-6) renormalized = true;
      if (std::abs(n - 1.0) > 1e-12) v = normalize(v);
    }
    set.add_raw(std::move(id), std::move(v));
  }
};

inline EmbeddingSet finish(Ingest& ing) {
  if (ing.renormalized) ing.set.mark_renormalized();
  return std::move(ing.set);
}

}  // namespace detail

inline EmbeddingSet decode_embeddings_binary(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "GMEB") throw Error(ErrorCode::CorruptFile, "bad magic");
  detail::Reader r(bytes.substr(4));
  const auto version = r.get<std::uint16_t>();
  if (version != kEmbeddingFileVersion) {
    throw Error(ErrorCode::CorruptFile, "unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>();
  const auto dim = r.get<std::uint32_t>();
  const auto flags = r.get<std::uint32_t>();
  detail::Ingest ing;
  ing.set = EmbeddingSet(dim);
  ing.raw = (flags & kFlagRaw) != 0;
  const std::uint64_t record_min = 2 + 8ull * dim;
  if (count > bytes.size() / record_min + 1) throw Error(ErrorCode::CorruptFile, "truncated");
  ing.set.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = r.get<std::uint16_t>();
    std::string id(r.take(len));
    Vector v(dim);
    for (auto& x : v) x = r.get_f64();
    ing.add(std::move(id), std::move(v));
  }
  if (!r.at_end()) throw Error(ErrorCode::CorruptFile, "trailing bytes after " + std::to_string(count) + " records");
  return detail::finish(ing);
}

inline EmbeddingSet decode_embeddings_jsonl(std::string_view text) {
  detail::Ingest ing;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      // A cut-off last line is the usual shape of an interrupted copy.
      if (end == text.size()) throw Error(ErrorCode::CorruptFile, "truncated");
      throw Error(ErrorCode::CorruptFile, "malformed JSON on line " + std::to_string(line_no));
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("vector") || !j["id"].is_string() || !j["vector"].is_array()) {
      throw Error(ErrorCode::CorruptFile, "line " + std::to_string(line_no) + " lacks string id or vector array");
    }
    Vector v;
    v.reserve(j["vector"].size());
    for (const auto& x : j["vector"]) {
      // nlohmann emits NaN/Inf as null; treat it the same as a literal NaN.
      if (x.is_null()) {
        v.push_back(std::nan(""));
      } else if (x.is_number()) {
        v.push_back(x.get<double>());
      } else {
        throw Error(ErrorCode::CorruptFile, "non-numeric component on line " + std::to_string(line_no));
      }
    }
    if (ing.set.empty() && ing.set.dim() == 0) ing.set = EmbeddingSet(v.size());
    if (v.size() != ing.set.dim()) {
      throw Error(ErrorCode::CorruptFile, "line " + std::to_string(line_no) + " has dim " + std::to_string(v.size()) +
                                              ", expected " + std::to_string(ing.set.dim()));
    }
    ing.add(j["id"].get<std::string>(), std::move(v));
  }
  return detail::finish(ing);
}

/// Auto-detects the format: "GMEB" magic means binary, a leading '{' (after
/// whitespace) or an empty file means JSONL.
inline EmbeddingSet decode_embeddings(std::string_view bytes) {
  if (bytes.size() >= 4 && bytes.substr(0, 4) == "GMEB") return decode_embeddings_binary(bytes);
  const auto first = bytes.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos || bytes[first] == '{') return decode_embeddings_jsonl(bytes);
  throw Error(ErrorCode::CorruptFile, "bad magic");
}

inline EmbeddingSet read_embeddings(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return decode_embeddings(bytes);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::CorruptFile) throw;
    throw Error(ErrorCode::CorruptFile, path + ": " + std::string(e.what()).substr(std::string("CorruptFile: ").size()));
  }
}

/// Corpora travel as raw binary embedding files (features are not unit-norm).
inline void write_corpus(const Corpus& corpus, const std::string& path) {
  EmbeddingSet set(corpus.empty() ? 0 : corpus.front().features.size());
  set.reserve(corpus.size());
  for (const auto& x : corpus) set.add_raw(x.id, x.features);
  write_embeddings(set, path, FileFormat::binary, true);
}

inline Corpus read_corpus(const std::string& path) {
  const auto set = read_embeddings(path);
  Corpus out;
  out.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) out.push_back({set.id(i), set.vector(i)});
  return out;
}

inline std::string encode_model_binary(const SurrogateModel& m) {
  std::string out = "GMRK";
  detail::put_le<std::uint16_t>(out, kModelFileVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.input_dim()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.hidden_dim()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.output_dim()));
  auto put_rowmajor = [&out](const Eigen::MatrixXd& a) {
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < a.cols(); ++j) detail::put_f64(out, a(i, j));
  };
  put_rowmajor(m.w1);
  for (Eigen::Index i = 0; i < m.b1.size(); ++i) detail::put_f64(out, m.b1(i));
  put_rowmajor(m.w2);
  for (Eigen::Index i = 0; i < m.b2.size(); ++i) detail::put_f64(out, m.b2(i));
  return out;
}

inline nlohmann::json training_info_to_json(const TrainingInfo& info) {
  return {{"epochs", info.config.epochs},
          {"learning_rate", info.config.learning_rate},
          {"batch", info.config.batch},
          {"hidden", info.config.hidden},
          {"seed", info.config.seed},
          {"beta1", info.config.beta1},
          {"beta2", info.config.beta2},
          {"epsilon", info.config.epsilon},
          {"final_loss", info.final_loss},
          {"epoch_loss", info.epoch_loss},
          {"warning", info.warning}};
}

inline TrainingInfo training_info_from_json(const nlohmann::json& j) {
  TrainingInfo info;
  info.config.epochs = j.at("epochs").get<std::size_t>();
  info.config.learning_rate = j.at("learning_rate").get<double>();
  info.config.batch = j.at("batch").get<std::size_t>();
  info.config.hidden = j.at("hidden").get<std::size_t>();
  info.config.seed = j.at("seed").get<std::uint64_t>();
  info.config.beta1 = j.value("beta1", info.config.beta1);
  info.config.beta2 = j.value("beta2", info.config.beta2);
  info.config.epsilon = j.value("epsilon", info.config.epsilon);
  info.final_loss = j.at("final_loss").get<double>();
  info.epoch_loss = j.value("epoch_loss", std::vector<double>{});
  info.warning = j.value("warning", std::string{});
  return info;
}

inline SurrogateModel decode_model_binary(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "GMRK") throw Error(ErrorCode::CorruptFile, "bad magic");
  detail::Reader r(bytes.substr(4));
  const auto version = r.get<std::uint16_t>();
  if (version != kModelFileVersion) throw Error(ErrorCode::CorruptFile, "unsupported version " + std::to_string(version));
  const auto p = static_cast<Eigen::Index>(r.get<std::uint32_t>());
  const auto h = static_cast<Eigen::Index>(r.get<std::uint32_t>());
  const auto d = static_cast<Eigen::Index>(r.get<std::uint32_t>());
  const auto expected = 8ull * static_cast<unsigned long long>(h * p + h + d * h + d);
  if (bytes.size() - 18 < expected) throw Error(ErrorCode::CorruptFile, "truncated");
  SurrogateModel m;
  m.w1.resize(h, p);
  m.b1.resize(h);
  m.w2.resize(d, h);
  m.b2.resize(d);
  auto get_rowmajor = [&r](Eigen::MatrixXd& a) {
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = r.get_f64();
  };
  get_rowmajor(m.w1);
  for (Eigen::Index i = 0; i < h; ++i) m.b1(i) = r.get_f64();
  get_rowmajor(m.w2);
  for (Eigen::Index i = 0; i < d; ++i) m.b2(i) = r.get_f64();
  if (!r.at_end()) throw Error(ErrorCode::CorruptFile, "trailing bytes after weights");
  if (!m.w1.allFinite() || !m.b1.allFinite() || !m.w2.allFinite() || !m.b2.allFinite()) {
    throw Error(ErrorCode::CorruptFile, "non-finite weight");
  }
  return m;
}

inline std::string model_sidecar_path(const std::string& path) { return path + ".json"; }

/// Weights go to `path`, training metadata to `path`.json.
inline void write_model(const SurrogateModel& m, const std::string& path) {
  write_file_atomic(path, encode_model_binary(m));
  write_file_atomic(model_sidecar_path(path), training_info_to_json(m.info).dump(2) + "\n");
}

inline SurrogateModel read_model(const std::string& path) {
  SurrogateModel m = decode_model_binary(read_file(path));
  const auto sidecar = model_sidecar_path(path);
  if (std::ifstream(sidecar).good()) {
    try {
      m.info = training_info_from_json(nlohmann::json::parse(read_file(sidecar)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::CorruptFile, sidecar + ": " + e.what());
    }
  }
  return m;
}

inline nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptFile, path + ": " + e.what());
  }
}

inline void write_json(const nlohmann::json& j, const std::string& path) { write_file_atomic(path, j.dump(2) + "\n"); }

inline void write_secret(const WatermarkSecret& secret, const std::string& path) {
  write_file_atomic(path, secret_to_json(secret));
}

inline WatermarkSecret read_secret(const std::string& path) { return secret_from_json(read_file(path)); }

}  // namespace geomark
