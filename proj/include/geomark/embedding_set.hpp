#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "geomark/error.hpp"
#include "geomark/vecmath.hpp"

namespace geomark {

/// Ordered (id, vector) collection with unique ids and a shared dimension.
///
/// `add` normalizes to unit length, which is the ingestion rule for provider
/// embeddings. `add_raw` keeps the vector untouched; it exists for input
/// features, surrogate outputs (which verification normalizes itself) and
/// hand-built geometry in tests.
class EmbeddingSet {
 public:
  EmbeddingSet() = default;
  explicit EmbeddingSet(std::size_t dim) : dim_(dim) {}

  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  std::size_t dim() const noexcept { return dim_; }

  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<Vector>& vectors() const noexcept { return vectors_; }
  const std::string& id(std::size_t i) const { return ids_.at(i); }
  const Vector& vector(std::size_t i) const { return vectors_.at(i); }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const Vector& at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error(ErrorCode::IdMismatch, "unknown id '" + id + "'");
    return vectors_[it->second];
  }

  /// True when some vector handed to `add` was not unit-norm within 1e-6.
  bool renormalized() const noexcept { return renormalized_; }
  void mark_renormalized() noexcept { renormalized_ = true; }

  void add(std::string id, VectorView v) {
    if (!all_finite(v)) throw Error(ErrorCode::InvalidArgument, "non-finite component in '" + id + "'");
    const double n = norm(v);
    if (std::abs(n - 1.0) > 1e-6) renormalized_ = true;
    add_raw(std::move(id), normalize(v));
  }

  void add_raw(std::string id, Vector v) {
    if (dim_ == 0 && ids_.empty()) dim_ = v.size();
    if (v.size() != dim_) {
      throw Error(ErrorCode::DimMismatch, "'" + id + "' has dim " + std::to_string(v.size()) + ", set has " +
                                              std::to_string(dim_));
    }
    if (!index_.emplace(id, ids_.size()).second) throw Error(ErrorCode::InvalidArgument, "duplicate id '" + id + "'");
    ids_.push_back(std::move(id));
    vectors_.push_back(std::move(v));
  }

  void reserve(std::size_t n) {
    ids_.reserve(n);
    vectors_.reserve(n);
    index_.reserve(n);
  }

 private:
  std::size_t dim_ = 0;
  bool renormalized_ = false;
  std::vector<std::string> ids_;
  std::vector<Vector> vectors_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace geomark
