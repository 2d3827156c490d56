#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedorch/bytes.hpp"
#include "fedorch/error.hpp"

namespace fedorch {

using Shape = std::vector<std::uint32_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::uint32_t d : shape) {
    if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d) fail(ErrorCode::MalformedEncoding, "shape overflows");
    n *= d;
  }
  return n;
}

struct TensorEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// Ordered collection of named float32 tensors. Entry order is part of the
/// value: two maps with the same entries in a different order are different
/// models on the wire.
class TensorMap {
 public:
  TensorMap() = default;

  /// Appends an entry. Names must be unique, dims positive, data finite.
  void add(std::string name, Shape shape, std::vector<float> data) {
    require(!contains(name), ErrorCode::StructureMismatch, "duplicate entry name '" + name + "'");
    require(name.size() <= 0xFFFF, ErrorCode::StructureMismatch, "entry name too long");
    require(shape.size() <= 0xFF, ErrorCode::StructureMismatch, "rank exceeds 255");
    for (std::uint32_t d : shape) require(d > 0, ErrorCode::StructureMismatch, "zero dimension in '" + name + "'");
    require(shape_numel(shape) == data.size(), ErrorCode::StructureMismatch,
            "entry '" + name + "' has " + std::to_string(data.size()) + " values for shape of " +
                std::to_string(shape_numel(shape)));
    for (float v : data) require(std::isfinite(v), ErrorCode::NonFiniteInput, "non-finite value in '" + name + "'");
    entries_.push_back(TensorEntry{std::move(name), std::move(shape), std::move(data)});
  }

  const std::vector<TensorEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  bool contains(std::string_view name) const noexcept { return find(name) != nullptr; }

  const TensorEntry* find(std::string_view name) const noexcept {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  const TensorEntry& at(std::string_view name) const {
    const TensorEntry* e = find(name);
    if (!e) fail(ErrorCode::StructureMismatch, "no entry named '" + std::string(name) + "'");
    return *e;
  }

  std::size_t numel() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.data.size();
    return n;
  }

  /// Same names, order and shapes.
  bool same_structure(const TensorMap& other) const noexcept {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name || entries_[i].shape != other.entries_[i].shape) return false;
    }
    return true;
  }

  /// Row-major flattening of every coordinate in entry order.
  std::vector<float> flatten() const {
    std::vector<float> out;
    out.reserve(numel());
    for (const auto& e : entries_) out.insert(out.end(), e.data.begin(), e.data.end());
    return out;
  }

  /// Copy with identical structure whose coordinates come from `values`
  /// (entry order, row-major).
  TensorMap with_values(std::span<const float> values) const {
    require(values.size() == numel(), ErrorCode::StructureMismatch, "value count does not match structure");
    TensorMap out;
    std::size_t off = 0;
    for (const auto& e : entries_) {
      std::vector<float> d(values.begin() + static_cast<std::ptrdiff_t>(off),
                           values.begin() + static_cast<std::ptrdiff_t>(off + e.data.size()));
      off += e.data.size();
      out.add(e.name, e.shape, std::move(d));
    }
    return out;
  }

 private:
  std::vector<TensorEntry> entries_;
};

/// Equality on the bit patterns of every value (distinguishes -0.0 from 0.0).
inline bool bit_equal(const TensorMap& a, const TensorMap& b) noexcept {
  if (!a.same_structure(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.entries()[i].data;
    const auto& y = b.entries()[i].data;
    if (!x.empty() && std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

struct WeightedUpdate {
  TensorMap weights;
  std::uint64_t sample_count = 0;
  std::string node_id;
};

namespace detail {

inline void require_same_structure(const TensorMap& a, const TensorMap& b, const std::string& ctx) {
  require(a.same_structure(b), ErrorCode::StructureMismatch, ctx + ": tensor maps differ in names, order or shapes");
}

}  // namespace detail

/// Sample-count-weighted mean of the updates.
///
/// Updates are visited in ascending node_id order and accumulated in double
/// precision, so the result depends only on the multiset of updates. Counts are
/// first divided by their gcd, which makes the result bit-identical under
/// uniform rescaling of all counts.
inline TensorMap aggregate(std::span<const WeightedUpdate> updates) {
  require(!updates.empty(), ErrorCode::EmptyUpdateSet, "no updates to aggregate");

  std::vector<const WeightedUpdate*> ordered;
  ordered.reserve(updates.size());
  for (const auto& u : updates) ordered.push_back(&u);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const WeightedUpdate* a, const WeightedUpdate* b) { return a->node_id < b->node_id; });

  const TensorMap& reference = ordered.front()->weights;
  std::uint64_t divisor = 0;
  for (const WeightedUpdate* u : ordered) {
    require(u->sample_count >= 1, ErrorCode::EmptyUpdateSet, "update from '" + u->node_id + "' has zero samples");
    detail::require_same_structure(reference, u->weights, "aggregate");
    divisor = std::gcd(divisor, u->sample_count);
  }

  std::vector<double> counts;
  double total = 0.0;
  for (const WeightedUpdate* u : ordered) {
    const std::uint64_t reduced = u->sample_count / divisor;
    require(reduced < (std::uint64_t{1} << 29), ErrorCode::StructureMismatch, "sample counts too large to aggregate exactly");
    counts.push_back(static_cast<double>(reduced));
    total += static_cast<double>(reduced);
  }

  TensorMap result;
  for (std::size_t ei = 0; ei < reference.size(); ++ei) {
    const auto& ref = reference.entries()[ei];
    std::vector<float> out(ref.data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      // Seeded with the first term so a lone -0.0 survives the identity case.
      double acc = counts[0] * static_cast<double>(ordered[0]->weights.entries()[ei].data[i]);
      for (std::size_t k = 1; k < ordered.size(); ++k)
        acc += counts[k] * static_cast<double>(ordered[k]->weights.entries()[ei].data[i]);
      out[i] = static_cast<float>(acc / total);
    }
    result.add(ref.name, ref.shape, std::move(out));
  }
  return result;
}

inline TensorMap aggregate(std::initializer_list<WeightedUpdate> updates) {
  return aggregate(std::span<const WeightedUpdate>(updates.begin(), updates.size()));
}

inline double l2_distance(const TensorMap& a, const TensorMap& b) {
  detail::require_same_structure(a, b, "l2_distance");
  double sum = 0.0;
  for (std::size_t ei = 0; ei < a.size(); ++ei) {
    const auto& x = a.entries()[ei].data;
    const auto& y = b.entries()[ei].data;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
      sum += d * d;
    }
  }
  return std::sqrt(sum);
}

// FTM1 encoding: "FTM1", u32 BE entry count, then per entry u16 BE name
// length, name bytes, u8 rank, rank x u32 BE dims, numel x f32 LE.

inline constexpr std::string_view kTensorMagic = "FTM1";

inline Bytes serialize(const TensorMap& t) {
  Bytes out;
  out.reserve(8 + t.numel() * 4 + t.size() * 16);
  put_string(out, kTensorMagic);
  put_u32_be(out, static_cast<std::uint32_t>(t.size()));
  for (const auto& e : t.entries()) {
    put_u16_be(out, static_cast<std::uint16_t>(e.name.size()));
    put_string(out, e.name);
    put_u8(out, static_cast<std::uint8_t>(e.shape.size()));
    for (std::uint32_t d : e.shape) put_u32_be(out, d);
    for (float v : e.data) put_f32_le(out, v);
  }
  return out;
}

/// Reads one FTM1 map from the front of `reader`, leaving any following bytes.
inline TensorMap read_tensor_map(ByteReader& reader) {
  ByteView magic = reader.take(4);
  require(std::equal(magic.begin(), magic.end(), kTensorMagic.begin()), ErrorCode::MalformedEncoding, "bad magic");
  const std::uint32_t count = reader.u32_be();
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = reader.u16_be();
    std::string name = reader.string(name_len);
    const std::uint8_t rank = reader.u8();
    Shape shape(rank);
    for (auto& d : shape) {
      d = reader.u32_be();
      require(d > 0, ErrorCode::MalformedEncoding, "zero dimension");
    }
    const std::size_t n = shape_numel(shape);
    require(n <= reader.remaining() / 4, ErrorCode::MalformedEncoding, "payload shorter than shape implies");
    std::vector<float> data(n);
    for (auto& v : data) {
      v = reader.f32_le();
      require(std::isfinite(v), ErrorCode::MalformedEncoding, "non-finite value in '" + name + "'");
    }
    require(!out.contains(name), ErrorCode::MalformedEncoding, "duplicate entry '" + name + "'");
    out.add(std::move(name), std::move(shape), std::move(data));
  }
  return out;
}

inline TensorMap deserialize(ByteView bytes) {
  ByteReader reader(bytes, ErrorCode::MalformedEncoding);
  TensorMap out = read_tensor_map(reader);
  require(reader.done(), ErrorCode::MalformedEncoding, "trailing bytes after tensor map");
  return out;
}

}  // namespace fedorch
