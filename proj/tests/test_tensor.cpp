#include <arpa/inet.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "fedorch/tensor.hpp"
#include "test_util.hpp"

using namespace fedorch;
using fedorch::testing::random_map;
using fedorch::testing::random_shapes;

namespace {

TensorMap scalar_map(float v) {
  TensorMap t;
  t.add("w", {1}, {v});
  return t;
}

// Byte-level encoder written independently of serialize(): builds the
// layout with htonl/memcpy instead of the shared put_* helpers.
Bytes reference_encode(const TensorMap& t) {
  Bytes out{'F', 'T', 'M', '1'};
  auto append = [&](const void* p, std::size_t n) {
    auto b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  };
  std::uint32_t count = htonl(static_cast<std::uint32_t>(t.size()));
  append(&count, 4);
  for (const auto& e : t.entries()) {
    std::uint16_t len = htons(static_cast<std::uint16_t>(e.name.size()));
    append(&len, 2);
    append(e.name.data(), e.name.size());
    std::uint8_t rank = static_cast<std::uint8_t>(e.shape.size());
    append(&rank, 1);
    for (auto d : e.shape) {
      std::uint32_t be = htonl(d);
      append(&be, 4);
    }
    // Host is little-endian on every platform this builds for.
    append(e.data.data(), e.data.size() * 4);
  }
  return out;
}

}  // namespace

TEST(Aggregate, EqualCountsGiveTheMean) {
  auto out = aggregate({{scalar_map(2.0f), 5, "a"}, {scalar_map(4.0f), 5, "b"}});
  EXPECT_EQ(out.at("w").data[0], 3.0f);
}

TEST(Aggregate, UnequalSiteSizesWeightTheMean) {
  auto out = aggregate({{scalar_map(0.0f), 1726, "NIG"}, {scalar_map(1.0f), 98, "SEN"}});
  EXPECT_EQ(out.at("w").data[0], static_cast<float>(98.0 / 1824.0));
  EXPECT_NEAR(out.at("w").data[0], 0.0537281, 1e-7);
}

TEST(Aggregate, SingleUpdateIsBitIdentical) {
  TensorMap t;
  t.add("a", {3}, {-0.0f, 1e-30f, -7.25f});
  t.add("b", {1}, {std::numeric_limits<float>::max()});
  auto out = aggregate({{t, 17, "x"}});
  EXPECT_TRUE(bit_equal(out, t));
}

TEST(Aggregate, Errors) {
  EXPECT_FEDORCH_ERROR(aggregate(std::span<const WeightedUpdate>{}), ErrorCode::EmptyUpdateSet);
  TensorMap other;
  other.add("w", {2}, {1.0f, 2.0f});
  EXPECT_FEDORCH_ERROR(aggregate({{scalar_map(1.0f), 1, "a"}, {other, 1, "b"}}), ErrorCode::StructureMismatch);
  TensorMap renamed;
  renamed.add("v", {1}, {1.0f});
  EXPECT_FEDORCH_ERROR(aggregate({{scalar_map(1.0f), 1, "a"}, {renamed, 1, "b"}}), ErrorCode::StructureMismatch);
  EXPECT_FEDORCH_ERROR(aggregate({{scalar_map(1.0f), 0, "a"}}), ErrorCode::EmptyUpdateSet);
  TensorMap bad;
  EXPECT_FEDORCH_ERROR(bad.add("w", {1}, {std::nanf("")}), ErrorCode::NonFiniteInput);
  EXPECT_FEDORCH_ERROR(bad.add("w", {1}, {std::numeric_limits<float>::infinity()}), ErrorCode::NonFiniteInput);
}

TEST(Aggregate, PermutationInvariantAndConvex) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    auto shapes = random_shapes(rng);
    std::vector<WeightedUpdate> ups;
    const std::size_t k = 1 + rng.below(6);
    for (std::size_t i = 0; i < k; ++i)
      ups.push_back({random_map(rng, shapes), 1 + rng.below(2000), "n" + std::to_string(i)});
    auto base = aggregate(ups);
    std::vector<WeightedUpdate> shuffled = ups;
    rng.shuffle(std::span<WeightedUpdate>(shuffled));
    EXPECT_TRUE(bit_equal(base, aggregate(shuffled)));
    for (std::size_t e = 0; e < base.size(); ++e) {
      for (std::size_t i = 0; i < base.entries()[e].data.size(); ++i) {
        float lo = std::numeric_limits<float>::max(), hi = std::numeric_limits<float>::lowest();
        for (const auto& u : ups) {
          lo = std::min(lo, u.weights.entries()[e].data[i]);
          hi = std::max(hi, u.weights.entries()[e].data[i]);
        }
        EXPECT_GE(base.entries()[e].data[i], lo);
        EXPECT_LE(base.entries()[e].data[i], hi);
      }
    }
  }
}

TEST(Serialize, EmptyMapIsHeaderOnly) {
  TensorMap empty;
  Bytes b = serialize(empty);
  EXPECT_EQ(b, (Bytes{'F', 'T', 'M', '1', 0, 0, 0, 0}));
  EXPECT_TRUE(deserialize(b).empty());
}

TEST(Serialize, ExactLayoutForOneEntry) {
  TensorMap t;
  t.add("w", {2}, {1.5f, -2.5f});
  Bytes expected{'F', 'T', 'M', '1', 0, 0, 0, 1, 0, 1, 'w', 1, 0, 0, 0, 2, 0x00, 0x00, 0xC0, 0x3F, 0x00, 0x00, 0x20, 0xC0};
  EXPECT_EQ(serialize(t), expected);
  EXPECT_TRUE(bit_equal(deserialize(expected), t));
}

TEST(Serialize, MatchesIndependentEncoderOnRandomMaps) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    TensorMap t = random_map(rng, trial == 0 ? std::vector<Shape>{{4, 2}, {2}, {1}} : random_shapes(rng, 5));
    Bytes encoded = serialize(t);
    EXPECT_EQ(encoded, reference_encode(t));
    TensorMap back = deserialize(encoded);
    EXPECT_TRUE(bit_equal(back, t));
    EXPECT_EQ(serialize(back), encoded);
  }
}

TEST(Serialize, RejectsMalformedInput) {
  TensorMap t;
  t.add("w", {2, 2}, {1, 2, 3, 4});
  t.add("b", {2}, {5, 6});
  Bytes good = serialize(t);
  for (std::size_t cut = 0; cut < good.size(); ++cut)
    EXPECT_FEDORCH_ERROR(deserialize(ByteView(good.data(), cut)), ErrorCode::MalformedEncoding);

  Bytes trailing = good;
  trailing.push_back(0);
  EXPECT_FEDORCH_ERROR(deserialize(trailing), ErrorCode::MalformedEncoding);

  Bytes magic = good;
  magic[3] = '2';
  EXPECT_FEDORCH_ERROR(deserialize(magic), ErrorCode::MalformedEncoding);

  Bytes nan = good;
  const std::uint32_t qnan = 0x7FC00000;
  std::memcpy(&nan[nan.size() - 4], &qnan, 4);
  EXPECT_FEDORCH_ERROR(deserialize(nan), ErrorCode::MalformedEncoding);

  // Declared shape larger than the bytes that follow.
  TensorMap one;
  one.add("x", {3}, {1, 2, 3});
  Bytes lying = serialize(one);
  lying[4 + 4 + 2 + 1 + 1 + 3] = 200;
  EXPECT_FEDORCH_ERROR(deserialize(lying), ErrorCode::MalformedEncoding);
}

TEST(L2Distance, Basics) {
  TensorMap a = scalar_map(3.0f), b = scalar_map(0.0f);
  EXPECT_EQ(l2_distance(a, a), 0.0);
  EXPECT_EQ(l2_distance(a, b), 3.0);
  TensorMap other;
  other.add("w", {2}, {0, 0});
  EXPECT_FEDORCH_ERROR(l2_distance(a, other), ErrorCode::StructureMismatch);
}

TEST(L2Distance, MatchesCoordinateLoop) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    auto shapes = random_shapes(rng);
    TensorMap a = random_map(rng, shapes), b = random_map(rng, shapes);
    auto fa = a.flatten(), fb = b.flatten();
    long double sum = 0;
    for (std::size_t i = 0; i < fa.size(); ++i) {
      long double d = static_cast<long double>(fa[i]) - fb[i];
      sum += d * d;
    }
    const double oracle = static_cast<double>(std::sqrt(sum));
    EXPECT_NEAR(l2_distance(a, b), oracle, 1e-12 * oracle);
  }
}
