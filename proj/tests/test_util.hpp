#pragma once

#include <gtest/gtest.h>
#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedorch/auth.hpp"
#include "fedorch/error.hpp"
#include "fedorch/rng.hpp"
#include "fedorch/tensor.hpp"

#define EXPECT_FEDORCH_ERROR(stmt, expected_code)                                       \
  do {                                                                                  \
    try {                                                                               \
      stmt;                                                                             \
      ADD_FAILURE() << "expected " << ::fedorch::to_string(expected_code) << ", nothing thrown"; \
    } catch (const ::fedorch::Error& e_) {                                              \
      EXPECT_EQ(e_.code(), expected_code) << e_.what();                                 \
    }                                                                                   \
  } while (0)

namespace fedorch::testing {

/// Random map with the given shapes; values roughly in [-scale, scale].
inline TensorMap random_map(Rng& rng, const std::vector<Shape>& shapes, double scale = 4.0) {
  TensorMap t;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    std::vector<float> data(shape_numel(shapes[i]));
    for (auto& v : data) v = static_cast<float>(rng.uniform(-scale, scale));
    t.add("t" + std::to_string(i), shapes[i], std::move(data));
  }
  return t;
}

inline std::vector<Shape> random_shapes(Rng& rng, std::size_t max_entries = 4) {
  std::vector<Shape> shapes(1 + rng.below(max_entries));
  for (auto& s : shapes) {
    s.resize(1 + rng.below(3));
    for (auto& d : s) d = static_cast<std::uint32_t>(1 + rng.below(5));
  }
  return shapes;
}

/// Deterministic RandomSource: each call draws from a fresh Rng seeded by a counter.
inline RandomSource counter_source(std::uint64_t start = 0) {
  auto counter = std::make_shared<std::uint64_t>(start);
  return [counter](std::span<std::uint8_t> out) {
    Rng rng((*counter)++);
    for (auto& b : out) b = static_cast<std::uint8_t>(rng.next_u64());
  };
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path = std::filesystem::temp_directory_path() /
           ("fedorch-" + std::string(info->test_suite_name()) + "-" + info->name() + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace fedorch::testing
