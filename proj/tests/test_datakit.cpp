#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fedorch/datakit.hpp"
#include "test_util.hpp"

using namespace fedorch;

namespace {

void expect_partition(const SplitIndices& s, std::size_t n) {
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (std::size_t i : *part) {
      EXPECT_LT(i, n);
      EXPECT_TRUE(all.insert(i).second) << "index " << i << " appears twice";
    }
  EXPECT_EQ(all.size(), n);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fedorch_datakit_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Split, FloorFloorRemainder) {
  auto s = split_dataset(507, 1);
  EXPECT_EQ(s.train.size(), 354u);
  EXPECT_EQ(s.val.size(), 101u);
  EXPECT_EQ(s.test.size(), 52u);

  auto ten = split_dataset(10, 3);
  EXPECT_EQ(ten.train.size(), 7u);
  EXPECT_EQ(ten.val.size(), 2u);
  EXPECT_EQ(ten.test.size(), 1u);

  auto sweep = split_dataset(200, 3, kSizeSweepSplit);
  EXPECT_EQ(sweep.train.size(), 160u);
  EXPECT_EQ(sweep.val.size(), 20u);
  EXPECT_EQ(sweep.test.size(), 20u);
}

TEST(Split, PartitionPropertyOverRandomSizes) {
  Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 10 + rng.below(3000);
    const std::uint64_t seed = rng.next_u64();
    auto s = split_dataset(n, seed);
    expect_partition(s, n);
    EXPECT_EQ(s.train.size(), n * 70 / 100);
    EXPECT_EQ(s.val.size(), n * 20 / 100);
    auto again = split_dataset(n, seed);
    EXPECT_EQ(s.train, again.train);
    EXPECT_EQ(s.test, again.test);
  }
}

TEST(Split, SeedChangesPermutation) { EXPECT_NE(split_dataset(100, 1).train, split_dataset(100, 2).train); }

TEST(Split, TooFewSamples) { EXPECT_FEDORCH_ERROR(split_dataset(9, 0), ErrorCode::TooFewSamples); }

TEST(Generate, LabelCountsUseRoundHalfEven) {
  SiteProfile gam{"GAM", 250, 0.17, 0.0, 1.0, 7};
  auto ds = generate_site(gam, 4);
  std::size_t pos = std::count(ds.labels.begin(), ds.labels.end(), 1);
  EXPECT_EQ(pos, 42u);
  EXPECT_EQ(ds.size() - pos, 208u);

  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    SiteProfile p{"S", 10 + rng.below(500), rng.uniform(0.01, 0.99), 0.0, 1.0, rng.next_u64()};
    auto d = generate_site(p, 3);
    EXPECT_EQ(static_cast<std::size_t>(std::count(d.labels.begin(), d.labels.end(), 1)), positive_count(p));
    validate_dataset(d);
  }
}

TEST(Generate, Deterministic) {
  SiteProfile p{"A", 120, 0.4, 0.3, 0.8, 99};
  auto a = generate_site(p, 8), b = generate_site(p, 8);
  EXPECT_EQ(a.features.data(), b.features.data());
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.split.train, b.split.train);
}

TEST(Generate, ZeroNoiseSitsExactlyOnClassCentres) {
  SiteProfile p{"clean", 50, 0.5, 0.25, 0.0, 1};
  auto ds = generate_site(p, 4);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const float expected = static_cast<float>(((ds.labels[i] ? 1.0 : -1.0) + 0.25) * 0.5);
    for (float v : ds.features.row(i)) EXPECT_EQ(v, expected);
  }
}

TEST(Generate, InvalidProfiles) {
  EXPECT_FEDORCH_ERROR(generate_site({"x", 9, 0.5, 0, 1, 0}, 2), ErrorCode::InvalidProfile);
  EXPECT_FEDORCH_ERROR(generate_site({"x", 50, 0.0, 0, 1, 0}, 2), ErrorCode::InvalidProfile);
  EXPECT_FEDORCH_ERROR(generate_site({"x", 50, 1.0, 0, 1, 0}, 2), ErrorCode::InvalidProfile);
  EXPECT_FEDORCH_ERROR(generate_site({"x", 50, 0.5, 0, -1, 0}, 2), ErrorCode::InvalidProfile);
  EXPECT_FEDORCH_ERROR(generate_site({"", 50, 0.5, 0, 1, 0}, 2), ErrorCode::InvalidProfile);
}

TEST(Csv, ParsesSmallFile) {
  std::istringstream in("f0,f1,label\n0.5,1,1\n-2,3.25,0\n1e-3,0,1\n");
  auto ds = read_csv(in, "tiny", 0);
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.dim(), 2u);
  EXPECT_EQ(ds.labels, (std::vector<std::uint8_t>{1, 0, 1}));
  EXPECT_EQ(ds.features.row(1)[1], 3.25f);
}

TEST(Csv, RejectsBadRows) {
  auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return read_csv(in, "bad", 0);
  };
  try {
    parse("f0,label\n1,0\n2,2\n");
    ADD_FAILURE() << "label 2 accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_FEDORCH_ERROR(parse("f0,label\n1,0,1\n"), ErrorCode::ParseError);
  EXPECT_FEDORCH_ERROR(parse("f0,label\nabc,0\n"), ErrorCode::ParseError);
  EXPECT_FEDORCH_ERROR(parse("f0,f2,label\n"), ErrorCode::ParseError);
  EXPECT_FEDORCH_ERROR(parse(""), ErrorCode::ParseError);
  EXPECT_FEDORCH_ERROR(load_csv("/nonexistent/file.csv"), ErrorCode::IoError);
}

TEST(Csv, RoundTripsGeneratedSite) {
  SiteProfile p{"RT", 137, 0.3, -0.4, 1.1, 5};
  auto ds = generate_site(p, 6);
  auto path = temp_file("rt.csv");
  write_csv(ds, path, p.seed);
  auto back = load_csv(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.site_id, "RT");
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.labels, ds.labels);
  for (std::size_t i = 0; i < ds.features.data().size(); ++i)
    EXPECT_NEAR(back.features.data()[i], ds.features.data()[i], 1e-6);
  // Same seed comment, same split.
  EXPECT_EQ(back.split.train, ds.split.train);
}

TEST(Presets, EightSitesSizesAndPrevalence) {
  auto sites = scenario_preset("eight-sites");
  ASSERT_EQ(sites.size(), 8u);
  std::vector<std::size_t> n;
  for (const auto& s : sites) n.push_back(s.n_samples);
  EXPECT_EQ(n, (std::vector<std::size_t>{211, 133, 250, 205, 1726, 250, 98, 507}));
  EXPECT_EQ(sites[0].site_id, "DRG");
  EXPECT_DOUBLE_EQ(sites[0].positive_fraction, 0.78);
  EXPECT_DOUBLE_EQ(sites[5].positive_fraction, 0.17);
  const auto noisiest = std::max_element(sites.begin(), sites.end(),
                                         [](auto& a, auto& b) { return a.noise_scale < b.noise_scale; });
  EXPECT_EQ(noisiest->site_id, "UGN");
}

TEST(Presets, TwoSitesSkewedAndSweep) {
  auto two = scenario_preset("two-sites-skewed");
  ASSERT_EQ(two.size(), 2u);
  EXPECT_DOUBLE_EQ(1.0 - two[0].positive_fraction, 0.83);
  EXPECT_DOUBLE_EQ(two[1].positive_fraction, 0.78);
  EXPECT_EQ(scenario("size-sweep").split.train_pct, 80u);
  EXPECT_FEDORCH_ERROR(scenario_preset("nine-sites"), ErrorCode::UnknownPreset);
}

TEST(Presets, ShippedFileMatchesBuiltins) {
  auto loaded = load_scenarios(FEDORCH_SOURCE_DIR "/presets/scenarios.json");
  const auto& builtin = builtin_scenarios();
  ASSERT_EQ(loaded.size(), builtin.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].name, builtin[i].name);
    EXPECT_EQ(loaded[i].sites, builtin[i].sites);
    EXPECT_EQ(loaded[i].input_dim, builtin[i].input_dim);
    EXPECT_EQ(loaded[i].learning_rate, builtin[i].learning_rate);
    EXPECT_EQ(loaded[i].split.train_pct, builtin[i].split.train_pct);
    EXPECT_EQ(loaded[i].split.val_pct, builtin[i].split.val_pct);
  }
}
