#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedorch/error.hpp"
#include "fedorch/rng.hpp"

namespace fedorch {

/// Dense row-major N x D float matrix.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
  FeatureMatrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, ErrorCode::DimensionMismatch, "matrix data does not match rows x cols");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  std::span<const float> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
  std::span<float> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }

  const std::vector<float>& data() const noexcept { return data_; }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Integer percentages; the test split takes the remainder.
struct SplitRatios {
  std::uint32_t train_pct = 70;
  std::uint32_t val_pct = 20;
};

inline constexpr SplitRatios kDefaultSplit{70, 20};
inline constexpr SplitRatios kSizeSweepSplit{80, 10};

struct SiteDataset {
  std::string site_id;
  FeatureMatrix features;
  std::vector<std::uint8_t> labels;  // 1 = positive
  SplitIndices split;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }
};

/// Seeded uniform permutation cut into floor(train%), floor(val%), remainder.
inline SplitIndices split_dataset(std::size_t n, std::uint64_t seed, SplitRatios ratios = kDefaultSplit) {
  require(n >= 10, ErrorCode::TooFewSamples, "need at least 10 samples, got " + std::to_string(n));
  require(ratios.train_pct + ratios.val_pct <= 100, ErrorCode::InvalidProfile, "split percentages exceed 100");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5911u));
  rng.shuffle(std::span<std::size_t>(perm));

  const std::size_t n_train = n * ratios.train_pct / 100;
  const std::size_t n_val = n * ratios.val_pct / 100;
  SplitIndices s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
               perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
  return s;
}

inline void validate_dataset(const SiteDataset& ds) {
  require(ds.features.rows() == ds.labels.size(), ErrorCode::DimensionMismatch, "feature rows != label count");
  for (std::uint8_t y : ds.labels) require(y <= 1, ErrorCode::ParseError, "label outside {0,1}");
  for (float v : ds.features.data()) require(std::isfinite(v), ErrorCode::NonFiniteInput, "non-finite feature");
  std::vector<std::uint8_t> seen(ds.size(), 0);
  for (const auto* part : {&ds.split.train, &ds.split.val, &ds.split.test}) {
    for (std::size_t i : *part) {
      require(i < ds.size(), ErrorCode::DimensionMismatch, "split index out of range");
      require(!seen[i], ErrorCode::DimensionMismatch, "split index appears twice");
      seen[i] = 1;
    }
  }
  require(std::all_of(seen.begin(), seen.end(), [](std::uint8_t s) { return s == 1; }), ErrorCode::DimensionMismatch,
          "splits do not cover every sample");
}

struct SiteProfile {
  std::string site_id;
  std::size_t n_samples = 0;
  double positive_fraction = 0.5;
  double mean_shift = 0.0;
  double noise_scale = 1.0;
  std::uint64_t seed = 0;

  bool operator==(const SiteProfile&) const = default;
};

/// round(positive_fraction * n) with ties to even, so 0.17 * 250 gives 42.
inline std::size_t positive_count(const SiteProfile& p) {
  return static_cast<std::size_t>(std::nearbyint(p.positive_fraction * static_cast<double>(p.n_samples)));
}

inline void validate_profile(const SiteProfile& p) {
  require(!p.site_id.empty(), ErrorCode::InvalidProfile, "empty site_id");
  require(p.n_samples >= 10, ErrorCode::InvalidProfile, p.site_id + ": n_samples must be >= 10");
  require(p.positive_fraction > 0.0 && p.positive_fraction < 1.0, ErrorCode::InvalidProfile,
          p.site_id + ": positive_fraction must lie in (0,1)");
  require(std::isfinite(p.mean_shift), ErrorCode::InvalidProfile, p.site_id + ": mean_shift not finite");
  require(std::isfinite(p.noise_scale) && p.noise_scale >= 0.0, ErrorCode::InvalidProfile,
          p.site_id + ": noise_scale must be >= 0");
}

/// Class-conditional Gaussians along the unit diagonal u = (1,...,1)/sqrt(D):
/// negatives centred at (-1 + shift) u, positives at (+1 + shift) u, isotropic
/// noise of standard deviation noise_scale.
inline SiteDataset generate_site(const SiteProfile& profile, std::size_t input_dim,
                                 SplitRatios ratios = kDefaultSplit) {
  validate_profile(profile);
  require(input_dim >= 1, ErrorCode::InvalidProfile, "input_dim must be >= 1");
  const std::size_t n = profile.n_samples;

  SiteDataset ds;
  ds.site_id = profile.site_id;
  ds.labels.assign(n, 0);
  const std::size_t n_pos = positive_count(profile);
  std::fill(ds.labels.begin(), ds.labels.begin() + static_cast<std::ptrdiff_t>(n_pos), std::uint8_t{1});
  Rng label_rng(derive_seed(profile.seed, 0x1abe1u));
  label_rng.shuffle(std::span<std::uint8_t>(ds.labels));

  const double u = 1.0 / std::sqrt(static_cast<double>(input_dim));
  ds.features = FeatureMatrix(n, input_dim);
  Rng noise_rng(derive_seed(profile.seed, 0xfea7u));
  for (std::size_t i = 0; i < n; ++i) {
    const double centre = (ds.labels[i] ? 1.0 : -1.0) + profile.mean_shift;
    auto row = ds.features.row(i);
    for (std::size_t j = 0; j < input_dim; ++j)
      row[j] = static_cast<float>(centre * u + profile.noise_scale * noise_rng.normal());
  }
  ds.split = split_dataset(n, profile.seed, ratios);
  return ds;
}

// CSV: header f0,...,f{D-1},label; optional leading "# seed=<n>" and
// "# site=<id>" comment lines.

inline void write_csv(const SiteDataset& ds, std::ostream& out, std::optional<std::uint64_t> seed = std::nullopt) {
  if (seed) out << "# seed=" << *seed << '\n';
  out << "# site=" << ds.site_id << '\n';
  for (std::size_t j = 0; j < ds.dim(); ++j) out << 'f' << j << ',';
  out << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (float v : ds.features.row(i)) {
      auto res = std::to_chars(buf, buf + sizeof buf, v);
      out.write(buf, res.ptr - buf);
      out << ',';
    }
    out << int(ds.labels[i]) << '\n';
  }
}

inline void write_csv(const SiteDataset& ds, const std::filesystem::path& path,
                      std::optional<std::uint64_t> seed = std::nullopt) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  write_csv(ds, out, seed);
  require(out.good(), ErrorCode::IoError, "write failed for " + path.string());
}

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(',', start);
    cells.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return cells;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}

}  // namespace detail

/// Parses the CSV schema above. The split seed comes from a "# seed=" line
/// when present, otherwise from `default_seed`.
inline SiteDataset read_csv(std::istream& in, std::string site_id, std::uint64_t default_seed,
                            SplitRatios ratios = kDefaultSplit) {
  std::uint64_t seed = default_seed;
  std::string line;
  std::size_t line_no = 0;
  std::size_t dim = 0;
  bool have_header = false;
  std::vector<float> values;
  std::vector<std::uint8_t> labels;

  auto parse_error = [&](const std::string& what) {
    fail(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": " + what);
  };

  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = detail::trim(line);
    if (view.empty()) continue;
    if (view.front() == '#') {
      view.remove_prefix(1);
      view = detail::trim(view);
      if (view.starts_with("seed=")) {
        auto num = view.substr(5);
        auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), seed);
        if (ec != std::errc() || p != num.data() + num.size()) parse_error("bad seed comment");
      } else if (view.starts_with("site=")) {
        site_id = std::string(view.substr(5));
      }
      continue;
    }
    auto cells = detail::split_commas(view);
    if (!have_header) {
      require(cells.size() >= 2, ErrorCode::ParseError, "header needs at least one feature and a label");
      for (std::size_t j = 0; j + 1 < cells.size(); ++j)
        if (detail::trim(cells[j]) != "f" + std::to_string(j)) parse_error("expected header column f" + std::to_string(j));
      if (detail::trim(cells.back()) != "label") parse_error("last header column must be 'label'");
      dim = cells.size() - 1;
      have_header = true;
      continue;
    }
    if (cells.size() != dim + 1)
      parse_error("row has " + std::to_string(cells.size()) + " cells, expected " + std::to_string(dim + 1));
    for (std::size_t j = 0; j < dim; ++j) {
      auto cell = detail::trim(cells[j]);
      float v = 0;
      auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || p != cell.data() + cell.size() || !std::isfinite(v))
        parse_error("non-numeric feature '" + std::string(cell) + "' in column " + std::to_string(j));
      values.push_back(v);
    }
    auto label = detail::trim(cells.back());
    if (label != "0" && label != "1") parse_error("label '" + std::string(label) + "' not in {0,1}");
    labels.push_back(label == "1" ? 1 : 0);
  }
  require(have_header, ErrorCode::ParseError, "missing header");

  SiteDataset ds;
  ds.site_id = std::move(site_id);
  ds.features = FeatureMatrix(labels.size(), dim, std::move(values));
  ds.labels = std::move(labels);
  if (ds.size() >= 10) {
    ds.split = split_dataset(ds.size(), seed, ratios);
  } else {
    // Too small to split three ways; everything is training data.
    ds.split.train.resize(ds.size());
    std::iota(ds.split.train.begin(), ds.split.train.end(), std::size_t{0});
  }
  return ds;
}

inline SiteDataset load_csv(const std::filesystem::path& path, std::uint64_t default_seed = 0,
                            SplitRatios ratios = kDefaultSplit) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoError, "cannot open " + path.string());
  return read_csv(in, path.stem().string(), default_seed, ratios);
}

/// A named set of site profiles plus the experiment knobs that go with them.
struct Scenario {
  std::string name;
  std::vector<SiteProfile> sites;
  std::size_t input_dim = 16;
  double learning_rate = 0.02;
  SplitRatios split = kDefaultSplit;
};

inline void to_json(nlohmann::json& j, const SiteProfile& p) {
  j = {{"site_id", p.site_id},       {"n_samples", p.n_samples},     {"positive_fraction", p.positive_fraction},
       {"mean_shift", p.mean_shift}, {"noise_scale", p.noise_scale}, {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, SiteProfile& p) {
  j.at("site_id").get_to(p.site_id);
  j.at("n_samples").get_to(p.n_samples);
  j.at("positive_fraction").get_to(p.positive_fraction);
  p.mean_shift = j.value("mean_shift", 0.0);
  p.noise_scale = j.value("noise_scale", 1.0);
  p.seed = j.value("seed", std::uint64_t{0});
}

inline std::vector<Scenario> parse_scenarios(const nlohmann::json& doc) {
  std::vector<Scenario> out;
  try {
    for (const auto& s : doc.at("scenarios")) {
      Scenario sc;
      s.at("name").get_to(sc.name);
      sc.input_dim = s.value("input_dim", std::size_t{16});
      sc.learning_rate = s.value("learning_rate", 0.02);
      if (s.contains("split")) {
        sc.split.train_pct = s["split"].at(0).get<std::uint32_t>();
        sc.split.val_pct = s["split"].at(1).get<std::uint32_t>();
      }
      for (const auto& site : s.at("sites")) {
        SiteProfile p = site.get<SiteProfile>();
        validate_profile(p);
        sc.sites.push_back(std::move(p));
      }
      out.push_back(std::move(sc));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, std::string("scenario file: ") + e.what());
  }
  return out;
}

inline std::vector<Scenario> load_scenarios(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoError, "cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return parse_scenarios(doc);
}

/// Built-in scenarios. Site sizes follow the eight collaborating centres;
/// label skews for DRG (78% positive) and GAM/GHA (83% negative) are fixed,
/// the remaining fractions, shifts and noise levels are preset choices.
/// presets/scenarios.json carries the same definitions.
inline const std::vector<Scenario>& builtin_scenarios() {
  static const std::vector<Scenario> scenarios = [] {
    std::vector<Scenario> v;
    Scenario eight{"eight-sites", {}, 16, 0.02, kDefaultSplit};
    eight.sites = {
        {"DRG", 211, 0.78, -1.0, 0.6, 101},  {"ETH", 133, 0.72, -3.0, 0.6, 102},
        {"GHA", 250, 0.17, 0.5, 0.6, 103},   {"MZQ", 205, 0.35, 0.1, 0.6, 104},
        {"NIG", 1726, 0.45, 0.0, 0.6, 105},  {"GAM", 250, 0.17, 0.5, 0.6, 106},
        {"SEN", 98, 0.30, 0.2, 0.6, 107},    {"UGN", 507, 0.75, -1.2, 2.2, 108},
    };
    v.push_back(std::move(eight));

    Scenario two{"two-sites-skewed", {}, 16, 0.02, kDefaultSplit};
    two.sites = {{"GAM", 250, 0.17, 0.5, 0.6, 201}, {"DRG", 211, 0.78, -1.0, 0.6, 202}};
    v.push_back(std::move(two));

    Scenario sweep{"size-sweep", {}, 64, 0.02, kSizeSweepSplit};
    sweep.sites = {{"PUB", 1000, 0.5, 0.0, 1.0, 301}};
    v.push_back(std::move(sweep));
    return v;
  }();
  return scenarios;
}

inline const Scenario& scenario(std::string_view name) {
  for (const auto& s : builtin_scenarios())
    if (s.name == name) return s;
  fail(ErrorCode::UnknownPreset, "unknown preset '" + std::string(name) + "'");
}

inline std::vector<SiteProfile> scenario_preset(std::string_view name) { return scenario(name).sites; }

/// Copy of `profiles` with every seed re-derived from `seed`, used to draw
/// independent replicates of a scenario.
inline std::vector<SiteProfile> reseed(std::vector<SiteProfile> profiles, std::uint64_t seed) {
  for (auto& p : profiles) p.seed = derive_seed(p.seed, {seed, 0x5eedu});
  return profiles;
}

}  // namespace fedorch
