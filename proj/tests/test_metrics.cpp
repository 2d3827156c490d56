#include <cmath>
#include <sstream>

#include "fedorch/metrics.hpp"
#include "test_util.hpp"

using namespace fedorch;

namespace {

double brute_force_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::uint64_t half_units = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      ++pairs;
      if (s[i] > s[j]) half_units += 2;
      else if (s[i] == s[j]) half_units += 1;
    }
  }
  return static_cast<double>(half_units) / (2.0 * static_cast<double>(pairs));
}

TensorMap constant_model(std::size_t dim, double probability) {
  TensorMap t;
  t.add("w0", {static_cast<std::uint32_t>(dim), 1}, std::vector<float>(dim, 0.0f));
  t.add("b0", {1}, {static_cast<float>(std::log(probability / (1 - probability)))});
  return t;
}

}  // namespace

TEST(Confusion, Basics) {
  std::vector<double> s{0.9};
  std::vector<std::uint8_t> y{1};
  EXPECT_EQ(confusion(s, y), (ConfusionCounts{1, 0, 0, 0}));
  std::vector<double> tie{0.5};
  std::vector<std::uint8_t> neg{0};
  EXPECT_EQ(confusion(tie, neg).fp, 1u);
  EXPECT_FEDORCH_ERROR(confusion(std::vector<double>{0.1, 0.2}, y), ErrorCode::LengthMismatch);
  EXPECT_FEDORCH_ERROR(confusion({}, {}), ErrorCode::Empty);
}

TEST(Confusion, NigeriaOperatingPoint) {
  ConfusionCounts c{90, 15, 85, 10};
  EXPECT_DOUBLE_EQ(*sensitivity(c), 0.90);
  EXPECT_DOUBLE_EQ(*specificity(c), 0.85);
  EXPECT_DOUBLE_EQ(*balanced_accuracy(c), 0.875);
  EXPECT_DOUBLE_EQ(*accuracy(c), 0.875);
}

TEST(Confusion, IdentitiesOnRandomCounts) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    ConfusionCounts c{rng.below(50), rng.below(50), rng.below(50), rng.below(50)};
    auto se = sensitivity(c), sp = specificity(c);
    if (c.tp + c.fn) {
      EXPECT_EQ(*se, double(c.tp) / double(c.tp + c.fn));
    } else {
      EXPECT_FALSE(se);
    }
    if (c.tn + c.fp) {
      EXPECT_EQ(*sp, double(c.tn) / double(c.tn + c.fp));
    } else {
      EXPECT_FALSE(sp);
    }
    if (se && sp) {
      EXPECT_EQ(*balanced_accuracy(c), (*se + *sp) / 2);
    }
  }
}

TEST(RocAuc, HandValues) {
  std::vector<std::uint8_t> y{1, 1, 0, 0};
  EXPECT_EQ(roc_auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, y), 1.0);
  EXPECT_EQ(roc_auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, y), 0.5);
  EXPECT_EQ(roc_auc(std::vector<double>{0.8, 0.4, 0.6, 0.2}, y), 0.75);
  EXPECT_FEDORCH_ERROR(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<std::uint8_t>{1, 1}), ErrorCode::SingleClass);
  EXPECT_FEDORCH_ERROR(roc_auc(std::vector<double>{0.1}, std::vector<std::uint8_t>{0}), ErrorCode::SingleClass);
}

TEST(RocAuc, MatchesPairCountingAndSymmetry) {
  Rng rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng.below(300);
    std::vector<double> s(n), neg(n), squashed(n);
    std::vector<std::uint8_t> y(n);
    const bool coarse = trial % 2 == 0;  // force ties on half the trials
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<std::uint8_t>(rng.below(2));
      s[i] = coarse ? static_cast<double>(rng.below(7)) / 6.0 : rng.uniform();
      neg[i] = -s[i];
      squashed[i] = std::exp(3 * s[i]);
    }
    y[0] = 1;
    y[1] = 0;
    const double auc = roc_auc(s, y);
    EXPECT_NEAR(auc, brute_force_auc(s, y), 1e-12);
    EXPECT_NEAR(auc + roc_auc(neg, y), 1.0, 1e-12);
    EXPECT_NEAR(auc, roc_auc(squashed, y), 1e-12);
  }
}

TEST(CrossEval, SingleCellEqualsDirectEvaluation) {
  auto site = generate_site({"A", 100, 0.4, 0, 1, 3}, 3);
  auto model = init_model({3, {}, 4});
  auto cells = cross_eval({{"A", model}}, {{"A", site}});
  ASSERT_EQ(cells.size(), 1u);
  auto direct = evaluate(model, site, "A");
  EXPECT_EQ(cells[0].counts, direct.counts);
  EXPECT_EQ(cells[0].roc_auc, direct.roc_auc);
  EXPECT_EQ(cells[0].counts.total(), site.split.test.size());
}

TEST(CrossEval, EightSitesGiveSixtyFourCells) {
  std::map<std::string, TensorMap> models;
  std::map<std::string, SiteDataset> sites;
  std::uint64_t k = 0;
  for (const auto& p : scenario_preset("eight-sites")) {
    sites.emplace(p.site_id, generate_site(p, 4));
    models.emplace(p.site_id, init_model({4, {}, ++k}));
  }
  auto cells = cross_eval(models, sites);
  EXPECT_EQ(cells.size(), 64u);
}

TEST(CrossEval, ConstantPositiveModelOnSkewedSite) {
  auto site = generate_site({"GAM", 250, 0.17, 0.0, 1.0, 5}, 4);
  auto r = evaluate(constant_model(4, 0.99), site, "const");
  ASSERT_TRUE(r.specificity);
  EXPECT_EQ(*r.specificity, 0.0);
  if (r.sensitivity) {
    EXPECT_EQ(*r.sensitivity, 1.0);
  }
  EXPECT_EQ(r.counts.tn + r.counts.fn, 0u);
}

TEST(CrossEval, SingleClassCellIsFlaggedNotFatal) {
  auto site = generate_site({"S", 20, 0.5, 0.0, 1.0, 5}, 2);
  auto only_neg = site;
  only_neg.split.test.clear();
  for (std::size_t i = 0; i < site.size(); ++i)
    if (!site.labels[i]) only_neg.split.test.push_back(i);
  auto cells = cross_eval({{"m", init_model({2, {}, 1})}}, {{"S", only_neg}, {"T", site}});
  ASSERT_EQ(cells.size(), 2u);
  EXPECT_FALSE(cells[0].roc_auc);
  EXPECT_FALSE(cells[0].sensitivity);
  EXPECT_TRUE(cells[0].specificity);
}

TEST(CrossEval, DimensionMismatch) {
  auto site = generate_site({"A", 30, 0.5, 0, 1, 1}, 3);
  EXPECT_FEDORCH_ERROR(cross_eval({{"m", init_model({4, {}, 1})}}, {{"A", site}}), ErrorCode::DimensionMismatch);
}

TEST(CrossEval, CsvExportLeavesUndefinedAucEmpty) {
  EvalReport r;
  r.model_site = "m";
  r.test_site = "t";
  r.counts = {0, 1, 3, 0};
  r.specificity = 0.75;
  r.accuracy = 0.75;
  std::ostringstream out;
  write_eval_csv(std::span<const EvalReport>(&r, 1), out);
  EXPECT_EQ(out.str(),
            "model_site,test_site,tp,fp,tn,fn,sensitivity,specificity,balanced_accuracy,accuracy,roc_auc\n"
            "m,t,0,1,3,0,,0.75,,0.75,\n");
}

// A fixed model aligned with the class axis loses balanced accuracy as the
// site's noise grows.
TEST(NoiseProperty, MoreNoiseNeverHelpsAFixedModel) {
  const std::size_t dim = 8;
  TensorMap oracle;
  oracle.add("w0", {dim, 1}, std::vector<float>(dim, 1.0f));
  oracle.add("b0", {1}, {0.0f});
  double previous = 1.1;
  for (double noise : {0.0, 0.5, 1.0, 2.0, 4.0}) {
    double sum = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto site = generate_site({"N", 2000, 0.5, 0.0, noise, seed}, dim);
      sum += *evaluate(oracle, site).balanced_accuracy;
    }
    const double mean = sum / 10;
    EXPECT_LE(mean, previous) << "noise " << noise;
    if (noise == 0.0) {
      EXPECT_EQ(mean, 1.0);
    }
    previous = mean;
  }
}

TEST(Spearman, KnownValues) {
  std::vector<double> x{1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{10, 20, 30, 40, 50}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{5, 4, 3, 2, 1}), -1.0);
  EXPECT_NEAR(spearman(x, std::vector<double>{1, 3, 2, 4, 5}), 0.9, 1e-12);
}
