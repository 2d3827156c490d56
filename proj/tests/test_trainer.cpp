#include <cmath>
#include <numbers>

#include "fedorch/trainer.hpp"
#include "test_util.hpp"

using namespace fedorch;

namespace {

TensorMap logistic(std::vector<float> w, float b) {
  TensorMap t;
  const auto d = static_cast<std::uint32_t>(w.size());
  t.add("w0", {d, 1}, std::move(w));
  t.add("b0", {1}, {b});
  return t;
}

SiteDataset toy_site(std::size_t n, std::size_t dim, double noise, std::uint64_t seed) {
  return generate_site({"toy", n, 0.5, 0.0, noise, seed}, dim);
}

}  // namespace

TEST(InitModel, DeterministicLayoutAndZeroBias) {
  ModelSpec spec{4, {}, 123};
  auto a = init_model(spec), b = init_model(spec);
  EXPECT_TRUE(bit_equal(a, b));
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a.entries()[0].name, "w0");
  EXPECT_EQ(a.entries()[0].shape, (Shape{4, 1}));
  EXPECT_EQ(a.entries()[1].name, "b0");
  EXPECT_EQ(a.entries()[1].shape, (Shape{1}));
  EXPECT_EQ(a.entries()[1].data, std::vector<float>{0.0f});

  auto mlp = init_model({3, {5, 2}, 1});
  std::vector<std::string> names;
  for (const auto& e : mlp.entries()) names.push_back(e.name);
  EXPECT_EQ(names, (std::vector<std::string>{"w0", "b0", "w1", "b1", "w2", "b2"}));
  EXPECT_EQ(mlp.at("w1").shape, (Shape{5, 2}));
  EXPECT_EQ(mlp.at("w2").shape, (Shape{2, 1}));
}

TEST(InitModel, DifferentSeedsDiffer) {
  for (std::uint64_t s = 0; s < 100; ++s)
    EXPECT_GT(l2_distance(init_model({6, {3}, 2 * s}), init_model({6, {3}, 2 * s + 1})), 0.0);
}

TEST(InitModel, InvalidSpec) {
  EXPECT_FEDORCH_ERROR(init_model({0, {}, 1}), ErrorCode::InvalidSpec);
  EXPECT_FEDORCH_ERROR(init_model({3, {0}, 1}), ErrorCode::InvalidSpec);
}

TEST(Forward, ClosedFormValues) {
  const std::vector<float> x3{0.3f, -8.0f, 2.0f};
  EXPECT_EQ(forward(logistic({0, 0, 0}, 0), x3), 0.5);
  const std::vector<float> zero{0.0f}, one{1.0f};
  EXPECT_EQ(forward(logistic({1}, 0), zero), 0.5);
  EXPECT_NEAR(forward(logistic({2}, -1), one), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(forward(logistic({2}, -1), one), 0.7310585786300049, 1e-15);
  EXPECT_FEDORCH_ERROR(forward(logistic({1, 2}, 0), one), ErrorCode::DimensionMismatch);
}

TEST(Loss, HalfPredictionGivesLn2) {
  auto ds = toy_site(40, 3, 1.0, 1);
  auto lg = loss_and_gradient(logistic({0, 0, 0}, 0), ds.features, ds.labels);
  EXPECT_NEAR(lg.loss, std::numbers::ln2, 1e-15);
}

TEST(Loss, DuplicatedBatchLeavesLossAndGradientUnchanged) {
  auto ds = toy_site(30, 4, 1.0, 2);
  auto w = init_model({4, {3}, 5});
  std::vector<float> doubled = ds.features.data();
  doubled.insert(doubled.end(), ds.features.data().begin(), ds.features.data().end());
  std::vector<std::uint8_t> labels2 = ds.labels;
  labels2.insert(labels2.end(), ds.labels.begin(), ds.labels.end());
  FeatureMatrix x2(ds.size() * 2, 4, doubled);

  auto a = loss_and_gradient(w, ds.features, ds.labels);
  auto b = loss_and_gradient(w, x2, labels2);
  EXPECT_NEAR(a.loss, b.loss, 1e-14);
  EXPECT_LT(l2_distance(a.grad, b.grad), 1e-6);
}

TEST(Loss, Errors) {
  FeatureMatrix empty(0, 2);
  EXPECT_FEDORCH_ERROR(loss_and_gradient(logistic({0, 0}, 0), empty, {}), ErrorCode::EmptyBatch);
  auto ds = toy_site(20, 3, 1.0, 3);
  EXPECT_FEDORCH_ERROR(loss_and_gradient(logistic({0, 0}, 0), ds.features, ds.labels), ErrorCode::DimensionMismatch);
}

// Central differences on the double-precision parameter vector.
TEST(Loss, GradientMatchesCentralDifferences) {
  Rng rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t dim = 1 + rng.below(6);
    std::vector<std::size_t> hidden;
    for (std::size_t l = rng.below(3); l > 0; --l) hidden.push_back(1 + rng.below(6));
    auto ds = toy_site(12 + rng.below(20), dim, 1.0, rng.next_u64());
    Network net = Network::from_weights(init_model({dim, hidden, rng.next_u64()}));
    for (auto& p : net.params()) p += rng.uniform(-0.5, 0.5);
    const auto rows = all_rows(ds.size());
    std::vector<double> grad;
    net.loss_and_gradient(ds.features, ds.labels, rows, grad);
    const double h = 1e-4;
    for (std::size_t k = 0; k < net.parameter_count(); ++k) {
      const double saved = net.params()[k];
      net.params()[k] = saved + h;
      const double up = net.loss(ds.features, ds.labels, rows);
      net.params()[k] = saved - h;
      const double down = net.loss(ds.features, ds.labels, rows);
      net.params()[k] = saved;
      EXPECT_NEAR(grad[k], (up - down) / (2 * h), 1e-5) << "param " << k;
    }
  }
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    TensorMap w = logistic({static_cast<float>(rng.uniform(-1, 1)), static_cast<float>(rng.uniform(-1, 1))},
                           static_cast<float>(rng.uniform(-1, 1)));
    std::vector<float> g(3);
    for (auto& v : g) v = static_cast<float>(rng.uniform(-3, 3));
    TensorMap grad = w.with_values(g);
    OptimizerState s;
    s.learning_rate = 0.001;
    auto [s2, w2] = adam_step(s, w, grad);
    EXPECT_EQ(s2.step, 1u);
    auto before = w.flatten(), after = w2.flatten();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double expected = -0.001 * g[i] / (std::fabs(g[i]) + 1e-8);
      EXPECT_NEAR(after[i] - before[i], expected, 1e-7);
    }
  }
}

TEST(Adam, ZeroGradientLeavesFreshWeightsUnchanged) {
  TensorMap w = logistic({0.25f, -1.5f}, 0.5f);
  auto [s, w2] = adam_step(OptimizerState{}, w, w.with_values(std::vector<float>(3, 0.0f)));
  EXPECT_TRUE(bit_equal(w, w2));
  EXPECT_EQ(s.step, 1u);
  for (double m : s.first_moment) EXPECT_EQ(m, 0.0);
}

TEST(Adam, MomentsDecayUnderZeroGradient) {
  TensorMap w = logistic({0.25f}, 0.5f);
  auto [s1, w1] = adam_step(OptimizerState{}, w, w.with_values(std::vector<float>{1.0f, -2.0f}));
  auto [s2, w2] = adam_step(s1, w1, w.with_values(std::vector<float>{0.0f, 0.0f}));
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(s2.first_moment[i], 0.9 * s1.first_moment[i]);
    EXPECT_DOUBLE_EQ(s2.second_moment[i], 0.999 * s1.second_moment[i]);
  }
}

TEST(Adam, DeterministicTrajectories) {
  auto run = [] {
    Rng rng(8);
    TensorMap w = init_model({3, {2}, 4});
    OptimizerState s;
    for (int i = 0; i < 30; ++i) {
      std::vector<float> g(w.numel());
      for (auto& v : g) v = static_cast<float>(rng.uniform(-1, 1));
      std::tie(s, w) = adam_step(s, w, w.with_values(g));
    }
    return w;
  };
  EXPECT_TRUE(bit_equal(run(), run()));
}

TEST(Adam, StructureMismatch) {
  TensorMap w = logistic({1, 2}, 0);
  EXPECT_FEDORCH_ERROR(adam_step({}, w, logistic({1}, 0)), ErrorCode::StructureMismatch);
  OptimizerState bad;
  bad.first_moment = {0, 0};
  bad.second_moment = {0, 0};
  EXPECT_FEDORCH_ERROR(adam_step(bad, w, w), ErrorCode::StructureMismatch);
}

TEST(Scheduler, TenFlatObservationsCutTheRate) {
  PlateauScheduler s;
  double lr = 0.001;
  std::tie(s, lr) = scheduler_observe(s, 1.0, lr);
  for (int i = 1; i <= 10; ++i) {
    std::tie(s, lr) = scheduler_observe(s, 1.0, lr);
    if (i < 10) {
      EXPECT_EQ(lr, 0.001) << "observation " << i;
    }
  }
  EXPECT_EQ(lr, 0.001 * 0.1);
  EXPECT_EQ(s.evals_since_improvement, 0u);
}

TEST(Scheduler, StrictlyDecreasingNeverCuts) {
  PlateauScheduler s;
  double lr = 0.01;
  for (int i = 0; i < 200; ++i) std::tie(s, lr) = scheduler_observe(s, 10.0 - 0.01 * i, lr);
  EXPECT_EQ(lr, 0.01);
}

TEST(Scheduler, ImprovementResetsCounter) {
  PlateauScheduler s;
  double lr = 1.0;
  std::tie(s, lr) = scheduler_observe(s, 5.0, lr);
  for (int i = 0; i < 8; ++i) std::tie(s, lr) = scheduler_observe(s, 5.0, lr);
  std::tie(s, lr) = scheduler_observe(s, 4.0, lr);  // 9th observation improves
  for (int i = 1; i <= 10; ++i) {
    std::tie(s, lr) = scheduler_observe(s, 4.0, lr);
    EXPECT_EQ(lr, i < 10 ? 1.0 : 0.1) << i;
  }
  // Equal loss is not an improvement.
  EXPECT_EQ(s.best_loss, 4.0);
}

TEST(Scheduler, RejectsNonFinite) {
  EXPECT_FEDORCH_ERROR(scheduler_observe({}, std::nan(""), 1.0), ErrorCode::NonFiniteLoss);
  EXPECT_FEDORCH_ERROR(scheduler_observe({}, INFINITY, 1.0), ErrorCode::NonFiniteLoss);
}

TEST(TrainLocal, ReducesLossOnSeparableData) {
  auto ds = generate_site({"sep", 200, 0.4, 0.0, 0.3, 6}, 5);
  auto w0 = init_model({5, {}, 1});
  TrainerConfig cfg;
  cfg.learning_rate = 0.01;
  auto r = train_local(w0, ds, 5, 77, cfg);
  EXPECT_LT(r.final_train_loss, r.initial_train_loss);
  EXPECT_EQ(r.sample_count, ds.split.train.size());
  EXPECT_EQ(r.epochs_run, 5u);
}

TEST(TrainLocal, Deterministic) {
  auto ds = toy_site(150, 4, 1.0, 9);
  auto w0 = init_model({4, {3}, 2});
  auto a = train_local(w0, ds, 4, 5), b = train_local(w0, ds, 4, 5);
  EXPECT_TRUE(bit_equal(a.weights, b.weights));
  EXPECT_EQ(a.final_val_loss, b.final_val_loss);
}

TEST(TrainLocal, ChainedCallsEqualOneLongCall) {
  auto ds = toy_site(180, 4, 1.2, 10);
  auto w0 = init_model({4, {}, 3});
  TrainerConfig cfg;
  cfg.learning_rate = 0.05;  // large enough that the scheduler fires within 20 epochs
  cfg.plateau_patience = 3;
  TrainerState whole = TrainerState::fresh(cfg);
  auto one = train_local(w0, ds, 20, 42, cfg, whole);

  TrainerState chained = TrainerState::fresh(cfg);
  auto first = train_local(w0, ds, 10, 42, cfg, chained);
  auto second = train_local(first.weights, ds, 10, 42, cfg, chained);
  EXPECT_TRUE(bit_equal(one.weights, second.weights));
  EXPECT_EQ(whole.optimizer.learning_rate, chained.optimizer.learning_rate);
  EXPECT_EQ(whole.optimizer.step, chained.optimizer.step);
}

TEST(TrainLocal, LearningRateOnlyFallsByExactFactors) {
  auto ds = toy_site(120, 3, 2.0, 11);
  TrainerConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.plateau_patience = 2;
  auto r = train_local(init_model({3, {}, 0}), ds, 40, 1, cfg);
  bool reduced = false;
  for (std::size_t i = 1; i < r.learning_rates.size(); ++i) {
    const double prev = r.learning_rates[i - 1], cur = r.learning_rates[i];
    EXPECT_TRUE(cur == prev || cur == prev * 0.1) << i;
    reduced |= cur != prev;
  }
  EXPECT_TRUE(reduced);
}

TEST(TrainLocal, Errors) {
  auto ds = toy_site(50, 3, 1.0, 12);
  auto w = init_model({3, {}, 0});
  auto no_val = ds;
  no_val.split.val.clear();
  EXPECT_FEDORCH_ERROR(train_local(w, no_val, 1, 0), ErrorCode::EmptySplit);
  auto no_train = ds;
  no_train.split.train.clear();
  EXPECT_FEDORCH_ERROR(train_local(w, no_train, 1, 0), ErrorCode::EmptySplit);
  EXPECT_FEDORCH_ERROR(train_local(init_model({4, {}, 0}), ds, 1, 0), ErrorCode::DimensionMismatch);
}
