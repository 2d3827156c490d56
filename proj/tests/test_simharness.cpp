#include "fedorch/simharness.hpp"
#include "test_util.hpp"

using namespace fedorch;

namespace {

std::vector<SiteDataset> sites_of(std::string_view preset, std::uint64_t seed = 0) {
  const Scenario& sc = scenario(preset);
  std::vector<SiteDataset> out;
  for (const auto& p : reseed(sc.sites, seed)) out.push_back(generate_site(p, sc.input_dim, sc.split));
  return out;
}

SimConfig config(std::uint32_t rounds = 20) {
  SimConfig c;
  c.federation.total_rounds = rounds;
  c.trainer.learning_rate = 0.01;
  c.trainer.seed = 42;
  c.model_seed = 7;
  return c;
}

/// The same federation computed directly: every site trains from the
/// current global model in turn, then the sample-weighted mean is taken.
std::vector<TensorMap> straight_line(const std::vector<SiteDataset>& sites, const SimConfig& cfg) {
  TensorMap global = init_model(ModelSpec{sites[0].dim(), cfg.hidden_dims, cfg.model_seed});
  std::vector<TrainerConfig> tcs;
  std::vector<TrainerState> states;
  for (std::size_t k = 0; k < sites.size(); ++k) {
    TrainerConfig tc = cfg.trainer;
    tc.seed = derive_seed(cfg.trainer.seed, k);
    tcs.push_back(tc);
    states.push_back(TrainerState::fresh(tc));
  }
  std::vector<TensorMap> rounds;
  for (std::uint32_t r = 1; r <= cfg.federation.total_rounds; ++r) {
    std::vector<WeightedUpdate> ups;
    for (std::size_t k = 0; k < sites.size(); ++k) {
      TrainReport rep =
          train_local(global, sites[k], cfg.federation.epochs_per_round, derive_seed(tcs[k].seed, r), tcs[k], states[k]);
      ups.push_back(WeightedUpdate{rep.weights, rep.sample_count, sites[k].site_id});
    }
    global = aggregate(ups);
    rounds.push_back(global);
  }
  return rounds;
}

std::size_t count_kind(const std::vector<FederationEvent>& ev, std::string_view kind) {
  std::size_t n = 0;
  for (const auto& e : ev) n += e.kind == kind;
  return n;
}

}  // namespace

TEST(Sim, MatchesStraightLineOracle) {
  auto sites = sites_of("two-sites-skewed");
  auto cfg = config();
  SimResult res = run_sim(sites, cfg);
  auto oracle = straight_line(sites, cfg);
  ASSERT_EQ(res.round_models.size(), oracle.size());
  for (std::size_t r = 0; r < oracle.size(); ++r) EXPECT_TRUE(bit_equal(res.round_models[r], oracle[r])) << "round " << r + 1;
  EXPECT_TRUE(bit_equal(res.final_model, oracle.back()));
  EXPECT_EQ(res.status, RoundStatus::Finished);
  EXPECT_EQ(res.stats.trainings, 2u * 20u);
  EXPECT_EQ(res.stats.messages_dropped, 0u);
}

TEST(Sim, DefaultScheduleTwentyRoundsOfTenEpochs) {
  auto sites = sites_of("two-sites-skewed");
  SimConfig cfg;
  cfg.trainer.learning_rate = 0.01;
  SimResult res = run_sim(sites, cfg);
  EXPECT_EQ(count_kind(res.events, "round_aggregated"), 20u);
  for (const auto& [r, m] : res.round_metrics) {
    EXPECT_EQ(m.epochs, std::set<std::uint32_t>{10}) << r;
    EXPECT_EQ(m.contributors.size(), 2u);
  }
}

TEST(Sim, OneNodeOneRoundEqualsDirectTraining) {
  auto sites = sites_of("two-sites-skewed");
  sites.resize(1);
  auto cfg = config(1);
  for (std::uint32_t epochs : {1u, 3u, 10u}) {
    cfg.federation.epochs_per_round = epochs;
    SimResult res = run_sim(sites, cfg);
    TrainerConfig tc = cfg.trainer;
    TrainReport direct =
        train_local(res.initial_model, sites[0], epochs, derive_seed(derive_seed(cfg.trainer.seed, 0), 1), tc);
    EXPECT_TRUE(bit_equal(res.final_model, direct.weights)) << epochs;
  }
}

TEST(Sim, DeterministicAcrossRuns) {
  auto sites = sites_of("two-sites-skewed");
  FaultPlan plan;
  plan.seed = 3;
  plan.drop_probability = 0.2;
  plan.latency = {1, 40};
  auto a = run_sim(sites, config(5), plan);
  auto b = run_sim(sites, config(5), plan);
  EXPECT_TRUE(bit_equal(a.final_model, b.final_model));
  EXPECT_EQ(a.events, b.events);
  EXPECT_EQ(a.stats.messages_sent, b.stats.messages_sent);
  EXPECT_EQ(a.stats.virtual_time_ms, b.stats.virtual_time_ms);
}

TEST(Sim, DropsAndLatencyDoNotChangeTheModel) {
  auto sites = sites_of("two-sites-skewed");
  auto cfg = config(8);
  auto clean = run_sim(sites, cfg);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    FaultPlan plan;
    plan.seed = seed;
    plan.drop_probability = 0.3;
    plan.latency = {2, 80};
    auto faulty = run_sim(sites, cfg, plan);
    EXPECT_GT(faulty.stats.messages_dropped, 0u);
    EXPECT_GT(faulty.stats.disconnects, 0u);
    EXPECT_TRUE(bit_equal(faulty.final_model, clean.final_model)) << seed;
    ASSERT_EQ(faulty.round_models.size(), clean.round_models.size());
    EXPECT_EQ(count_kind(faulty.events, "round_aggregated"), 8u);
  }
}

TEST(Sim, ScriptedDisconnectsRecover) {
  auto sites = sites_of("two-sites-skewed");
  auto cfg = config(6);
  auto clean = run_sim(sites, cfg);
  FaultPlan plan;
  plan.disconnects = {{"GAM", 2, DisconnectPhase::BeforeTrain}, {"DRG", 4, DisconnectPhase::AfterTrainBeforeSubmit}};
  auto res = run_sim(sites, cfg, plan);
  EXPECT_EQ(res.stats.scripted_disconnects, 2u);
  EXPECT_TRUE(bit_equal(res.final_model, clean.final_model));
  // The retrained round is served from the learner's cache.
  EXPECT_EQ(res.stats.trainings, clean.stats.trainings);
}

TEST(Sim, CoordinatorCrashRestartsFromCheckpoint) {
  auto sites = sites_of("two-sites-skewed");
  auto cfg = config(20);
  auto clean = run_sim(sites, cfg);
  FaultPlan plan;
  plan.coordinator_crash_at = 10;
  auto res = run_sim(sites, cfg, plan);
  EXPECT_EQ(res.stats.crashes, 1u);
  EXPECT_GT(res.stats.refused_connections, 0u);
  EXPECT_TRUE(bit_equal(res.final_model, clean.final_model));
  EXPECT_EQ(count_kind(res.events, "round_aggregated"), 20u);
  EXPECT_EQ(count_kind(res.events, "update_accepted"), 40u);
}

TEST(Sim, AllFaultsTogether) {
  auto sites = sites_of("eight-sites");
  auto cfg = config(6);
  auto clean = run_sim(sites, cfg);
  FaultPlan plan;
  plan.seed = 11;
  plan.drop_probability = 0.3;
  plan.latency = {1, 30};
  plan.disconnects = {{"NIG", 2, DisconnectPhase::BeforeTrain}, {"UGN", 3, DisconnectPhase::AfterTrainBeforeSubmit}};
  plan.coordinator_crash_at = 4;
  auto res = run_sim(sites, cfg, plan);
  EXPECT_EQ(res.stats.crashes, 1u);
  EXPECT_EQ(res.stats.scripted_disconnects, 2u);
  EXPECT_TRUE(bit_equal(res.final_model, clean.final_model));
}

TEST(Sim, InvalidPlans) {
  auto sites = sites_of("two-sites-skewed");
  auto cfg = config(5);
  auto expect_invalid = [&](const FaultPlan& p) { EXPECT_FEDORCH_ERROR(run_sim(sites, cfg, p), ErrorCode::InvalidPlan); };
  FaultPlan p;
  p.drop_probability = 1.5;
  expect_invalid(p);
  p = {};
  p.drop_probability = -0.1;
  expect_invalid(p);
  p = {};
  p.latency = {10, 5};
  expect_invalid(p);
  p = {};
  p.disconnects = {{"XXX", 1, DisconnectPhase::BeforeTrain}};
  expect_invalid(p);
  p = {};
  p.disconnects = {{"GAM", 6, DisconnectPhase::BeforeTrain}};
  expect_invalid(p);
  p = {};
  p.coordinator_crash_at = 0;
  expect_invalid(p);
  EXPECT_FEDORCH_ERROR(parse_disconnect_phase("during_train"), ErrorCode::InvalidPlan);
  EXPECT_FEDORCH_ERROR(run_sim({}, cfg, {}), ErrorCode::InvalidPlan);
}

TEST(Sim, StallsAreReported) {
  auto sites = sites_of("two-sites-skewed");
  auto cfg = config(3);
  cfg.max_events = 5'000;
  FaultPlan all_lost;
  all_lost.drop_probability = 1.0;
  EXPECT_FEDORCH_ERROR(run_sim(sites, cfg, all_lost), ErrorCode::Stalled);

  // Strict quorum with a deadline shorter than one exchange pauses the round.
  cfg.federation.round_timeout_ms = 10;
  FaultPlan slow;
  slow.latency = {50, 50};
  EXPECT_FEDORCH_ERROR(run_sim(sites, cfg, slow), ErrorCode::Stalled);
}
