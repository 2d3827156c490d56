#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedorch/datakit.hpp"
#include "fedorch/metrics.hpp"
#include "fedorch/simharness.hpp"
#include "fedorch/trainer.hpp"

namespace fedorch {

inline constexpr std::string_view kFederatedModel = "FED";

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::uint32_t local_epochs = 100;
  std::uint32_t total_rounds = 20;
  std::uint32_t epochs_per_round = 10;
  std::size_t batch_size = 32;
  std::optional<double> learning_rate;  // unset: the scenario's rate
  std::vector<std::size_t> hidden_dims;
  FaultPlan faults;
  std::string ablate_site = "UGN";  // empty: no ablation run
  std::vector<std::size_t> sweep_sizes{200, 400, 600, 800, 1000};
  std::size_t holdout_size = 4000;
};

/// Metrics of one pooled evaluation: confusion counts summed over sites.
struct PooledMetrics {
  ConfusionCounts counts;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> balanced_accuracy;
  std::optional<double> mean_site_balanced_accuracy;
};

struct RoundGlobalMetrics {
  std::uint32_t round = 0;
  PooledMetrics metrics;
};

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<RoundGlobalMetrics> rounds;  // federated global model after each round
  std::vector<EvalReport> cross_eval;       // local models and FED against every site
  std::vector<EvalReport> ablation_eval;    // federation without the ablated site
  SimStats sim;
};

/// A model's seed-averaged scores on sites other than its own (all sites for FED).
struct ModelSummary {
  std::string model_site;
  std::optional<double> own_balanced_accuracy;
  std::optional<double> cross_sensitivity;
  std::optional<double> cross_specificity;
  std::optional<double> cross_balanced_accuracy;
  bool collapsed = false;  // cross sensitivity or specificity below 0.1
};

struct SizePoint {
  std::size_t size = 0;
  std::vector<double> holdout_balanced_accuracy;  // one per seed
  std::vector<std::optional<double>> own_balanced_accuracy;
  std::vector<std::optional<double>> holdout_auc;
  double mean_holdout_balanced_accuracy = 0.0;
  std::optional<double> mean_own_balanced_accuracy;
};

struct ExperimentReport {
  std::string name;
  std::string scenario;
  std::vector<std::uint64_t> seeds;
  double wall_clock_s = 0.0;
  std::vector<SeedRun> runs;

  std::vector<ModelSummary> models;  // locals in site order, then FED
  double local_cross_balanced_accuracy = 0.0;
  double federated_cross_balanced_accuracy = 0.0;
  std::size_t collapsed_models = 0;
  std::optional<double> ablation_with;     // FED balanced accuracy on the sites both runs share
  std::optional<double> ablation_without;

  std::vector<SizePoint> sweep;
  std::optional<double> sweep_spearman_holdout;
  std::optional<double> sweep_spearman_own;
};

namespace detail {

inline std::optional<double> mean_of(const std::vector<std::optional<double>>& v) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& x : v)
    if (x) {
      sum += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

inline PooledMetrics pooled(const std::vector<EvalReport>& reports) {
  PooledMetrics m;
  std::vector<std::optional<double>> per_site;
  for (const auto& r : reports) {
    m.counts += r.counts;
    per_site.push_back(r.balanced_accuracy);
  }
  m.sensitivity = sensitivity(m.counts);
  m.specificity = specificity(m.counts);
  m.balanced_accuracy = balanced_accuracy(m.counts);
  m.mean_site_balanced_accuracy = mean_of(per_site);
  return m;
}

inline std::vector<EvalReport> eval_on(const TensorMap& model, const std::string& name,
                                       const std::vector<SiteDataset>& sites) {
  std::vector<EvalReport> out;
  for (const auto& s : sites) out.push_back(evaluate(model, s, name));
  return out;
}

inline std::vector<SiteDataset> build_sites(const Scenario& sc, std::uint64_t seed) {
  std::vector<SiteDataset> out;
  for (const auto& p : reseed(sc.sites, seed)) out.push_back(generate_site(p, sc.input_dim, sc.split));
  return out;
}

inline TrainerConfig trainer_for(const Scenario& sc, const ExperimentConfig& cfg, std::uint64_t seed) {
  TrainerConfig tc;
  tc.learning_rate = cfg.learning_rate.value_or(sc.learning_rate);
  tc.batch_size = cfg.batch_size;
  tc.epochs_per_round = cfg.epochs_per_round;
  tc.seed = derive_seed(seed, 0x7a11u);
  return tc;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

inline SimConfig federated_config(const Scenario& sc, const ExperimentConfig& cfg, std::uint64_t seed) {
  SimConfig s;
  s.federation.total_rounds = cfg.total_rounds;
  s.federation.epochs_per_round = cfg.epochs_per_round;
  s.trainer = detail::trainer_for(sc, cfg, seed);
  s.hidden_dims = cfg.hidden_dims;
  s.model_seed = derive_seed(seed, 0x1417u);
  return s;
}

/// Trains one local baseline per site for `local_epochs` and one federated
/// model, then scores every model on every site's test split.
inline ExperimentReport experiment_local_vs_federated(const Scenario& sc, const ExperimentConfig& cfg = {}) {
  require(!cfg.seeds.empty(), ErrorCode::InvalidSpec, "at least one seed is required");
  require(cfg.local_epochs >= 1, ErrorCode::InvalidSpec, "local_epochs must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport rep;
  rep.name = "local_vs_federated";
  rep.scenario = sc.name;
  rep.seeds = cfg.seeds;

  const bool ablate = !cfg.ablate_site.empty() && sc.sites.size() > 1 &&
                      std::any_of(sc.sites.begin(), sc.sites.end(),
                                  [&](const SiteProfile& p) { return p.site_id == cfg.ablate_site; });

  for (std::uint64_t seed : cfg.seeds) {
    const auto sites = detail::build_sites(sc, seed);
    const SimConfig sim_cfg = federated_config(sc, cfg, seed);
    const TensorMap init = init_model(ModelSpec{sc.input_dim, cfg.hidden_dims, sim_cfg.model_seed});

    SeedRun run;
    run.seed = seed;
    for (std::size_t k = 0; k < sites.size(); ++k) {
      TrainerConfig tc = sim_cfg.trainer;
      tc.seed = node_trainer_seed(sim_cfg, k);
      TrainReport local = train_local(init, sites[k], cfg.local_epochs, derive_seed(tc.seed, 0x10ca1u), tc);
      auto ev = detail::eval_on(local.weights, sites[k].site_id, sites);
      run.cross_eval.insert(run.cross_eval.end(), ev.begin(), ev.end());
    }

    SimResult fed = run_sim(sites, sim_cfg, cfg.faults);
    run.sim = fed.stats;
    for (std::size_t r = 0; r < fed.round_models.size(); ++r)
      run.rounds.push_back(RoundGlobalMetrics{static_cast<std::uint32_t>(r + 1),
                                              detail::pooled(detail::eval_on(fed.round_models[r], "FED", sites))});
    auto fed_ev = detail::eval_on(fed.final_model, std::string(kFederatedModel), sites);
    run.cross_eval.insert(run.cross_eval.end(), fed_ev.begin(), fed_ev.end());

    if (ablate) {
      std::vector<SiteDataset> kept;
      for (const auto& s : sites)
        if (s.site_id != cfg.ablate_site) kept.push_back(s);
      FaultPlan plan = cfg.faults;
      std::erase_if(plan.disconnects, [&](const ScriptedDisconnect& d) { return d.node_id == cfg.ablate_site; });
      SimResult without = run_sim(kept, sim_cfg, plan);
      run.ablation_eval = detail::eval_on(without.final_model, std::string(kFederatedModel), kept);
    }
    rep.runs.push_back(std::move(run));
  }

  // Seed-averaged summaries.
  std::vector<std::string> names;
  for (const auto& p : sc.sites) names.push_back(p.site_id);
  names.emplace_back(kFederatedModel);
  std::vector<double> local_cross;
  for (const auto& name : names) {
    const bool fed = name == kFederatedModel;
    std::vector<std::optional<double>> own, se, sp, ba;
    for (const auto& run : rep.runs) {
      std::vector<std::optional<double>> rse, rsp, rba;
      for (const auto& e : run.cross_eval) {
        if (e.model_site != name) continue;
        if (e.test_site == name) own.push_back(e.balanced_accuracy);
        if (!fed && e.test_site == name) continue;
        rse.push_back(e.sensitivity);
        rsp.push_back(e.specificity);
        rba.push_back(e.balanced_accuracy);
      }
      se.push_back(detail::mean_of(rse));
      sp.push_back(detail::mean_of(rsp));
      ba.push_back(detail::mean_of(rba));
    }
    ModelSummary m{name, detail::mean_of(own), detail::mean_of(se), detail::mean_of(sp), detail::mean_of(ba), false};
    m.collapsed = (m.cross_sensitivity && *m.cross_sensitivity < 0.1) || (m.cross_specificity && *m.cross_specificity < 0.1);
    if (fed) {
      rep.federated_cross_balanced_accuracy = m.cross_balanced_accuracy.value_or(0.0);
    } else {
      if (m.collapsed) ++rep.collapsed_models;
      if (m.cross_balanced_accuracy) local_cross.push_back(*m.cross_balanced_accuracy);
    }
    rep.models.push_back(std::move(m));
  }
  if (!local_cross.empty())
    rep.local_cross_balanced_accuracy =
        std::accumulate(local_cross.begin(), local_cross.end(), 0.0) / static_cast<double>(local_cross.size());

  if (ablate) {
    std::vector<std::optional<double>> with, without;
    for (const auto& run : rep.runs) {
      std::vector<std::optional<double>> w, wo;
      for (const auto& e : run.cross_eval)
        if (e.model_site == kFederatedModel && e.test_site != cfg.ablate_site) w.push_back(e.balanced_accuracy);
      for (const auto& e : run.ablation_eval) wo.push_back(e.balanced_accuracy);
      with.push_back(detail::mean_of(w));
      without.push_back(detail::mean_of(wo));
    }
    rep.ablation_with = detail::mean_of(with);
    rep.ablation_without = detail::mean_of(without);
  }
  rep.wall_clock_s = detail::seconds_since(t0);
  return rep;
}

/// One centrally trained model per dataset size, scored on its own test
/// split and on a large held-out sample from the same profile.
inline ExperimentReport experiment_size_sweep(const Scenario& sc, const ExperimentConfig& cfg = {}) {
  require(!cfg.seeds.empty(), ErrorCode::InvalidSpec, "at least one seed is required");
  require(sc.sites.size() == 1, ErrorCode::InvalidSpec, "size sweep needs a single-site scenario");
  require(!cfg.sweep_sizes.empty(), ErrorCode::InvalidSpec, "no sweep sizes");
  for (std::size_t n : cfg.sweep_sizes)
    require(n >= 10, ErrorCode::InvalidProfile, "sweep size " + std::to_string(n) + " is below the minimum of 10");
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport rep;
  rep.name = "size_sweep";
  rep.scenario = sc.name;
  rep.seeds = cfg.seeds;
  for (std::size_t n : cfg.sweep_sizes) rep.sweep.push_back(SizePoint{n, {}, {}, {}, 0.0, std::nullopt});

  for (std::uint64_t seed : cfg.seeds) {
    SiteProfile base = reseed(sc.sites, seed).front();
    SiteProfile hp = base;
    hp.n_samples = cfg.holdout_size;
    hp.seed = derive_seed(base.seed, 0x401du);
    const SiteDataset holdout = generate_site(hp, sc.input_dim, SplitRatios{0, 0});
    for (auto& point : rep.sweep) {
      SiteProfile p = base;
      p.n_samples = point.size;
      p.seed = derive_seed(base.seed, point.size);
      const SiteDataset ds = generate_site(p, sc.input_dim, sc.split);
      TrainerConfig tc = detail::trainer_for(sc, cfg, seed);
      const TensorMap init = init_model(ModelSpec{sc.input_dim, cfg.hidden_dims, derive_seed(seed, 0x1417u)});
      TrainReport tr = train_local(init, ds, cfg.local_epochs, derive_seed(tc.seed, point.size), tc);
      point.own_balanced_accuracy.push_back(evaluate(tr.weights, ds, "sweep").balanced_accuracy);
      EvalReport h = evaluate(tr.weights, holdout, "sweep");
      point.holdout_balanced_accuracy.push_back(h.balanced_accuracy.value_or(0.0));
      point.holdout_auc.push_back(h.roc_auc);
    }
  }
  std::vector<double> sizes, held, own;
  bool own_complete = true;
  for (auto& point : rep.sweep) {
    point.mean_holdout_balanced_accuracy =
        std::accumulate(point.holdout_balanced_accuracy.begin(), point.holdout_balanced_accuracy.end(), 0.0) /
        static_cast<double>(point.holdout_balanced_accuracy.size());
    point.mean_own_balanced_accuracy = detail::mean_of(point.own_balanced_accuracy);
    sizes.push_back(static_cast<double>(point.size));
    held.push_back(point.mean_holdout_balanced_accuracy);
    if (point.mean_own_balanced_accuracy) own.push_back(*point.mean_own_balanced_accuracy);
    else own_complete = false;
  }
  if (sizes.size() >= 2) {
    rep.sweep_spearman_holdout = spearman(sizes, held);
    if (own_complete) rep.sweep_spearman_own = spearman(sizes, own);
  }
  rep.wall_clock_s = detail::seconds_since(t0);
  return rep;
}

// Serialization

inline nlohmann::json to_json(const PooledMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"tp", m.counts.tp},
          {"fp", m.counts.fp},
          {"tn", m.counts.tn},
          {"fn", m.counts.fn},
          {"sensitivity", opt(m.sensitivity)},
          {"specificity", opt(m.specificity)},
          {"balanced_accuracy", opt(m.balanced_accuracy)},
          {"mean_site_balanced_accuracy", opt(m.mean_site_balanced_accuracy)}};
}

inline nlohmann::json to_json(const ExperimentReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j{{"experiment", r.name}, {"scenario", r.scenario}, {"seeds", r.seeds}, {"wall_clock_s", r.wall_clock_s}};
  if (!r.runs.empty()) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& run : r.runs) {
      nlohmann::json rounds = nlohmann::json::array();
      for (const auto& g : run.rounds) {
        auto m = to_json(g.metrics);
        m["round"] = g.round;
        rounds.push_back(std::move(m));
      }
      nlohmann::json cross = nlohmann::json::array();
      for (const auto& e : run.cross_eval) cross.push_back(to_json(e));
      nlohmann::json abl = nlohmann::json::array();
      for (const auto& e : run.ablation_eval) abl.push_back(to_json(e));
      runs.push_back({{"seed", run.seed},
                      {"per_round_global", std::move(rounds)},
                      {"cross_eval", std::move(cross)},
                      {"ablation_eval", std::move(abl)},
                      {"sim",
                       {{"messages_sent", run.sim.messages_sent},
                        {"messages_dropped", run.sim.messages_dropped},
                        {"disconnects", run.sim.disconnects},
                        {"crashes", run.sim.crashes},
                        {"trainings", run.sim.trainings},
                        {"virtual_time_ms", run.sim.virtual_time_ms}}}});
    }
    j["runs"] = std::move(runs);
    nlohmann::json models = nlohmann::json::array();
    for (const auto& m : r.models)
      models.push_back({{"model_site", m.model_site},
                        {"own_balanced_accuracy", opt(m.own_balanced_accuracy)},
                        {"cross_sensitivity", opt(m.cross_sensitivity)},
                        {"cross_specificity", opt(m.cross_specificity)},
                        {"cross_balanced_accuracy", opt(m.cross_balanced_accuracy)},
                        {"collapsed", m.collapsed}});
    j["models"] = std::move(models);
    j["local_cross_balanced_accuracy"] = r.local_cross_balanced_accuracy;
    j["federated_cross_balanced_accuracy"] = r.federated_cross_balanced_accuracy;
    j["collapsed_models"] = r.collapsed_models;
    j["ablation"] = {{"with", opt(r.ablation_with)}, {"without", opt(r.ablation_without)}};
  }
  if (!r.sweep.empty()) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : r.sweep) {
      nlohmann::json own = nlohmann::json::array(), auc = nlohmann::json::array();
      for (const auto& v : p.own_balanced_accuracy) own.push_back(opt(v));
      for (const auto& v : p.holdout_auc) auc.push_back(opt(v));
      pts.push_back({{"size", p.size},
                     {"holdout_balanced_accuracy", p.holdout_balanced_accuracy},
                     {"holdout_auc", std::move(auc)},
                     {"own_balanced_accuracy", std::move(own)},
                     {"mean_holdout_balanced_accuracy", p.mean_holdout_balanced_accuracy},
                     {"mean_own_balanced_accuracy", opt(p.mean_own_balanced_accuracy)}});
    }
    j["sweep"] = std::move(pts);
    j["spearman_holdout"] = opt(r.sweep_spearman_holdout);
    j["spearman_own"] = opt(r.sweep_spearman_own);
  }
  return j;
}

/// Writes report.json plus, per seed, the cross-eval CSV and the per-round
/// global metrics CSV.
inline void write_report(const ExperimentReport& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  auto open = [&](const std::string& name) {
    std::ofstream out(dir / name);
    require(out.good(), ErrorCode::IoError, "cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open(r.name + ".json");
    out << to_json(r).dump(2) << '\n';
  }
  for (const auto& run : r.runs) {
    const std::string tag = r.name + "_seed" + std::to_string(run.seed);
    {
      auto out = open(tag + "_cross_eval.csv");
      write_eval_csv(run.cross_eval, out);
    }
    auto out = open(tag + "_rounds.csv");
    out << "round,tp,fp,tn,fn,sensitivity,specificity,balanced_accuracy\n";
    for (const auto& g : run.rounds) {
      auto cell = [](const std::optional<double>& v) { return v ? format_f64(*v) : std::string(); };
      out << g.round << ',' << g.metrics.counts.tp << ',' << g.metrics.counts.fp << ',' << g.metrics.counts.tn << ','
          << g.metrics.counts.fn << ',' << cell(g.metrics.sensitivity) << ',' << cell(g.metrics.specificity) << ','
          << cell(g.metrics.balanced_accuracy) << '\n';
    }
  }
}

}  // namespace fedorch
