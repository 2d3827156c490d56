// fedorch-sim: runs the local-vs-federated or size-sweep experiment in the simulator
// and writes JSON and CSV reports.

#include <iomanip>
#include <iostream>

#include "CLI11.hpp"

#include "fedorch/experiments.hpp"

using namespace fedorch;

namespace {

ScriptedDisconnect parse_disconnect(const std::string& s) {
  const auto a = s.find(':');
  const auto b = s.find(':', a == std::string::npos ? a : a + 1);
  require(a != std::string::npos && b != std::string::npos, ErrorCode::InvalidPlan,
          "disconnect must be NODE:ROUND:PHASE, got '" + s + "'");
  ScriptedDisconnect d;
  d.node_id = s.substr(0, a);
  d.round = static_cast<std::uint32_t>(std::stoul(s.substr(a + 1, b - a - 1)));
  d.phase = parse_disconnect_phase(s.substr(b + 1));
  return d;
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream o;
  o << std::fixed << std::setprecision(4) << *v;
  return o.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic federation experiments"};
  std::string scenario_name = "eight-sites", scenarios_file, out_dir = "results", experiment = "auto";
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> disconnects;
  std::optional<double> lr;
  std::optional<std::uint32_t> crash_at;
  ExperimentConfig cfg;
  app.add_option("--scenario", scenario_name, "built-in scenario name, or a name in --scenarios-file");
  app.add_option("--scenarios-file", scenarios_file, "JSON file with scenario definitions");
  app.add_option("--seeds", seeds, "comma-separated seeds (default 0,1,2,3,4)")->delimiter(',');
  app.add_option("--out", out_dir, "report directory");
  app.add_option("--experiment", experiment, "auto | local_vs_federated | size_sweep")
      ->check(CLI::IsMember({"auto", "local_vs_federated", "size_sweep"}));
  app.add_option("--rounds", cfg.total_rounds, "federation rounds");
  app.add_option("--epochs-per-round", cfg.epochs_per_round, "local epochs per round");
  app.add_option("--local-epochs", cfg.local_epochs, "epochs for single-site baselines");
  app.add_option("--batch-size", cfg.batch_size, "minibatch size");
  app.add_option("--lr", lr, "learning rate (default: the scenario's)");
  app.add_option("--hidden", cfg.hidden_dims, "hidden layer widths")->delimiter(',');
  app.add_option("--ablate", cfg.ablate_site, "site left out of the ablation run (empty: none)");
  app.add_option("--sizes", cfg.sweep_sizes, "size sweep sizes")->delimiter(',');
  app.add_option("--holdout", cfg.holdout_size, "size sweep holdout samples");
  app.add_option("--drop", cfg.faults.drop_probability, "per-message drop probability");
  app.add_option("--fault-seed", cfg.faults.seed, "fault plan seed");
  app.add_option("--latency-min", cfg.faults.latency.min_ms, "min one-way latency (ms)");
  app.add_option("--latency-max", cfg.faults.latency.max_ms, "max one-way latency (ms)");
  app.add_option("--disconnect", disconnects, "scripted disconnect NODE:ROUND:before_train|after_train_before_submit");
  app.add_option("--crash-at", crash_at, "crash the coordinator during this round");
  app.add_option("--restart-delay-ms", cfg.faults.restart_delay_ms, "coordinator restart delay");
  CLI11_PARSE(app, argc, argv);

  try {
    if (!seeds.empty()) cfg.seeds = seeds;
    cfg.learning_rate = lr;
    cfg.faults.coordinator_crash_at = crash_at;
    for (const auto& d : disconnects) cfg.faults.disconnects.push_back(parse_disconnect(d));

    Scenario sc;
    if (scenarios_file.empty()) {
      sc = scenario(scenario_name);
    } else {
      bool found = false;
      for (auto& s : load_scenarios(scenarios_file))
        if (s.name == scenario_name) {
          sc = std::move(s);
          found = true;
        }
      require(found, ErrorCode::UnknownPreset, "no scenario '" + scenario_name + "' in " + scenarios_file);
    }
    if (experiment == "auto") experiment = sc.sites.size() == 1 ? "size_sweep" : "local_vs_federated";

    ExperimentReport rep = experiment == "size_sweep" ? experiment_size_sweep(sc, cfg)
                                                      : experiment_local_vs_federated(sc, cfg);
    write_report(rep, out_dir);

    std::cout << "experiment " << rep.name << " scenario " << rep.scenario << " seeds " << rep.seeds.size()
              << " wall_clock_s " << std::fixed << std::setprecision(2) << rep.wall_clock_s << "\n";
    if (rep.name == "size_sweep") {
      for (const auto& p : rep.sweep)
        std::cout << "size " << p.size << " holdout_bacc " << fmt(p.mean_holdout_balanced_accuracy) << " own_bacc "
                  << fmt(p.mean_own_balanced_accuracy) << "\n";
      std::cout << "spearman_holdout " << fmt(rep.sweep_spearman_holdout) << " spearman_own "
                << fmt(rep.sweep_spearman_own) << "\n";
    } else {
      for (const auto& m : rep.models)
        std::cout << "model " << m.model_site << " own_bacc " << fmt(m.own_balanced_accuracy) << " cross_sens "
                  << fmt(m.cross_sensitivity) << " cross_spec " << fmt(m.cross_specificity) << " cross_bacc "
                  << fmt(m.cross_balanced_accuracy) << (m.collapsed ? " COLLAPSED" : "") << "\n";
      std::cout << "local_cross_bacc " << fmt(rep.local_cross_balanced_accuracy) << " federated_cross_bacc "
                << fmt(rep.federated_cross_balanced_accuracy) << " collapsed_models " << rep.collapsed_models << "\n";
      if (rep.ablation_with)
        std::cout << "ablation " << cfg.ablate_site << " with " << fmt(rep.ablation_with) << " without "
                  << fmt(rep.ablation_without) << "\n";
    }
    std::cout << "reports written to " << out_dir << "\n";
  } catch (const Error& e) {
    std::cerr << "error " << to_string(e.code()) << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
