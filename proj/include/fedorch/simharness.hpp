#pragma once

#include <unistd.h>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "fedorch/coordinator.hpp"
#include "fedorch/datakit.hpp"
#include "fedorch/nodeagent.hpp"
#include "fedorch/protocol.hpp"
#include "fedorch/rng.hpp"
#include "fedorch/server.hpp"
#include "fedorch/tensor.hpp"
#include "fedorch/trainer.hpp"

namespace fedorch {

// Fault plans

struct LatencyModel {
  TimeMs min_ms = 5;
  TimeMs max_ms = 5;  // equal bounds: fixed latency
};

enum class DisconnectPhase { BeforeTrain, AfterTrainBeforeSubmit };

inline std::string_view to_string(DisconnectPhase p) noexcept {
  return p == DisconnectPhase::BeforeTrain ? "before_train" : "after_train_before_submit";
}

inline DisconnectPhase parse_disconnect_phase(std::string_view s) {
  if (s == "before_train") return DisconnectPhase::BeforeTrain;
  if (s == "after_train_before_submit") return DisconnectPhase::AfterTrainBeforeSubmit;
  fail(ErrorCode::InvalidPlan, "unknown disconnect phase '" + std::string(s) + "'");
}

struct ScriptedDisconnect {
  std::string node_id;
  std::uint32_t round = 1;
  DisconnectPhase phase = DisconnectPhase::BeforeTrain;
};

struct FaultPlan {
  std::uint64_t seed = 0;
  double drop_probability = 0.0;
  LatencyModel latency;
  std::vector<ScriptedDisconnect> disconnects;
  std::optional<std::uint32_t> coordinator_crash_at;  // crash after the first accepted update of this round
  TimeMs restart_delay_ms = 5'000;
};

inline void validate_plan(const FaultPlan& plan, const std::vector<std::string>& node_ids, std::uint32_t total_rounds) {
  auto bad = [](const std::string& what) { fail(ErrorCode::InvalidPlan, what); };
  if (!(plan.drop_probability >= 0.0 && plan.drop_probability <= 1.0)) bad("drop_probability must lie in [0, 1]");
  if (plan.latency.min_ms < 0 || plan.latency.max_ms < plan.latency.min_ms) bad("latency range is invalid");
  if (plan.restart_delay_ms < 0) bad("restart_delay_ms must be >= 0");
  for (const auto& d : plan.disconnects) {
    if (std::find(node_ids.begin(), node_ids.end(), d.node_id) == node_ids.end())
      bad("disconnect names unknown node '" + d.node_id + "'");
    if (d.round < 1 || d.round > total_rounds)
      bad("disconnect round " + std::to_string(d.round) + " outside 1.." + std::to_string(total_rounds));
  }
  if (plan.coordinator_crash_at && (*plan.coordinator_crash_at < 1 || *plan.coordinator_crash_at > total_rounds))
    bad("coordinator_crash_at outside 1.." + std::to_string(total_rounds));
}

// Simulation

struct SimConfig {
  FederationConfig federation;  // node tokens and approvals are filled in per run
  TrainerConfig trainer;        // node k trains with seed derive_seed(trainer.seed, k)
  std::vector<std::size_t> hidden_dims;
  std::uint64_t model_seed = 0;
  ReconnectPolicy reconnect;
  std::uint64_t max_events = 10'000'000;
  TimeMs max_time_ms = TimeMs{1} << 40;
  TimeMs tick_ms = 1'000;  // coordinator tick period when a round timeout is set
};

inline std::uint64_t node_trainer_seed(const SimConfig& cfg, std::size_t k) { return derive_seed(cfg.trainer.seed, k); }

struct SimStats {
  std::uint64_t events = 0;
  std::uint64_t messages_sent = 0;
  std::uint64_t messages_dropped = 0;
  std::uint64_t connections = 0;
  std::uint64_t refused_connections = 0;
  std::uint64_t disconnects = 0;
  std::uint64_t scripted_disconnects = 0;
  std::uint64_t crashes = 0;
  std::uint64_t trainings = 0;
  TimeMs virtual_time_ms = 0;
};

struct SimResult {
  TensorMap initial_model;
  TensorMap final_model;
  std::vector<TensorMap> round_models;  // [r-1]: global model after round r
  std::vector<FederationEvent> events;
  std::map<std::uint32_t, RoundMetrics> round_metrics;
  RoundStatus status = RoundStatus::WaitingForNodes;
  SimStats stats;
};

namespace detail {

inline std::filesystem::path unique_temp_dir(std::string_view stem) {
  static std::atomic<std::uint64_t> counter{0};
  std::filesystem::path p = std::filesystem::temp_directory_path() /
                            (std::string(stem) + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

class Simulation {
 public:
  Simulation(const std::vector<SiteDataset>& sites, const SimConfig& cfg, const FaultPlan& plan)
      : cfg_(cfg), plan_(plan), net_rng_(derive_seed(plan.seed, 0xd409u)) {
    require(!sites.empty(), ErrorCode::InvalidPlan, "simulation needs at least one site");
    std::vector<std::string> ids;
    for (const auto& s : sites) {
      require(std::find(ids.begin(), ids.end(), s.site_id) == ids.end(), ErrorCode::InvalidPlan,
              "duplicate site id '" + s.site_id + "'");
      ids.push_back(s.site_id);
    }
    for (std::size_t k = 1; k < sites.size(); ++k)
      require(sites[k].dim() == sites[0].dim(), ErrorCode::DimensionMismatch, "sites differ in feature count");
    validate_plan(plan_, ids, cfg_.federation.total_rounds);

    fed_cfg_ = cfg_.federation;
    for (const auto& id : ids) {
      fed_cfg_.node_tokens[id] = "sim-token-" + id;
      fed_cfg_.preapproved.insert(id);
    }
    if (plan_.coordinator_crash_at && fed_cfg_.checkpoint_dir.empty()) {
      temp_dir_ = unique_temp_dir("fedorch-sim");
      fed_cfg_.checkpoint_dir = *temp_dir_;
    }
    validate_config(fed_cfg_);

    for (std::size_t k = 0; k < sites.size(); ++k) {
      auto n = std::make_unique<Node>();
      n->id = sites[k].site_id;
      TrainerConfig tc = cfg_.trainer;
      tc.seed = node_trainer_seed(cfg_, k);
      n->learner = std::make_unique<ReferenceLearner>(sites[k], tc);
      n->agent = std::make_unique<NodeAgent>(n->id, Bytes(fed_cfg_.node_tokens[n->id].begin(),
                                                           fed_cfg_.node_tokens[n->id].end()),
                                             *n->learner);
      n->backoff = std::make_unique<Backoff>(cfg_.reconnect, derive_seed(plan_.seed, {k, 0xb0ffu}));
      nodes_.push_back(std::move(n));
    }

    result_.initial_model = init_model(ModelSpec{sites[0].dim(), cfg_.hidden_dims, cfg_.model_seed});
  }

  ~Simulation() {
    if (temp_dir_) {
      std::error_code ec;
      std::filesystem::remove_all(*temp_dir_, ec);
    }
  }

  SimResult run() {
    Federation fed(fed_cfg_);
    fed.start(result_.initial_model, 0);
    ep_ = std::make_unique<CoordinatorEndpoint>(std::move(fed), random_source(0));
    for (std::size_t k = 0; k < nodes_.size(); ++k) schedule(0, Kind::Connect, 0, k);
    if (fed_cfg_.round_timeout_ms) schedule(cfg_.tick_ms, Kind::Tick, 0, 0);

    while (!done()) {
      if (queue_.empty()) stall("no pending events");
      Event e = queue_.top();
      queue_.pop();
      now_ = e.time;
      if (++result_.stats.events > cfg_.max_events) stall("event budget exhausted");
      if (now_ > cfg_.max_time_ms) stall("virtual time budget exhausted");
      dispatch(e);
    }

    const Federation& f = ep_->federation();
    result_.final_model = f.state().global_model;
    result_.events = f.events();
    result_.round_metrics = f.round_metrics();
    result_.status = f.state().status;
    result_.stats.virtual_time_ms = now_;
    for (const auto& n : nodes_) result_.stats.trainings += n->learner->trainings();
    return std::move(result_);
  }

 private:
  enum class Kind { Connect, ToCoord, ToNode, CloseAtCoord, CloseAtNode, Sever, Restart, Tick };

  struct Event {
    TimeMs time;
    std::uint64_t seq;
    Kind kind;
    ConnId conn;
    std::size_t node;
    std::optional<Frame> frame;
  };

  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      return a.time != b.time ? a.time > b.time : a.seq > b.seq;
    }
  };

  struct Link {
    std::size_t node = 0;
    bool node_open = true;
    bool coord_open = true;
    TimeMs last_to_coord = 0;
    TimeMs last_to_node = 0;
  };

  struct Node {
    std::string id;
    std::unique_ptr<ReferenceLearner> learner;
    std::unique_ptr<NodeAgent> agent;
    std::unique_ptr<Backoff> backoff;
    std::optional<ConnId> conn;
    bool reconnect_pending = false;
  };

  RandomSource random_source(std::uint64_t incarnation) {
    auto rng = std::make_shared<Rng>(derive_seed(plan_.seed, {0x5e55u, incarnation}));
    return [rng](std::span<std::uint8_t> out) {
      for (auto& b : out) b = static_cast<std::uint8_t>(rng->next_u64());
    };
  }

  void schedule(TimeMs at, Kind kind, ConnId conn, std::size_t node, std::optional<Frame> frame = std::nullopt) {
    queue_.push(Event{at, next_seq_++, kind, conn, node, std::move(frame)});
  }

  TimeMs latency() {
    const auto& l = plan_.latency;
    if (l.max_ms == l.min_ms) return l.min_ms;
    return l.min_ms + static_cast<TimeMs>(net_rng_.below(static_cast<std::uint64_t>(l.max_ms - l.min_ms + 1)));
  }

  /// Queues a frame on one direction of a link. Deliveries on a direction
  /// are FIFO. A dropped frame severs the link at its delivery slot.
  void send(ConnId c, bool to_coord, Frame f) {
    Link& l = links_.at(c);
    TimeMs& last = to_coord ? l.last_to_coord : l.last_to_node;
    last = std::max(now_ + latency(), last);
    ++result_.stats.messages_sent;
    if (plan_.drop_probability > 0 && net_rng_.uniform() < plan_.drop_probability) {
      ++result_.stats.messages_dropped;
      schedule(last, Kind::Sever, c, l.node);
      return;
    }
    schedule(last, to_coord ? Kind::ToCoord : Kind::ToNode, c, l.node, std::move(f));
  }

  void close_later(ConnId c, bool at_coord) {
    Link& l = links_.at(c);
    TimeMs& last = at_coord ? l.last_to_coord : l.last_to_node;
    last = std::max(now_ + latency(), last);
    schedule(last, at_coord ? Kind::CloseAtCoord : Kind::CloseAtNode, c, l.node);
  }

  void dispatch(const Event& e) {
    switch (e.kind) {
      case Kind::Connect: connect(e.node); break;
      case Kind::ToCoord: {
        Link& l = links_.at(e.conn);
        if (!ep_ || !l.coord_open) break;
        deliver_outgoing(ep_->on_frame(e.conn, *e.frame, now_));
        after_coordinator_step();
        break;
      }
      case Kind::ToNode: to_node(e.conn, *e.frame); break;
      case Kind::CloseAtCoord: {
        Link& l = links_.at(e.conn);
        if (!l.coord_open) break;
        l.coord_open = false;
        if (ep_) {
          deliver_outgoing(ep_->on_close(e.conn, now_));
          after_coordinator_step();
        }
        break;
      }
      case Kind::CloseAtNode: close_node_side(e.conn); break;
      case Kind::Sever: sever(e.conn); break;
      case Kind::Restart: restart(); break;
      case Kind::Tick:
        if (ep_) {
          deliver_outgoing(ep_->on_tick(now_));
          after_coordinator_step();
        }
        if (!ep_ || !ep_->federation().terminal()) schedule(now_ + cfg_.tick_ms, Kind::Tick, 0, 0);
        break;
    }
  }

  void connect(std::size_t k) {
    Node& n = *nodes_[k];
    n.reconnect_pending = false;
    if (n.agent->finished() || n.conn) return;
    if (!ep_) {
      ++result_.stats.refused_connections;
      schedule_reconnect(k);
      return;
    }
    const ConnId c = next_conn_++;
    links_[c] = Link{k, true, true, now_, now_};
    n.conn = c;
    ++result_.stats.connections;
    ep_->on_open(c);
    for (Frame& f : n.agent->on_connected()) send(c, true, std::move(f));
  }

  void schedule_reconnect(std::size_t k) {
    Node& n = *nodes_[k];
    if (n.agent->finished() || n.reconnect_pending) return;
    n.reconnect_pending = true;
    schedule(now_ + n.backoff->next(), Kind::Connect, 0, k);
  }

  const ScriptedDisconnect* scripted(const std::string& node, std::uint32_t round, DisconnectPhase phase) {
    for (std::size_t i = 0; i < plan_.disconnects.size(); ++i) {
      const auto& d = plan_.disconnects[i];
      if (!fired_.count(i) && d.node_id == node && d.round == round && d.phase == phase) {
        fired_.insert(i);
        ++result_.stats.scripted_disconnects;
        return &d;
      }
    }
    return nullptr;
  }

  void to_node(ConnId c, const Frame& f) {
    Link& l = links_.at(c);
    if (!l.node_open) return;
    Node& n = *nodes_[l.node];
    if (f.type == MsgType::RoundStart) {
      const std::uint32_t round = RoundStart::from_frame(f).round;
      if (scripted(n.id, round, DisconnectPhase::BeforeTrain)) {
        sever(c);
        return;
      }
    }
    AgentStep step = n.agent->on_frame(f);
    if (n.agent->phase() == AgentPhase::Failed) {
      const Error& err = *n.agent->failure();
      fail(err.code(), n.id + ": " + err.what());
    }
    for (const Frame& out : step.send) {
      if (out.type == MsgType::RoundResult &&
          scripted(n.id, RoundResult::from_frame(out).round, DisconnectPhase::AfterTrainBeforeSubmit)) {
        sever(c);
        return;
      }
    }
    for (Frame& out : step.send) send(c, true, std::move(out));
    if (n.agent->phase() == AgentPhase::Ready) n.backoff->reset();
    if (step.close) {
      l.node_open = false;
      n.conn.reset();
      n.agent->on_disconnected();
      close_later(c, true);
      schedule_reconnect(l.node);
    }
  }

  void close_node_side(ConnId c) {
    Link& l = links_.at(c);
    if (!l.node_open) return;
    l.node_open = false;
    Node& n = *nodes_[l.node];
    n.conn.reset();
    n.agent->on_disconnected();
    schedule_reconnect(l.node);
  }

  void sever(ConnId c) {
    Link& l = links_.at(c);
    if (!l.node_open && !l.coord_open) return;
    ++result_.stats.disconnects;
    if (l.coord_open) {
      l.coord_open = false;
      if (ep_) {
        deliver_outgoing(ep_->on_close(c, now_));
        after_coordinator_step();
      }
    }
    close_node_side(c);
  }

  void deliver_outgoing(std::vector<Outgoing> out) {
    for (Outgoing& o : out) {
      Link& l = links_.at(o.conn);
      if (!l.coord_open) continue;
      if (o.frame) send(o.conn, false, std::move(*o.frame));
      if (o.close) {
        l.coord_open = false;
        close_later(o.conn, false);
      }
    }
  }

  void after_coordinator_step() {
    if (!ep_) return;
    const Federation& f = ep_->federation();
    while (result_.round_models.size() < f.round_metrics().size()) result_.round_models.push_back(f.state().global_model);
    const RoundState& st = f.state();
    if (plan_.coordinator_crash_at && !crashed_ && st.round_index == *plan_.coordinator_crash_at &&
        !st.received.empty())
      crash();
  }

  /// Loses the endpoint with all connections and in-memory state; only the
  /// checkpoint file survives.
  void crash() {
    crashed_ = true;
    ++result_.stats.crashes;
    ep_.reset();
    for (auto& [c, l] : links_) {
      if (!l.node_open && !l.coord_open) continue;
      l.coord_open = false;
      close_node_side(c);
    }
    schedule(now_ + plan_.restart_delay_ms, Kind::Restart, 0, 0);
  }

  void restart() {
    ep_ = std::make_unique<CoordinatorEndpoint>(Federation::restore(fed_cfg_, fed_cfg_.checkpoint_dir / kCheckpointFile),
                                                random_source(++incarnation_));
  }

  bool done() const {
    if (!ep_ || !ep_->federation().terminal()) return false;
    for (const auto& n : nodes_)
      if (!n->agent->finished()) return false;
    return true;
  }

  [[noreturn]] void stall(const std::string& why) {
    std::string msg = why + " at t=" + std::to_string(now_) + "ms";
    if (ep_) {
      const RoundState& st = ep_->federation().state();
      msg += ", round " + std::to_string(st.round_index) + " " + std::string(to_string(st.status));
      if (!st.alert.empty()) msg += " (" + st.alert + ")";
    } else {
      msg += ", coordinator down";
    }
    fail(ErrorCode::Stalled, msg);
  }

  SimConfig cfg_;
  FaultPlan plan_;
  FederationConfig fed_cfg_;
  std::optional<std::filesystem::path> temp_dir_;
  Rng net_rng_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::unique_ptr<CoordinatorEndpoint> ep_;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::map<ConnId, Link> links_;
  std::set<std::size_t> fired_;
  std::uint64_t next_seq_ = 0;
  ConnId next_conn_ = 1;
  std::uint64_t incarnation_ = 0;
  bool crashed_ = false;
  TimeMs now_ = 0;
  SimResult result_;
};

}  // namespace detail

/// Runs a coordinator and one agent per site over a simulated transport
/// under `plan`. A pure function of its arguments.
inline SimResult run_sim(const std::vector<SiteDataset>& sites, const SimConfig& config, const FaultPlan& plan = {}) {
  detail::Simulation sim(sites, config, plan);
  return sim.run();
}

}  // namespace fedorch
