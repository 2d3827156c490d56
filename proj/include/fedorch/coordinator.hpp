#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedorch/auth.hpp"
#include "fedorch/bytes.hpp"
#include "fedorch/error.hpp"
#include "fedorch/metrics.hpp"
#include "fedorch/protocol.hpp"
#include "fedorch/tensor.hpp"

namespace fedorch {

enum class RoundStatus { WaitingForNodes, InRound, Aggregating, Paused, Finished, Aborted };

inline std::string_view to_string(RoundStatus s) noexcept {
  switch (s) {
    case RoundStatus::WaitingForNodes: return "WaitingForNodes";
    case RoundStatus::InRound: return "InRound";
    case RoundStatus::Aggregating: return "Aggregating";
    case RoundStatus::Paused: return "Paused";
    case RoundStatus::Finished: return "Finished";
    case RoundStatus::Aborted: return "Aborted";
  }
  return "?";
}

inline RoundStatus parse_round_status(std::string_view s) {
  for (auto st : {RoundStatus::WaitingForNodes, RoundStatus::InRound, RoundStatus::Aggregating, RoundStatus::Paused,
                  RoundStatus::Finished, RoundStatus::Aborted})
    if (to_string(st) == s) return st;
  fail(ErrorCode::CorruptCheckpoint, "unknown status '" + std::string(s) + "'");
}

inline bool transition_allowed(RoundStatus from, RoundStatus to) noexcept {
  using S = RoundStatus;
  switch (from) {
    case S::WaitingForNodes: return to == S::InRound;
    case S::InRound: return to == S::Aggregating || to == S::Paused || to == S::Aborted;
    case S::Aggregating: return to == S::InRound || to == S::Finished;
    case S::Paused: return to == S::InRound || to == S::Aborted;
    case S::Finished:
    case S::Aborted: return false;
  }
  return false;
}

inline RoundStatus checked_transition(RoundStatus from, RoundStatus to) {
  require(transition_allowed(from, to), ErrorCode::InvalidTransition,
          std::string(to_string(from)) + " -> " + std::string(to_string(to)));
  return to;
}

struct FederationConfig {
  std::uint32_t total_rounds = 20;
  std::uint32_t epochs_per_round = 10;
  double quorum_fraction = 1.0;
  std::optional<TimeMs> round_timeout_ms;
  std::uint32_t min_nodes = 1;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::map<std::string, std::string> node_tokens;
  std::set<std::string> preapproved;
  TimeMs nonce_ttl_ms = 30'000;
  TimeMs stale_after_ms = 60'000;
};

inline void validate_config(const FederationConfig& c) {
  require(c.total_rounds >= 1, ErrorCode::InvalidSpec, "total_rounds must be >= 1");
  require(c.epochs_per_round >= 1, ErrorCode::InvalidSpec, "epochs_per_round must be >= 1");
  require(c.quorum_fraction > 0.0 && c.quorum_fraction <= 1.0, ErrorCode::InvalidSpec,
          "quorum_fraction must lie in (0, 1]");
  require(!c.round_timeout_ms || *c.round_timeout_ms > 0, ErrorCode::InvalidSpec, "round_timeout must be positive");
  require(c.min_nodes >= 1, ErrorCode::InvalidSpec, "min_nodes must be >= 1");
  require(c.nonce_ttl_ms > 0 && c.stale_after_ms > 0, ErrorCode::InvalidSpec, "timeouts must be positive");
}

enum class Approval { Pending, Approved, Evicted };
enum class Liveness { Connected, Disconnected, Stale };

inline std::string_view to_string(Approval a) noexcept {
  switch (a) {
    case Approval::Pending: return "Pending";
    case Approval::Approved: return "Approved";
    case Approval::Evicted: return "Evicted";
  }
  return "?";
}

inline std::string_view to_string(Liveness l) noexcept {
  switch (l) {
    case Liveness::Connected: return "Connected";
    case Liveness::Disconnected: return "Disconnected";
    case Liveness::Stale: return "Stale";
  }
  return "?";
}

struct NodeRecord {
  std::string node_id;
  Approval approval = Approval::Pending;
  Liveness liveness = Liveness::Disconnected;
  TimeMs last_seen = 0;
  std::set<std::uint32_t> contributed_rounds;

  bool operator==(const NodeRecord&) const = default;
};

struct RoundState {
  std::uint32_t round_index = 1;
  TensorMap global_model;
  std::set<std::string> expected_nodes;
  std::map<std::string, WeightedUpdate> received;
  std::map<std::string, NodeRoundReport> reports;
  RoundStatus status = RoundStatus::WaitingForNodes;
  std::optional<TimeMs> deadline;
  std::string alert;
};

inline std::size_t quorum_size(double quorum_fraction, std::size_t expected) {
  const auto q = static_cast<std::size_t>(std::ceil(quorum_fraction * static_cast<double>(expected) - 1e-9));
  return std::max<std::size_t>(q, 1);
}

struct AdvanceOutcome {
  RoundState state;
  bool changed = false;
  bool aggregated = false;
  std::uint32_t aggregated_round = 0;
  std::vector<std::string> contributors;
  std::vector<std::string> missing;
};

/// One step of the round machine. Aggregates when every expected update is
/// in, or when the deadline has passed with a quorum; pauses when the deadline
/// passes without one. `approved` is the set that becomes expected if a new
/// round opens.
inline AdvanceOutcome try_advance(const RoundState& s, const FederationConfig& cfg, const std::set<std::string>& approved,
                                  TimeMs now) {
  AdvanceOutcome out;
  out.state = s;
  if (s.status != RoundStatus::InRound || s.expected_nodes.empty()) return out;
  const bool complete = s.received.size() == s.expected_nodes.size();
  const bool overdue = s.deadline && now >= *s.deadline;
  const bool quorum = !s.received.empty() && s.received.size() >= quorum_size(cfg.quorum_fraction, s.expected_nodes.size());

  RoundState& n = out.state;
  if (!complete && !(overdue && quorum)) {
    if (overdue) {
      n.status = checked_transition(n.status, RoundStatus::Paused);
      n.alert = "quorum not met: " + std::to_string(s.received.size()) + "/" + std::to_string(s.expected_nodes.size()) +
                " updates by the deadline of round " + std::to_string(s.round_index);
      out.changed = true;
    }
    return out;
  }

  n.status = checked_transition(n.status, RoundStatus::Aggregating);
  std::vector<WeightedUpdate> updates;
  for (const auto& [id, u] : s.received) {
    updates.push_back(u);
    out.contributors.push_back(id);
  }
  for (const auto& id : s.expected_nodes)
    if (!s.received.count(id)) out.missing.push_back(id);
  n.global_model = aggregate(updates);
  out.aggregated = true;
  out.aggregated_round = s.round_index;
  out.changed = true;
  n.received.clear();
  n.reports.clear();
  n.alert.clear();

  if (s.round_index >= cfg.total_rounds) {
    n.status = checked_transition(n.status, RoundStatus::Finished);
    n.expected_nodes.clear();
    n.deadline.reset();
    return out;
  }
  n.status = checked_transition(n.status, RoundStatus::InRound);
  n.round_index = s.round_index + 1;
  n.expected_nodes = approved;
  n.deadline = cfg.round_timeout_ms ? std::optional<TimeMs>(now + *cfg.round_timeout_ms) : std::nullopt;
  if (n.expected_nodes.size() < cfg.min_nodes) {
    n.status = checked_transition(n.status, RoundStatus::Paused);
    n.alert = "only " + std::to_string(n.expected_nodes.size()) + " approved nodes for round " +
              std::to_string(n.round_index) + ", need " + std::to_string(cfg.min_nodes);
  }
  return out;
}

struct FederationEvent {
  std::uint64_t seq = 0;
  TimeMs time = 0;
  std::string kind;
  std::uint32_t round = 0;
  std::string node_id;
  std::string detail;

  bool operator==(const FederationEvent&) const = default;
};

/// Node-reported figures for one aggregated round. `global_test` pools the
/// contributors' test-split counts for the global model they received.
struct RoundMetrics {
  std::uint32_t round = 0;
  std::vector<std::string> contributors;
  std::uint64_t total_samples = 0;
  std::set<std::uint32_t> epochs;
  ConfusionCounts global_test;
  std::map<std::string, ConfusionCounts> site_test;
  double mean_train_loss = 0.0;
  double mean_val_loss = 0.0;

  bool operator==(const RoundMetrics&) const = default;
};

struct FederationData {
  RoundState round;
  std::map<std::string, NodeRecord> nodes;
  std::map<std::string, SessionTicket> sessions;
  std::vector<FederationEvent> events;
  std::map<std::uint32_t, RoundMetrics> metrics;
  std::uint64_t next_seq = 1;
};

enum class SubmitResult { Accepted, Duplicate };

inline Bytes encode_checkpoint(const FederationData& d);
inline FederationData decode_checkpoint(ByteView bytes);
inline void save_checkpoint(const std::filesystem::path& path, const FederationData& d);
inline FederationData load_checkpoint(const std::filesystem::path& path);

inline constexpr std::string_view kCheckpointFile = "federation.fck";

/// The single writer over a federation's state. Every mutation goes through
/// one of these methods, is logged, and (when a checkpoint directory is set)
/// is persisted before the method returns.
class Federation {
 public:
  explicit Federation(FederationConfig cfg) : cfg_(std::move(cfg)) {
    validate_config(cfg_);
    for (const auto& id : cfg_.preapproved) d_.nodes[id] = NodeRecord{id, Approval::Approved, Liveness::Disconnected, 0, {}};
  }

  Federation(FederationConfig cfg, FederationData data) : cfg_(std::move(cfg)), d_(std::move(data)) {
    validate_config(cfg_);
    for (auto& [id, n] : d_.nodes)
      if (n.liveness == Liveness::Connected) n.liveness = Liveness::Disconnected;
  }

  static Federation restore(FederationConfig cfg, const std::filesystem::path& checkpoint) {
    return Federation(std::move(cfg), load_checkpoint(checkpoint));
  }

  const FederationConfig& config() const noexcept { return cfg_; }
  const FederationData& data() const noexcept { return d_; }
  const RoundState& state() const noexcept { return d_.round; }
  const std::map<std::string, NodeRecord>& nodes() const noexcept { return d_.nodes; }
  const std::vector<FederationEvent>& events() const noexcept { return d_.events; }
  const std::map<std::uint32_t, RoundMetrics>& round_metrics() const noexcept { return d_.metrics; }

  std::set<std::string> approved_nodes() const {
    std::set<std::string> out;
    for (const auto& [id, n] : d_.nodes)
      if (n.approval == Approval::Approved) out.insert(id);
    return out;
  }

  bool terminal() const noexcept {
    return d_.round.status == RoundStatus::Finished || d_.round.status == RoundStatus::Aborted;
  }

  bool contributed(const std::string& node_id, std::uint32_t round) const {
    auto it = d_.nodes.find(node_id);
    return it != d_.nodes.end() && it->second.contributed_rounds.count(round);
  }

  /// The node should be training the current round right now.
  bool awaiting_update_from(const std::string& node_id) const {
    return d_.round.status == RoundStatus::InRound && d_.round.expected_nodes.count(node_id) &&
           !d_.round.received.count(node_id);
  }

  // Node registry

  void node_connected(const std::string& node_id, TimeMs now) {
    auto [it, inserted] = d_.nodes.try_emplace(node_id, NodeRecord{node_id, Approval::Pending, Liveness::Disconnected, 0, {}});
    it->second.liveness = Liveness::Connected;
    it->second.last_seen = now;
    if (inserted) {
      log("node_registered", node_id, "", now);
      persist();
    }
  }

  void node_disconnected(const std::string& node_id, TimeMs now) {
    auto it = d_.nodes.find(node_id);
    if (it == d_.nodes.end()) return;
    it->second.liveness = Liveness::Disconnected;
    it->second.last_seen = now;
  }

  void touch(const std::string& node_id, TimeMs now) {
    auto it = d_.nodes.find(node_id);
    if (it == d_.nodes.end()) return;
    it->second.last_seen = now;
    it->second.liveness = Liveness::Connected;
  }

  /// Takes effect when the next round opens.
  void approve(const std::string& node_id, TimeMs now) {
    NodeRecord& n = node(node_id);
    if (n.approval == Approval::Approved) return;
    n.approval = Approval::Approved;
    log("node_approved", node_id, "", now);
    persist();
  }

  /// Takes effect when the next round opens; the node stays expected for the current one.
  void evict(const std::string& node_id, TimeMs now) {
    NodeRecord& n = node(node_id);
    if (n.approval == Approval::Evicted) return;
    n.approval = Approval::Evicted;
    log("node_evicted", node_id, "", now);
    persist();
  }

  // Lifecycle

  void start(TensorMap initial_model, TimeMs now) {
    require(d_.round.status == RoundStatus::WaitingForNodes, ErrorCode::AlreadyRunning,
            "federation is " + std::string(to_string(d_.round.status)));
    auto approved = approved_nodes();
    require(approved.size() >= cfg_.min_nodes, ErrorCode::InsufficientNodes,
            std::to_string(approved.size()) + " approved nodes, need " + std::to_string(cfg_.min_nodes));
    require(!initial_model.empty(), ErrorCode::StructureMismatch, "initial model is empty");
    RoundState& r = d_.round;
    r.status = checked_transition(r.status, RoundStatus::InRound);
    r.round_index = 1;
    r.global_model = std::move(initial_model);
    r.expected_nodes = std::move(approved);
    r.deadline = deadline_from(now);
    log("federation_started", "", "total_rounds=" + std::to_string(cfg_.total_rounds), now);
    log_round_started(now);
    persist();
  }

  void pause(TimeMs now) {
    d_.round.status = checked_transition(d_.round.status, RoundStatus::Paused);
    d_.round.alert = "paused by operator";
    log("paused", "", "", now);
    persist();
  }

  void resume(TimeMs now) {
    RoundState& r = d_.round;
    require(r.status == RoundStatus::Paused, ErrorCode::InvalidTransition,
            std::string(to_string(r.status)) + " -> InRound");
    if (r.expected_nodes.size() < cfg_.min_nodes && r.received.empty()) {
      auto approved = approved_nodes();
      require(approved.size() >= cfg_.min_nodes, ErrorCode::InsufficientNodes,
              std::to_string(approved.size()) + " approved nodes, need " + std::to_string(cfg_.min_nodes));
      r.expected_nodes = std::move(approved);
    }
    r.status = checked_transition(r.status, RoundStatus::InRound);
    r.deadline = deadline_from(now);
    r.alert.clear();
    log("resumed", "", "", now);
    persist();
  }

  void abort(TimeMs now) {
    d_.round.status = checked_transition(d_.round.status, RoundStatus::Aborted);
    d_.round.deadline.reset();
    log("aborted", "", "", now);
    persist();
  }

  /// Stores an update once per (node, round); resubmissions are acknowledged
  /// as duplicates and never stored again.
  SubmitResult submit_update(const std::string& node_id, std::uint32_t round, WeightedUpdate update,
                             const NodeRoundReport& report, TimeMs now) {
    if (contributed(node_id, round)) {
      log("update_duplicate", node_id, "", now, round);
      return SubmitResult::Duplicate;
    }
    RoundState& r = d_.round;
    require(r.status == RoundStatus::InRound || r.status == RoundStatus::Paused, ErrorCode::WrongRound,
            "no round open (" + std::string(to_string(r.status)) + ")");
    require(round == r.round_index, ErrorCode::WrongRound,
            "update for round " + std::to_string(round) + " during round " + std::to_string(r.round_index));
    require(r.expected_nodes.count(node_id), ErrorCode::NotExpected, node_id + " is not expected this round");
    require(update.sample_count >= 1, ErrorCode::EmptyUpdateSet, node_id + " reported zero samples");
    detail::require_same_structure(r.global_model, update.weights, "update from " + node_id);
    update.node_id = node_id;
    r.received[node_id] = std::move(update);
    r.reports[node_id] = report;
    d_.nodes[node_id].contributed_rounds.insert(round);
    log("update_accepted", node_id, "samples=" + std::to_string(r.received[node_id].sample_count), now, round);
    persist();
    return SubmitResult::Accepted;
  }

  /// Liveness sweep plus one try_advance step. True when round state changed.
  bool tick(TimeMs now) {
    for (auto& [id, n] : d_.nodes) {
      if (n.liveness == Liveness::Connected && now - n.last_seen > cfg_.stale_after_ms) {
        n.liveness = Liveness::Stale;
        log("node_stale", id, "no traffic", now);
      }
    }
    AdvanceOutcome out = try_advance(d_.round, cfg_, approved_nodes(), now);
    if (!out.changed) return false;
    if (out.aggregated) record_aggregation(out, now);
    d_.round = std::move(out.state);
    switch (d_.round.status) {
      case RoundStatus::InRound: log_round_started(now); break;
      case RoundStatus::Finished: log("federation_finished", "", "", now); break;
      case RoundStatus::Paused: log("paused", "", d_.round.alert, now); break;
      default: break;
    }
    persist();
    return true;
  }

  // Sessions

  const SessionTicket* session(const std::string& node_id) const {
    auto it = d_.sessions.find(node_id);
    return it == d_.sessions.end() ? nullptr : &it->second;
  }

  /// Fresh session whose cursor sits just before the round the node still owes.
  const SessionTicket& new_session(const std::string& node_id, Bytes session_id, TimeMs now) {
    const std::uint32_t r = d_.round.round_index;
    std::uint32_t cursor = r > 0 ? r - 1 : 0;
    if (contributed(node_id, r) || (terminal() && r > 0)) cursor = r;
    d_.sessions[node_id] = SessionTicket{std::move(session_id), node_id, cursor};
    log("session_issued", node_id, "cursor=" + std::to_string(cursor), now);
    persist();
    return d_.sessions[node_id];
  }

  void advance_session(const std::string& node_id, std::uint32_t cursor) {
    auto it = d_.sessions.find(node_id);
    if (it == d_.sessions.end() || it->second.last_acked_round >= cursor) return;
    it->second.last_acked_round = cursor;
    persist();
  }

  // Persistence

  std::optional<std::filesystem::path> checkpoint_path() const {
    if (cfg_.checkpoint_dir.empty()) return std::nullopt;
    return cfg_.checkpoint_dir / kCheckpointFile;
  }

  void persist() const {
    if (auto p = checkpoint_path()) save_checkpoint(*p, d_);
  }

 private:
  NodeRecord& node(const std::string& node_id) {
    auto it = d_.nodes.find(node_id);
    require(it != d_.nodes.end(), ErrorCode::NotFound, "unknown node '" + node_id + "'");
    return it->second;
  }

  std::optional<TimeMs> deadline_from(TimeMs now) const {
    return cfg_.round_timeout_ms ? std::optional<TimeMs>(now + *cfg_.round_timeout_ms) : std::nullopt;
  }

  void log(std::string kind, std::string node_id, std::string detail, TimeMs now,
           std::optional<std::uint32_t> round = std::nullopt) {
    d_.events.push_back(FederationEvent{d_.next_seq++, now, std::move(kind), round.value_or(d_.round.round_index),
                                        std::move(node_id), std::move(detail)});
  }

  void log_round_started(TimeMs now) {
    std::string expected;
    for (const auto& id : d_.round.expected_nodes) expected += (expected.empty() ? "" : ",") + id;
    log("round_started", "", "expected=" + expected, now);
  }

  void record_aggregation(const AdvanceOutcome& out, TimeMs now) {
    const RoundState& before = d_.round;
    RoundMetrics m;
    m.round = out.aggregated_round;
    m.contributors = out.contributors;
    double train = 0, val = 0;
    for (const auto& id : out.contributors) {
      const auto& u = before.received.at(id);
      m.total_samples += u.sample_count;
      auto rep = before.reports.find(id);
      if (rep == before.reports.end()) continue;
      m.epochs.insert(rep->second.epochs);
      m.global_test += rep->second.global_test;
      m.site_test[id] = rep->second.global_test;
      train += static_cast<double>(u.sample_count) * rep->second.train_loss;
      val += static_cast<double>(u.sample_count) * rep->second.val_loss;
    }
    if (m.total_samples > 0) {
      m.mean_train_loss = train / static_cast<double>(m.total_samples);
      m.mean_val_loss = val / static_cast<double>(m.total_samples);
    }
    std::string epochs;
    for (auto e : m.epochs) epochs += (epochs.empty() ? "" : ",") + std::to_string(e);
    log("round_aggregated", "",
        "contributors=" + std::to_string(out.contributors.size()) + " samples=" + std::to_string(m.total_samples) +
            " epochs=" + epochs,
        now, m.round);
    for (const auto& id : out.missing) {
      d_.nodes[id].liveness = Liveness::Stale;
      log("node_stale", id, "missed round " + std::to_string(m.round), now, m.round);
    }
    d_.metrics[m.round] = std::move(m);
  }

  FederationConfig cfg_;
  FederationData d_;
};

// Checkpoint file: "FCK1", u32 BE manifest length, JSON manifest, FTM1 global
// model, u32 BE update count, per update (u16 BE id length, id, u64 BE sample
// count, FTM1 weights), then u32 BE CRC-32 of every preceding byte.

inline constexpr std::string_view kCheckpointMagic = "FCK1";

namespace detail {

inline nlohmann::json counts_json(const ConfusionCounts& c) { return {c.tp, c.fp, c.tn, c.fn}; }

inline ConfusionCounts counts_from(const nlohmann::json& j) {
  return {j.at(0).get<std::uint64_t>(), j.at(1).get<std::uint64_t>(), j.at(2).get<std::uint64_t>(),
          j.at(3).get<std::uint64_t>()};
}

inline std::uint32_t crc32_of(ByteView b) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < b.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(b.size() - off, 1u << 30));
    crc = crc32(crc, b.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<E> all) {
  for (E e : all)
    if (to_string(e) == s) return e;
  fail(ErrorCode::CorruptCheckpoint, "unknown value '" + s + "'");
}

}  // namespace detail

inline nlohmann::json to_json(const RoundMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json sites = nlohmann::json::object();
  for (const auto& [id, c] : m.site_test) sites[id] = detail::counts_json(c);
  return {{"round", m.round},
          {"contributors", m.contributors},
          {"total_samples", m.total_samples},
          {"epochs", m.epochs},
          {"global_test", detail::counts_json(m.global_test)},
          {"site_test", std::move(sites)},
          {"sensitivity", opt(sensitivity(m.global_test))},
          {"specificity", opt(specificity(m.global_test))},
          {"balanced_accuracy", opt(balanced_accuracy(m.global_test))},
          {"accuracy", opt(accuracy(m.global_test))},
          {"mean_train_loss", m.mean_train_loss},
          {"mean_val_loss", m.mean_val_loss}};
}

inline Bytes encode_checkpoint(const FederationData& d) {
  using nlohmann::json;
  const RoundState& r = d.round;
  json reports = json::object();
  for (const auto& [id, rep] : r.reports)
    reports[id] = {{"epochs", rep.epochs},
                   {"train_loss", rep.train_loss},
                   {"val_loss", rep.val_loss},
                   {"test", detail::counts_json(rep.global_test)}};
  json nodes = json::array();
  for (const auto& [id, n] : d.nodes)
    nodes.push_back({{"node_id", id},
                     {"approval", to_string(n.approval)},
                     {"liveness", to_string(n.liveness)},
                     {"last_seen", n.last_seen},
                     {"contributed_rounds", n.contributed_rounds}});
  json sessions = json::array();
  for (const auto& [id, s] : d.sessions)
    sessions.push_back({{"node_id", id}, {"session_id", to_hex(s.session_id)}, {"last_acked_round", s.last_acked_round}});
  json events = json::array();
  for (const auto& e : d.events)
    events.push_back({{"seq", e.seq}, {"time", e.time}, {"kind", e.kind}, {"round", e.round}, {"node_id", e.node_id},
                      {"detail", e.detail}});
  json metrics = json::array();
  for (const auto& [round, m] : d.metrics) metrics.push_back(to_json(m));

  json manifest = {{"format", 1},
                   {"round_index", r.round_index},
                   {"status", to_string(r.status)},
                   {"deadline", r.deadline ? json(*r.deadline) : json(nullptr)},
                   {"alert", r.alert},
                   {"expected_nodes", r.expected_nodes},
                   {"reports", reports},
                   {"nodes", nodes},
                   {"sessions", sessions},
                   {"events", events},
                   {"round_metrics", metrics},
                   {"next_seq", d.next_seq}};
  const std::string text = manifest.dump();

  Bytes out;
  put_string(out, kCheckpointMagic);
  put_u32_be(out, static_cast<std::uint32_t>(text.size()));
  put_string(out, text);
  put_bytes(out, serialize(r.global_model));
  put_u32_be(out, static_cast<std::uint32_t>(r.received.size()));
  for (const auto& [id, u] : r.received) {
    put_u16_be(out, static_cast<std::uint16_t>(id.size()));
    put_string(out, id);
    put_u32_be(out, static_cast<std::uint32_t>(u.sample_count >> 32));
    put_u32_be(out, static_cast<std::uint32_t>(u.sample_count));
    put_bytes(out, serialize(u.weights));
  }
  put_u32_be(out, detail::crc32_of(out));
  return out;
}

inline FederationData decode_checkpoint(ByteView bytes) {
  require(bytes.size() >= 8, ErrorCode::CorruptCheckpoint, "file too short");
  ByteReader crc_reader(bytes.last(4), ErrorCode::CorruptCheckpoint);
  const ByteView body = bytes.first(bytes.size() - 4);
  require(crc_reader.u32_be() == detail::crc32_of(body), ErrorCode::CorruptCheckpoint, "checksum mismatch");
  try {
    ByteReader in(body, ErrorCode::CorruptCheckpoint);
    ByteView magic = in.take(4);
    require(std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin()), ErrorCode::CorruptCheckpoint, "bad magic");
    const auto manifest = nlohmann::json::parse(in.string(in.u32_be()));
    require(manifest.at("format") == 1, ErrorCode::CorruptCheckpoint, "unsupported format");

    FederationData d;
    RoundState& r = d.round;
    r.round_index = manifest.at("round_index").get<std::uint32_t>();
    r.status = parse_round_status(manifest.at("status").get<std::string>());
    if (!manifest.at("deadline").is_null()) r.deadline = manifest.at("deadline").get<TimeMs>();
    r.alert = manifest.at("alert").get<std::string>();
    r.expected_nodes = manifest.at("expected_nodes").get<std::set<std::string>>();
    for (const auto& [id, rep] : manifest.at("reports").items())
      r.reports[id] = NodeRoundReport{rep.at("epochs").get<std::uint32_t>(), rep.at("train_loss").get<double>(),
                                      rep.at("val_loss").get<double>(), detail::counts_from(rep.at("test"))};
    for (const auto& n : manifest.at("nodes")) {
      NodeRecord rec;
      rec.node_id = n.at("node_id").get<std::string>();
      rec.approval = detail::parse_enum(n.at("approval").get<std::string>(),
                                        {Approval::Pending, Approval::Approved, Approval::Evicted});
      rec.liveness = detail::parse_enum(n.at("liveness").get<std::string>(),
                                        {Liveness::Connected, Liveness::Disconnected, Liveness::Stale});
      rec.last_seen = n.at("last_seen").get<TimeMs>();
      rec.contributed_rounds = n.at("contributed_rounds").get<std::set<std::uint32_t>>();
      d.nodes[rec.node_id] = std::move(rec);
    }
    for (const auto& s : manifest.at("sessions")) {
      SessionTicket t{from_hex(s.at("session_id").get<std::string>()), s.at("node_id").get<std::string>(),
                      s.at("last_acked_round").get<std::uint32_t>()};
      d.sessions[t.node_id] = std::move(t);
    }
    for (const auto& e : manifest.at("events"))
      d.events.push_back(FederationEvent{e.at("seq").get<std::uint64_t>(), e.at("time").get<TimeMs>(),
                                         e.at("kind").get<std::string>(), e.at("round").get<std::uint32_t>(),
                                         e.at("node_id").get<std::string>(), e.at("detail").get<std::string>()});
    for (const auto& m : manifest.at("round_metrics")) {
      RoundMetrics rm;
      rm.round = m.at("round").get<std::uint32_t>();
      rm.contributors = m.at("contributors").get<std::vector<std::string>>();
      rm.total_samples = m.at("total_samples").get<std::uint64_t>();
      rm.epochs = m.at("epochs").get<std::set<std::uint32_t>>();
      rm.global_test = detail::counts_from(m.at("global_test"));
      for (const auto& [id, c] : m.at("site_test").items()) rm.site_test[id] = detail::counts_from(c);
      rm.mean_train_loss = m.at("mean_train_loss").get<double>();
      rm.mean_val_loss = m.at("mean_val_loss").get<double>();
      d.metrics[rm.round] = std::move(rm);
    }
    d.next_seq = manifest.at("next_seq").get<std::uint64_t>();

    r.global_model = read_tensor_map(in);
    const std::uint32_t count = in.u32_be();
    for (std::uint32_t i = 0; i < count; ++i) {
      WeightedUpdate u;
      u.node_id = in.string(in.u16_be());
      const std::uint64_t hi = in.u32_be();
      u.sample_count = (hi << 32) | in.u32_be();
      u.weights = read_tensor_map(in);
      std::string id = u.node_id;
      r.received[id] = std::move(u);
    }
    require(in.done(), ErrorCode::CorruptCheckpoint, "trailing bytes");
    return d;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptCheckpoint, std::string("manifest: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CorruptCheckpoint) throw;
    fail(ErrorCode::CorruptCheckpoint, e.what());
  }
}

/// Writes to a sibling temp file and renames it over `path`.
inline void save_checkpoint(const std::filesystem::path& path, const FederationData& d) {
  const Bytes bytes = encode_checkpoint(d);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(static_cast<bool>(out), ErrorCode::IoError, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorCode::IoError, "cannot rename checkpoint: " + ec.message());
}

inline FederationData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::IoError, "cannot open " + path.string());
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace fedorch
