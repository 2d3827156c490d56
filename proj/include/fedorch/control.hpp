#pragma once

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fedorch/auth.hpp"
#include "fedorch/coordinator.hpp"
#include "fedorch/metrics.hpp"

namespace fedorch {

inline constexpr std::string_view kOperatorTokenEnv = "FEDORCH_OPERATOR_TOKEN";

/// One cell of an offline cross-site evaluation.
struct EvalCell {
  std::string model_site;
  std::string test_site;
  std::optional<double> balanced_accuracy;
};

/// Reads the `*_cross_eval.csv` files written by the experiment reports.
inline std::vector<EvalCell> load_eval_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoError, "cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::ParseError, path.string() + ": empty file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    for (std::string col; std::getline(ss, col, ',');) header.push_back(col);
  }
  auto index_of = [&](std::string_view name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    fail(ErrorCode::ParseError, path.string() + ": missing column " + std::string(name));
  };
  const std::size_t im = index_of("model_site"), it = index_of("test_site"), ib = index_of("balanced_accuracy");
  std::vector<EvalCell> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string col; std::getline(ss, col, ',');) cols.push_back(col);
    if (!line.empty() && line.back() == ',') cols.emplace_back();
    require(cols.size() == header.size(), ErrorCode::ParseError,
            path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) + " columns");
    EvalCell c{cols[im], cols[it], std::nullopt};
    if (!cols[ib].empty()) {
      try {
        c.balanced_accuracy = std::stod(cols[ib]);
      } catch (const std::exception&) {
        fail(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": bad balanced_accuracy");
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

/// Immutable view of a federation handed to API readers.
struct ControlSnapshot {
  nlohmann::json status;
  nlohmann::json nodes;
  std::map<std::uint32_t, nlohmann::json> rounds;
  nlohmann::json eval_matrix;
};

namespace detail {

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline nlohmann::json status_json(const Federation& fed) {
  const RoundState& r = fed.state();
  std::vector<std::string> received;
  for (const auto& [id, u] : r.received) received.push_back(id);
  std::size_t connected = 0;
  for (const auto& [id, n] : fed.nodes()) connected += n.liveness == Liveness::Connected;
  const auto approved = fed.approved_nodes();
  return {{"round", r.round_index},
          {"total_rounds", fed.config().total_rounds},
          {"epochs_per_round", fed.config().epochs_per_round},
          {"status", std::string(to_string(r.status))},
          {"received", r.received.size()},
          {"expected", r.expected_nodes.size()},
          {"received_nodes", received},
          {"expected_nodes", std::vector<std::string>(r.expected_nodes.begin(), r.expected_nodes.end())},
          {"approved_nodes", std::vector<std::string>(approved.begin(), approved.end())},
          {"connected", connected},
          {"aggregations", fed.round_metrics().size()},
          {"alert", r.alert},
          {"deadline_ms", r.deadline ? nlohmann::json(*r.deadline) : nlohmann::json(nullptr)},
          {"last_event_seq", fed.events().empty() ? 0 : fed.events().back().seq}};
}

inline nlohmann::json nodes_json(const Federation& fed) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [id, n] : fed.nodes())
    arr.push_back({{"node_id", id},
                   {"approval", std::string(to_string(n.approval))},
                   {"liveness", std::string(to_string(n.liveness))},
                   {"last_seen_ms", n.last_seen},
                   {"contributed_rounds", n.contributed_rounds}});
  return {{"nodes", std::move(arr)}};
}

/// Rows are models, columns are test sites. The live FED row is the global
/// model as evaluated by each contributor at the start of the latest
/// aggregated round; it replaces any FED row from the offline file.
inline nlohmann::json eval_matrix_json(const Federation& fed, const std::vector<EvalCell>& offline) {
  std::vector<std::string> rows, cols;
  std::map<std::pair<std::string, std::string>, std::optional<double>> cells;
  auto add = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& c : offline) {
    add(rows, c.model_site);
    add(cols, c.test_site);
    cells[{c.model_site, c.test_site}] = c.balanced_accuracy;
  }
  nlohmann::json live_round = nullptr;
  if (!fed.round_metrics().empty()) {
    const RoundMetrics& m = fed.round_metrics().rbegin()->second;
    live_round = m.round;
    for (auto it = cells.begin(); it != cells.end();) it = it->first.first == "FED" ? cells.erase(it) : std::next(it);
    add(rows, "FED");
    for (const auto& [site, counts] : m.site_test) {
      add(cols, site);
      cells[{"FED", site}] = balanced_accuracy(counts);
    }
  }
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& c : cols) {
      auto it = cells.find({r, c});
      row.push_back(it == cells.end() ? nlohmann::json(nullptr) : opt_json(it->second));
    }
    grid.push_back(std::move(row));
  }
  return {{"metric", "balanced_accuracy"},
          {"models", rows},
          {"sites", cols},
          {"values", std::move(grid)},
          {"federated_round", live_round}};
}

}  // namespace detail

inline ControlSnapshot make_snapshot(const Federation& fed, const std::vector<EvalCell>& offline_eval = {}) {
  ControlSnapshot s;
  s.status = detail::status_json(fed);
  s.nodes = detail::nodes_json(fed);
  for (const auto& [r, m] : fed.round_metrics()) s.rounds[r] = to_json(m);
  s.eval_matrix = detail::eval_matrix_json(fed, offline_eval);
  return s;
}

struct ControlCommand {
  enum class Kind { Start, Pause, Resume, Abort, Approve, Evict };
  Kind kind = Kind::Start;
  std::string node_id;

  bool operator==(const ControlCommand&) const = default;
};

inline std::string_view to_string(ControlCommand::Kind k) noexcept {
  switch (k) {
    case ControlCommand::Kind::Start: return "start";
    case ControlCommand::Kind::Pause: return "pause";
    case ControlCommand::Kind::Resume: return "resume";
    case ControlCommand::Kind::Abort: return "abort";
    case ControlCommand::Kind::Approve: return "approve";
    case ControlCommand::Kind::Evict: return "evict";
  }
  return "?";
}

/// Runs a command against the federation. Only the writer thread calls this.
inline void apply_command(Federation& fed, const ControlCommand& cmd, const std::function<TensorMap()>& initial_model,
                          TimeMs now) {
  using K = ControlCommand::Kind;
  switch (cmd.kind) {
    case K::Start:
      require(fed.state().status == RoundStatus::WaitingForNodes, ErrorCode::AlreadyRunning,
              "federation is " + std::string(to_string(fed.state().status)));
      fed.start(initial_model(), now);
      return;
    case K::Pause: fed.pause(now); return;
    case K::Resume: fed.resume(now); return;
    case K::Abort: fed.abort(now); return;
    case K::Approve:
      require(fed.nodes().count(cmd.node_id), ErrorCode::NotFound, "unknown node " + cmd.node_id);
      require(fed.nodes().at(cmd.node_id).approval != Approval::Evicted, ErrorCode::Conflict,
              cmd.node_id + " was evicted");
      fed.approve(cmd.node_id, now);
      return;
    case K::Evict:
      require(fed.nodes().count(cmd.node_id), ErrorCode::NotFound, "unknown node " + cmd.node_id);
      fed.evict(cmd.node_id, now);
      return;
  }
}

struct CommandResult {
  std::optional<ErrorCode> error;
  std::string message;

  bool ok() const noexcept { return !error; }
};

/// What the HTTP layer needs from a running federation.
class FederationControl {
 public:
  virtual ~FederationControl() = default;
  virtual std::shared_ptr<const ControlSnapshot> snapshot() const = 0;
  /// Blocks until the writer has applied (or rejected) the command.
  virtual CommandResult submit(const ControlCommand& cmd) = 0;
};

struct HttpResponse {
  int status = 200;
  std::string body;

  bool operator==(const HttpResponse&) const = default;
};

inline int http_status_for(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::Unauthorized: return 401;
    case ErrorCode::NotFound: return 404;
    case ErrorCode::AlreadyRunning:
    case ErrorCode::InvalidTransition:
    case ErrorCode::InsufficientNodes:
    case ErrorCode::Conflict: return 409;
    default: return 400;
  }
}

/// Routes control requests. Every response body is a JSON object.
class ControlApi {
 public:
  ControlApi(FederationControl& control, std::string operator_token)
      : control_(control), token_(std::move(operator_token)) {
    require(!token_.empty(), ErrorCode::FatalConfigError,
            "operator token is empty; set " + std::string(kOperatorTokenEnv));
  }

  HttpResponse handle(std::string_view method, std::string_view path, std::string_view authorization) const {
    if (!authorized(authorization)) return error(401, ErrorCode::Unauthorized, "missing or wrong operator token");
    const auto parts = split_path(path);
    if (parts.empty()) return error(404, ErrorCode::NotFound, "no route " + std::string(path));

    if (is_read_route(parts)) {
      if (method != "GET") return error(405, ErrorCode::Conflict, "use GET for " + std::string(path));
      return read(parts, path);
    }
    if (auto cmd = command_for(parts)) {
      if (method != "POST") return error(405, ErrorCode::Conflict, "use POST for " + std::string(path));
      CommandResult res = control_.submit(*cmd);
      if (!res.ok()) return error(http_status_for(*res.error), *res.error, res.message);
      nlohmann::json body = {{"ok", true}, {"command", std::string(to_string(cmd->kind))}};
      if (!cmd->node_id.empty()) body["node_id"] = cmd->node_id;
      body["status"] = control_.snapshot()->status;
      return {200, body.dump()};
    }
    return error(404, ErrorCode::NotFound, "no route " + std::string(path));
  }

 private:
  static std::vector<std::string> split_path(std::string_view path) {
    if (auto q = path.find('?'); q != std::string_view::npos) path = path.substr(0, q);
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < path.size()) {
      while (i < path.size() && path[i] == '/') ++i;
      std::size_t j = i;
      while (j < path.size() && path[j] != '/') ++j;
      if (j > i) out.emplace_back(path.substr(i, j - i));
      i = j;
    }
    return out;
  }

  static bool is_read_route(const std::vector<std::string>& p) {
    if (p.size() == 1) return p[0] == "status" || p[0] == "nodes" || p[0] == "eval-matrix" || p[0] == "rounds";
    return p.size() == 3 && p[0] == "rounds" && p[2] == "metrics";
  }

  static std::optional<ControlCommand> command_for(const std::vector<std::string>& p) {
    using K = ControlCommand::Kind;
    if (p.size() == 2 && p[0] == "federation") {
      if (p[1] == "start") return ControlCommand{K::Start, ""};
      if (p[1] == "pause") return ControlCommand{K::Pause, ""};
      if (p[1] == "resume") return ControlCommand{K::Resume, ""};
      if (p[1] == "abort") return ControlCommand{K::Abort, ""};
    }
    if (p.size() == 3 && p[0] == "nodes") {
      if (p[2] == "approve") return ControlCommand{K::Approve, p[1]};
      if (p[2] == "evict") return ControlCommand{K::Evict, p[1]};
    }
    return std::nullopt;
  }

  HttpResponse read(const std::vector<std::string>& p, std::string_view path) const {
    auto snap = control_.snapshot();
    if (p[0] == "status") return {200, snap->status.dump()};
    if (p[0] == "nodes") return {200, snap->nodes.dump()};
    if (p[0] == "eval-matrix") return {200, snap->eval_matrix.dump()};
    if (p.size() == 1) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& [r, m] : snap->rounds) arr.push_back(m);
      return {200, nlohmann::json{{"rounds", std::move(arr)}}.dump()};
    }
    std::uint32_t round = 0;
    const auto& s = p[1];
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), round);
    if (ec != std::errc() || ptr != s.data() + s.size())
      return error(400, ErrorCode::ParseError, "bad round index '" + s + "'");
    auto it = snap->rounds.find(round);
    if (it == snap->rounds.end()) return error(404, ErrorCode::NotFound, "no metrics for round " + s + " in " + std::string(path));
    return {200, it->second.dump()};
  }

  bool authorized(std::string_view header) const {
    constexpr std::string_view bearer = "Bearer ";
    if (header.substr(0, bearer.size()) != bearer) return false;
    return constant_time_equal(as_bytes(header.substr(bearer.size())), as_bytes(token_));
  }

  static HttpResponse error(int status, ErrorCode code, const std::string& message) {
    return {status, nlohmann::json{{"ok", false}, {"error", std::string(to_string(code))}, {"message", message}}.dump()};
  }

  FederationControl& control_;
  std::string token_;
};

/// Operator token from the environment; empty when unset.
inline std::string operator_token_from_env() {
  const char* v = std::getenv(std::string(kOperatorTokenEnv).c_str());
  return v ? std::string(v) : std::string();
}

}  // namespace fedorch
