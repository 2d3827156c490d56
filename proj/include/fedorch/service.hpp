#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fedorch/control.hpp"
#include "fedorch/net.hpp"
#include "fedorch/nodeagent.hpp"
#include "fedorch/server.hpp"
#include "fedorch/trainer.hpp"

namespace fedorch {

struct ServerConfig {
  std::string listen_host = "0.0.0.0";
  std::uint16_t listen_port = 7400;
  std::string control_host = "127.0.0.1";
  std::uint16_t control_port = 7480;
  FederationConfig federation;
  ModelSpec model{16, {}, 0};
  std::filesystem::path eval_csv;  // optional offline cross-site matrix
  bool auto_start = false;         // start as soon as min_nodes approved nodes are connected
  bool exit_when_done = true;
  TimeMs tick_ms = 200;
  TimeMs linger_ms = 2000;  // after Finished/Aborted, time allowed for SHUTDOWN to reach nodes
};

namespace detail {

inline std::pair<std::string, std::uint16_t> parse_host_port(const std::string& addr, const std::string& what) {
  const auto colon = addr.rfind(':');
  require(colon != std::string::npos, ErrorCode::FatalConfigError, what + " must be host:port");
  const int port = std::atoi(addr.c_str() + colon + 1);
  require(port >= 0 && port <= 65535 && colon + 1 < addr.size(), ErrorCode::FatalConfigError,
          what + " port out of range");
  return {addr.substr(0, colon), static_cast<std::uint16_t>(port)};
}

}  // namespace detail

/// Node tokens come from environment variables or permission-checked files.
inline ServerConfig parse_server_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  auto bad = [](const std::string& what) { fail(ErrorCode::FatalConfigError, what); };
  try {
    ServerConfig c;
    if (j.contains("listen")) std::tie(c.listen_host, c.listen_port) = detail::parse_host_port(j.at("listen"), "listen");
    if (j.contains("control"))
      std::tie(c.control_host, c.control_port) = detail::parse_host_port(j.at("control"), "control");

    FederationConfig& f = c.federation;
    if (j.contains("federation")) {
      const auto& fj = j.at("federation");
      f.total_rounds = fj.value("total_rounds", f.total_rounds);
      f.epochs_per_round = fj.value("epochs_per_round", f.epochs_per_round);
      f.quorum_fraction = fj.value("quorum_fraction", f.quorum_fraction);
      if (fj.contains("round_timeout_s") && !fj.at("round_timeout_s").is_null())
        f.round_timeout_ms = static_cast<TimeMs>(1000.0 * fj.at("round_timeout_s").get<double>());
      f.min_nodes = fj.value("min_nodes", f.min_nodes);
      if (fj.contains("checkpoint_dir")) f.checkpoint_dir = base_dir / fj.at("checkpoint_dir").get<std::string>();
      f.nonce_ttl_ms = static_cast<TimeMs>(1000.0 * fj.value("nonce_ttl_s", f.nonce_ttl_ms / 1000.0));
      f.stale_after_ms = static_cast<TimeMs>(1000.0 * fj.value("stale_after_s", f.stale_after_ms / 1000.0));
    }
    if (j.contains("model")) {
      const auto& mj = j.at("model");
      c.model.input_dim = mj.value("input_dim", c.model.input_dim);
      c.model.hidden_dims = mj.value("hidden_dims", c.model.hidden_dims);
      c.model.seed = mj.value("seed", c.model.seed);
    }
    if (c.model.input_dim == 0) bad("model.input_dim must be >= 1");
    for (auto h : c.model.hidden_dims)
      if (h == 0) bad("model.hidden_dims entries must be >= 1");

    const auto& nodes = j.at("nodes");
    if (!nodes.is_array() || nodes.empty()) bad("nodes must be a non-empty list");
    for (const auto& n : nodes) {
      const std::string id = n.at("id").get<std::string>();
      if (id.empty()) bad("node id is empty");
      if (f.node_tokens.count(id)) bad("duplicate node " + id);
      const auto& tok = n.at("token");
      if (tok.contains("env") == tok.contains("file")) bad("token for " + id + " needs exactly one of env / file");
      f.node_tokens[id] = tok.contains("env") ? load_secret(tok.at("env").get<std::string>(), {})
                                              : load_secret("", base_dir / tok.at("file").get<std::string>());
      if (n.value("approved", false)) f.preapproved.insert(id);
    }
    if (j.contains("eval_csv")) c.eval_csv = base_dir / j.at("eval_csv").get<std::string>();
    c.auto_start = j.value("auto_start", c.auto_start);
    c.exit_when_done = j.value("exit_when_done", c.exit_when_done);
    c.tick_ms = static_cast<TimeMs>(1000.0 * j.value("tick_s", c.tick_ms / 1000.0));
    if (c.tick_ms <= 0) bad("tick_s must be positive");
    validate_config(f);
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FatalConfigError, e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::FatalConfigError) throw;
    fail(ErrorCode::FatalConfigError, e.what());
  }
}

inline ServerConfig load_server_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::FatalConfigError, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FatalConfigError, path.string() + ": " + e.what());
  }
  return parse_server_config(j, path.parent_path());
}

/// One machine-parsable log line: `ts=<ms> event=<kind> key=value ...`.
inline void log_line(std::ostream* out, std::string_view event, const std::vector<std::pair<std::string, std::string>>& kv) {
  if (!out) return;
  std::string line = "ts=" + std::to_string(steady_now_ms()) + " event=" + std::string(event);
  for (const auto& [k, v] : kv) {
    line += ' ' + k + '=';
    const bool quote = v.empty() || v.find_first_of(" \"=") != std::string::npos;
    if (!quote) {
      line += v;
      continue;
    }
    line += '"';
    for (char ch : v) {
      if (ch == '"' || ch == '\\') line += '\\';
      line += ch;
    }
    line += '"';
  }
  line += '\n';
  *out << line << std::flush;
}

/// Owns the coordinator endpoint and runs the single writer loop over TCP.
/// Control commands are queued to the loop; readers get immutable snapshots.
class FederationService : public FederationControl {
 public:
  FederationService(ServerConfig cfg, Federation fed, std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), endpoint_(std::move(fed)), log_(log) {
    if (!cfg_.eval_csv.empty()) offline_ = load_eval_csv(cfg_.eval_csv);
    logged_events_ = endpoint_.federation().events().size();
    publish();
  }

  ~FederationService() override { stop(); }

  /// Binds the node listener and starts the writer thread.
  void start() {
    if (const auto& dir = endpoint_.federation().config().checkpoint_dir; !dir.empty()) {
      std::error_code ec;
      std::filesystem::create_directories(dir, ec);
      require(!ec, ErrorCode::IoError, "cannot create checkpoint dir " + dir.string() + ": " + ec.message());
      endpoint_.federation().persist();
    }
    listener_ = tcp_listen(cfg_.listen_host, cfg_.listen_port);
    port_ = local_port(listener_);
    int fds[2];
    require(::pipe(fds) == 0, ErrorCode::IoError, detail::errno_text("pipe"));
    wake_read_ = Socket(fds[0]);
    wake_write_ = Socket(fds[1]);
    detail::set_nonblocking(wake_read_.fd());
    detail::set_nonblocking(wake_write_.fd());
    running_ = true;
    log_line(log_, "listening", {{"host", cfg_.listen_host}, {"port", std::to_string(port_)}});
    thread_ = std::thread([this] { loop(); });
  }

  /// Asks the loop to exit; safe from any thread.
  void request_stop() {
    stop_requested_ = true;
    wake();
  }

  void stop() {
    request_stop();
    if (thread_.joinable()) thread_.join();
  }

  /// Blocks until the writer loop exits (federation done, or stop()).
  void wait() {
    if (thread_.joinable()) thread_.join();
  }

  std::uint16_t port() const noexcept { return port_; }
  bool running() const noexcept { return running_; }

  /// Only safe once the loop has exited.
  const Federation& federation() const noexcept { return endpoint_.federation(); }

  std::shared_ptr<const ControlSnapshot> snapshot() const override {
    std::lock_guard lock(snap_mu_);
    return snap_;
  }

  CommandResult submit(const ControlCommand& cmd) override {
    std::future<CommandResult> fut;
    {
      std::lock_guard lock(cmd_mu_);
      if (!running_) return {ErrorCode::Conflict, "federation service is not running"};
      commands_.push_back(Pending{cmd, {}});
      fut = commands_.back().done.get_future();
    }
    wake();
    return fut.get();
  }

 private:
  struct Pending {
    ControlCommand cmd;
    std::promise<CommandResult> done;
  };

  void wake() {
    if (!wake_write_.valid()) return;
    const char b = 1;
    [[maybe_unused]] auto n = ::write(wake_write_.fd(), &b, 1);
  }

  void publish() {
    auto s = std::make_shared<const ControlSnapshot>(make_snapshot(endpoint_.federation(), offline_));
    std::lock_guard lock(snap_mu_);
    snap_ = std::move(s);
  }

  void dispatch(std::vector<Outgoing> out) {
    for (auto& o : out) {
      auto it = conns_.find(o.conn);
      if (it == conns_.end()) continue;
      if (o.frame) it->second.queue(*o.frame);
      if (o.close) it->second.close_after_flush();
    }
  }

  void close_conn(ConnId id, TimeMs now) {
    auto it = conns_.find(id);
    if (it == conns_.end()) return;
    conns_.erase(it);
    log_line(log_, "connection_closed", {{"conn", std::to_string(id)}});
    dispatch(endpoint_.on_close(id, now));
  }

  void run_commands(TimeMs now) {
    std::deque<Pending> batch;
    {
      std::lock_guard lock(cmd_mu_);
      batch.swap(commands_);
    }
    for (auto& p : batch) {
      CommandResult res;
      try {
        dispatch(endpoint_.command(
            [&](Federation& f) { apply_command(f, p.cmd, [&] { return init_model(cfg_.model); }, now); }, now));
        log_line(log_, "command", {{"kind", std::string(to_string(p.cmd.kind))}, {"node", p.cmd.node_id}, {"result", "ok"}});
      } catch (const Error& e) {
        res = {e.code(), e.what()};
        log_line(log_, "command", {{"kind", std::string(to_string(p.cmd.kind))},
                                   {"node", p.cmd.node_id},
                                   {"result", std::string(to_string(e.code()))}});
      }
      publish();
      p.done.set_value(std::move(res));
    }
  }

  void maybe_auto_start(TimeMs now) {
    const Federation& fed = endpoint_.federation();
    if (!cfg_.auto_start || fed.state().status != RoundStatus::WaitingForNodes) return;
    std::size_t ready = 0;
    for (const auto& [id, n] : fed.nodes())
      ready += n.approval == Approval::Approved && n.liveness == Liveness::Connected;
    if (ready < fed.config().min_nodes || ready < fed.approved_nodes().size()) return;
    try {
      dispatch(endpoint_.command([&](Federation& f) { f.start(init_model(cfg_.model), now); }, now));
      log_line(log_, "auto_start", {{"nodes", std::to_string(ready)}});
    } catch (const Error& e) {
      log_line(log_, "auto_start_failed", {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
    }
  }

  void loop() {
    std::optional<TimeMs> done_at;
    TimeMs next_tick = steady_now_ms();
    while (!stop_requested_) {
      std::vector<pollfd> pfds;
      pfds.push_back({listener_.fd(), POLLIN, 0});
      pfds.push_back({wake_read_.fd(), POLLIN, 0});
      std::vector<ConnId> ids;
      for (auto& [id, c] : conns_) {
        pfds.push_back({c.fd(), static_cast<short>(POLLIN | (c.wants_write() ? POLLOUT : 0)), 0});
        ids.push_back(id);
      }
      const TimeMs wait = std::max<TimeMs>(0, next_tick - steady_now_ms());
      const int rc = ::poll(pfds.data(), pfds.size(), static_cast<int>(std::min<TimeMs>(wait, cfg_.tick_ms)));
      if (rc < 0 && errno != EINTR) {
        log_line(log_, "poll_failed", {{"error", std::strerror(errno)}});
        break;
      }
      TimeMs now = steady_now_ms();

      if (pfds[1].revents & POLLIN) {
        char buf[256];
        while (::read(wake_read_.fd(), buf, sizeof buf) > 0) {
        }
      }
      run_commands(now);

      if (pfds[0].revents & POLLIN) {
        while (true) {
          const int fd = ::accept(listener_.fd(), nullptr, nullptr);
          if (fd < 0) break;
          Socket s(fd);
          detail::set_nonblocking(fd);
          int one = 1;
          ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
          const ConnId id = next_conn_++;
          conns_.emplace(id, FramedConnection(std::move(s)));
          endpoint_.on_open(id);
          log_line(log_, "connection_opened", {{"conn", std::to_string(id)}});
        }
      }

      for (std::size_t i = 0; i < ids.size(); ++i) {
        const short ev = pfds[i + 2].revents;
        if (!ev) continue;
        auto it = conns_.find(ids[i]);
        if (it == conns_.end()) continue;
        std::vector<Frame> frames;
        bool alive = true;
        try {
          alive = it->second.read(frames);
        } catch (const Error& e) {
          log_line(log_, "protocol_error", {{"conn", std::to_string(ids[i])}, {"error", std::string(to_string(e.code()))}});
          alive = false;
        }
        for (const auto& f : frames) {
          if (!conns_.count(ids[i])) break;
          dispatch(endpoint_.on_frame(ids[i], f, now));
        }
        if (!alive || (ev & (POLLERR | POLLHUP) && !(ev & POLLIN))) close_conn(ids[i], now);
      }

      if (now >= next_tick) {
        dispatch(endpoint_.on_tick(now));
        maybe_auto_start(now);
        next_tick = now + cfg_.tick_ms;
      }

      std::vector<ConnId> dead;
      for (auto& [id, c] : conns_) {
        if (!c.flush() || (c.closing() && !c.wants_write())) dead.push_back(id);
      }
      for (ConnId id : dead) close_conn(id, now);

      const Federation& fed = endpoint_.federation();
      if (fed.events().size() != logged_events_) {
        for (std::size_t k = logged_events_; k < fed.events().size(); ++k) {
          const auto& e = fed.events()[k];
          log_line(log_, e.kind, {{"round", std::to_string(e.round)}, {"node", e.node_id}, {"detail", e.detail}});
        }
        logged_events_ = fed.events().size();
        publish();
      }

      if (cfg_.exit_when_done && fed.terminal()) {
        if (!done_at) done_at = now;
        if (conns_.empty() || now - *done_at >= cfg_.linger_ms) break;
      }
    }
    {
      std::lock_guard lock(cmd_mu_);
      running_ = false;
      for (auto& p : commands_) p.done.set_value({ErrorCode::Conflict, "federation service stopped"});
      commands_.clear();
    }
    conns_.clear();
    publish();
    log_line(log_, "stopped", {{"status", std::string(to_string(endpoint_.federation().state().status))}});
  }

  ServerConfig cfg_;
  CoordinatorEndpoint endpoint_;
  std::ostream* log_;
  std::vector<EvalCell> offline_;
  Socket listener_, wake_read_, wake_write_;
  std::uint16_t port_ = 0;
  std::thread thread_;
  std::atomic<bool> running_{false}, stop_requested_{false};
  std::map<ConnId, FramedConnection> conns_;
  ConnId next_conn_ = 1;
  std::size_t logged_events_ = 0;
  mutable std::mutex snap_mu_;
  std::shared_ptr<const ControlSnapshot> snap_;
  std::mutex cmd_mu_;
  std::deque<Pending> commands_;
};

}  // namespace fedorch
