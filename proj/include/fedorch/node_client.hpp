#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <thread>

#include "fedorch/net.hpp"
#include "fedorch/nodeagent.hpp"
#include "fedorch/service.hpp"

namespace fedorch {

enum AgentExit : int { kExitFinished = 0, kExitShutdown = 1, kExitAuthRejected = 2, kExitConfigError = 3 };

struct AgentRunOptions {
  std::ostream* log = nullptr;
  const std::atomic<bool>* stop = nullptr;
  int connect_timeout_ms = 5000;
};

namespace detail {

inline bool sleep_unless_stopped(TimeMs ms, const std::atomic<bool>* stop) {
  const auto until = std::chrono::steady_clock::now() + std::chrono::milliseconds(ms);
  while (std::chrono::steady_clock::now() < until) {
    if (stop && *stop) return false;
    std::this_thread::sleep_for(std::min(std::chrono::milliseconds(50),
                                         std::chrono::duration_cast<std::chrono::milliseconds>(
                                             until - std::chrono::steady_clock::now())));
  }
  return !(stop && *stop);
}

inline std::uint64_t backoff_seed(const std::string& node_id) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : node_id) h = (h ^ c) * 1099511628211ull;
  return h;
}

}  // namespace detail

/// Connect, authenticate, train rounds and reconnect with capped backoff
/// until the coordinator shuts the node down. Returns an AgentExit code.
inline int run_agent(const NodeConfig& cfg, const AgentRunOptions& opt = {}) {
  std::ostream* log = opt.log;
  Bytes token;
  std::optional<ReferenceLearner> learner;
  try {
    token = load_token(cfg);
    learner.emplace(load_node_dataset(cfg), cfg.trainer);
  } catch (const Error& e) {
    log_line(log, "fatal", {{"error", "FatalConfigError"}, {"message", e.what()}});
    return kExitConfigError;
  }
  log_line(log, "dataset_loaded", {{"node", cfg.node_id},
                                   {"train", std::to_string(learner->data().split.train.size())},
                                   {"val", std::to_string(learner->data().split.val.size())},
                                   {"test", std::to_string(learner->data().split.test.size())}});

  std::optional<SessionTicket> ticket;
  std::filesystem::path ticket_path, progress_path;
  if (!cfg.state_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.state_dir, ec);
    ticket_path = cfg.state_dir / "ticket.txt";
    progress_path = cfg.state_dir / "progress.json";
    try {
      ticket = load_ticket(ticket_path);
      if (std::filesystem::exists(progress_path)) learner->restore(load_progress(progress_path));
      if (ticket) log_line(log, "ticket_loaded", {{"cursor", std::to_string(ticket->last_acked_round)}});
    } catch (const Error& e) {
      log_line(log, "state_discarded", {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
      ticket.reset();
      SiteDataset data = learner->data();
      learner.emplace(std::move(data), cfg.trainer);
    }
    learner->on_progress([progress_path](const LearnerProgress& p) { save_progress(progress_path, p); });
  }

  NodeAgent agent(cfg.node_id, token, *learner, ticket, [&](const SessionTicket& t) {
    if (!ticket_path.empty()) save_ticket(ticket_path, t);
  });
  Backoff backoff(cfg.reconnect, detail::backoff_seed(cfg.node_id));

  while (!agent.finished()) {
    if (opt.stop && *opt.stop) return kExitShutdown;
    std::optional<FramedConnection> conn;
    try {
      conn.emplace(tcp_connect(cfg.server_host, cfg.server_port, opt.connect_timeout_ms));
    } catch (const Error& e) {
      const TimeMs delay = backoff.next();
      log_line(log, "connect_failed", {{"message", e.what()}, {"retry_ms", std::to_string(delay)}});
      if (!detail::sleep_unless_stopped(delay, opt.stop)) return kExitShutdown;
      continue;
    }
    log_line(log, "connected", {{"server", cfg.server_host + ":" + std::to_string(cfg.server_port)}});
    for (const auto& f : agent.on_connected()) conn->queue(f);
    TimeMs last_send = steady_now_ms();
    AgentPhase last_phase = agent.phase();
    bool alive = true;
    while (alive && !agent.finished()) {
      if (opt.stop && *opt.stop) return kExitShutdown;
      if (!conn->flush()) break;
      if (conn->closing() && !conn->wants_write()) break;
      const TimeMs now = steady_now_ms();
      if (agent.phase() == AgentPhase::Ready && now - last_send >= cfg.heartbeat_ms) {
        conn->queue(heartbeat_frame());
        last_send = now;
        continue;
      }
      pollfd p{conn->fd(), static_cast<short>(POLLIN | (conn->wants_write() ? POLLOUT : 0)), 0};
      const TimeMs wait = std::clamp<TimeMs>(cfg.heartbeat_ms - (now - last_send), 1, 200);
      if (::poll(&p, 1, static_cast<int>(wait)) < 0 && errno != EINTR) break;
      if (!(p.revents & (POLLIN | POLLHUP | POLLERR))) continue;
      std::vector<Frame> frames;
      try {
        alive = conn->read(frames);
      } catch (const Error& e) {
        log_line(log, "protocol_error", {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
        alive = false;
      }
      for (const auto& f : frames) {
        AgentStep step = agent.on_frame(f);
        for (const auto& out : step.send) {
          if (out.type == MsgType::RoundResult) {
            const auto& sub = agent.submitted_rounds();
            log_line(log, "update_sent", {{"round", std::to_string(sub.empty() ? 0 : sub.back())}});
          }
          conn->queue(out);
        }
        if (!step.send.empty()) last_send = steady_now_ms();
        if (agent.phase() != last_phase) {
          last_phase = agent.phase();
          if (last_phase == AgentPhase::Ready) backoff.reset();
          log_line(log, "phase", {{"phase", std::string(to_string(last_phase))}});
        }
        if (step.close) {
          conn->close_after_flush();
          break;
        }
        if (agent.finished()) break;
      }
    }
    conn->flush();
    agent.on_disconnected();
    if (agent.finished()) break;
    const TimeMs delay = backoff.next();
    log_line(log, "disconnected", {{"retry_ms", std::to_string(delay)}});
    if (!detail::sleep_unless_stopped(delay, opt.stop)) return kExitShutdown;
  }

  if (agent.phase() == AgentPhase::Failed) {
    const Error& e = *agent.failure();
    if (e.code() == ErrorCode::AuthRejected) {
      log_line(log, "auth_rejected",
               {{"message", std::string(e.what()) +
                                "; check the node token and that this node id is registered on the coordinator"}});
      return kExitAuthRejected;
    }
    log_line(log, "failed", {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
    return kExitShutdown;
  }
  log_line(log, "shutdown", {{"reason", agent.shutdown_reason()},
                             {"rounds", std::to_string(agent.submitted_rounds().size())}});
  return agent.shutdown_reason() == "finished" ? kExitFinished : kExitShutdown;
}

}  // namespace fedorch
