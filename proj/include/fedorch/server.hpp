#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedorch/auth.hpp"
#include "fedorch/coordinator.hpp"
#include "fedorch/protocol.hpp"

namespace fedorch {

using ConnId = std::uint64_t;

/// A frame to send on `conn`, or just a close when `frame` is empty. With
/// `close` set the transport closes the connection after sending.
struct Outgoing {
  ConnId conn = 0;
  std::optional<Frame> frame;
  bool close = false;
};

/// Coordinator side of the node protocol, independent of any transport. The
/// caller feeds it connection events and frames and ships whatever it returns.
/// All calls must come from one thread (the federation's writer).
class CoordinatorEndpoint {
 public:
  explicit CoordinatorEndpoint(Federation fed, RandomSource random = system_random)
      : fed_(std::move(fed)), random_(std::move(random)), nonces_(fed_.config().nonce_ttl_ms, random_) {}

  Federation& federation() noexcept { return fed_; }
  const Federation& federation() const noexcept { return fed_; }
  std::size_t connection_count() const noexcept { return conns_.size(); }

  void on_open(ConnId c) { conns_[c] = Conn{}; }

  std::vector<Outgoing> on_close(ConnId c, TimeMs now) {
    drop(c, now);
    return on_tick(now);
  }

  std::vector<Outgoing> on_tick(TimeMs now) {
    fed_.tick(now);
    std::vector<Outgoing> out;
    pump(out, now);
    return out;
  }

  /// Runs an operator command against the federation, then advances and
  /// notifies nodes. Errors from the command propagate to the caller.
  template <typename F>
  std::vector<Outgoing> command(F&& f, TimeMs now) {
    f(fed_);
    return on_tick(now);
  }

  std::vector<Outgoing> on_frame(ConnId c, const Frame& f, TimeMs now) {
    std::vector<Outgoing> out;
    auto it = conns_.find(c);
    if (it == conns_.end()) return out;
    bool close = false;
    try {
      handle(c, it->second, f, now, out, close);
    } catch (const Error& e) {
      const Phase p = it->second.phase;
      close = close || p == Phase::Fresh || p == Phase::Challenged || e.code() == ErrorCode::MalformedPayload;
      out.push_back(Outgoing{c, ErrorMsg::from(e.code(), e.what()).to_frame(), close});
    }
    if (close) {
      if (out.empty() || out.back().conn != c) out.push_back(Outgoing{c, std::nullopt, true});
      out.back().close = true;
      drop(c, now);
    }
    fed_.tick(now);
    pump(out, now);
    return out;
  }

 private:
  enum class Phase { Fresh, Challenged, Authenticated, Active };

  struct Conn {
    Phase phase = Phase::Fresh;
    std::string node_id;
    Bytes nonce;
    std::uint32_t round_start_sent = 0;
  };

  void handle(ConnId c, Conn& conn, const Frame& f, TimeMs now, std::vector<Outgoing>& out, bool& close) {
    auto reply = [&](Frame fr) { out.push_back(Outgoing{c, std::move(fr), false}); };
    switch (conn.phase) {
      case Phase::Fresh: {
        require(f.type == MsgType::Hello, ErrorCode::Unauthenticated, "authenticate before " + std::string(to_string(f.type)));
        Hello h = Hello::from_frame(f);
        require(h.version == kProtocolVersion, ErrorCode::MalformedPayload,
                "protocol version " + std::to_string(h.version) + " unsupported");
        conn.node_id = h.node_id;
        conn.nonce = nonces_.issue(now);
        conn.phase = Phase::Challenged;
        reply(Challenge{conn.nonce}.to_frame());
        return;
      }
      case Phase::Challenged: {
        require(f.type == MsgType::AuthProof, ErrorCode::Unauthenticated, "expected AUTH_PROOF");
        AuthProof p = AuthProof::from_frame(f);
        auto tok = fed_.config().node_tokens.find(conn.node_id);
        // Unknown nodes still burn the nonce against a throwaway key.
        const Bytes token = tok != fed_.config().node_tokens.end() ? Bytes(tok->second.begin(), tok->second.end())
                                                                   : random_bytes(random_, 32);
        nonces_.verify(token, conn.nonce, conn.node_id, p.proof, now);
        require(p.node_id == conn.node_id, ErrorCode::BadProof, "node_id differs from HELLO");
        auto rec = fed_.nodes().find(conn.node_id);
        require(rec == fed_.nodes().end() || rec->second.approval != Approval::Evicted, ErrorCode::Unauthorized,
                conn.node_id + " has been evicted");
        if (auto prev = by_node_.find(conn.node_id); prev != by_node_.end() && prev->second != c) {
          out.push_back(Outgoing{prev->second, Shutdown{"superseded"}.to_frame(), true});
          drop(prev->second, now);
        }
        by_node_[conn.node_id] = c;
        conn.phase = Phase::Authenticated;
        fed_.node_connected(conn.node_id, now);
        reply(JoinAck{conn.node_id, fed_.state().round_index, fed_.config().total_rounds}.to_frame());
        return;
      }
      case Phase::Authenticated:
      case Phase::Active: break;
    }

    fed_.touch(conn.node_id, now);
    switch (f.type) {
      case MsgType::Heartbeat: return;
      case MsgType::ResumeReq: {
        ResumeReq req = ResumeReq::from_frame(f);
        const RoundState& st = fed_.state();
        ResumeContext ctx;
        if (const SessionTicket* s = fed_.session(conn.node_id)) ctx.server_session = *s;
        ctx.round = st.round_index;
        ctx.finished = fed_.terminal();
        ctx.round_open = st.status == RoundStatus::InRound && st.expected_nodes.count(conn.node_id);
        ctx.contributed = fed_.contributed(conn.node_id, st.round_index);
        const ResumeOutcome o = resume_handshake(SessionTicket{req.session_id, conn.node_id, req.last_acked_round}, ctx);
        if (o.decision == ResumeDecision::Rejoin) {
          const SessionTicket& s = fed_.new_session(conn.node_id, random_bytes(random_, kSessionIdSize), now);
          conn.phase = Phase::Authenticated;
          reply(ResumeState{o.decision, st.round_index, s.last_acked_round, s.session_id}.to_frame());
          return;
        }
        fed_.advance_session(conn.node_id, o.cursor);
        conn.phase = Phase::Active;
        conn.round_start_sent = 0;
        reply(ResumeState{o.decision, st.round_index, o.cursor, fed_.session(conn.node_id)->session_id}.to_frame());
        return;
      }
      case MsgType::RoundResult: {
        require(conn.phase == Phase::Active, ErrorCode::InvalidTransition, "resume the session before submitting");
        RoundResult r = RoundResult::from_frame(f);
        if (r.node_id != conn.node_id) {
          close = true;
          fail(ErrorCode::Unauthorized, "result names " + r.node_id + " on a session of " + conn.node_id);
        }
        const SubmitResult res =
            fed_.submit_update(conn.node_id, r.round, WeightedUpdate{std::move(r.model), r.sample_count, conn.node_id},
                               r.report, now);
        fed_.advance_session(conn.node_id, r.round);
        reply(RoundAck{r.round, res == SubmitResult::Duplicate}.to_frame());
        return;
      }
      default:
        close = true;
        fail(ErrorCode::InvalidTransition, "unexpected " + std::string(to_string(f.type)) + " from node");
    }
  }

  /// Delivers whatever the federation state now implies: ROUND_START to
  /// nodes owing the current round, SHUTDOWN once it is over or a node has
  /// been evicted out of the expected set.
  void pump(std::vector<Outgoing>& out, TimeMs now) {
    const RoundState& st = fed_.state();
    std::vector<ConnId> closing;
    for (auto& [id, conn] : conns_) {
      if (conn.phase != Phase::Active) continue;
      if (fed_.terminal()) {
        const char* reason = st.status == RoundStatus::Finished ? "finished" : "aborted";
        out.push_back(Outgoing{id, Shutdown{reason}.to_frame(), true});
        closing.push_back(id);
        continue;
      }
      auto rec = fed_.nodes().find(conn.node_id);
      if (rec != fed_.nodes().end() && rec->second.approval == Approval::Evicted &&
          !st.expected_nodes.count(conn.node_id)) {
        out.push_back(Outgoing{id, Shutdown{"evicted"}.to_frame(), true});
        closing.push_back(id);
        continue;
      }
      if (fed_.awaiting_update_from(conn.node_id) && conn.round_start_sent != st.round_index) {
        conn.round_start_sent = st.round_index;
        out.push_back(Outgoing{
            id, RoundStart{st.round_index, fed_.config().epochs_per_round, fed_.config().total_rounds, st.global_model}
                    .to_frame(),
            false});
      }
    }
    for (ConnId id : closing) drop(id, now);
  }

  void drop(ConnId c, TimeMs now) {
    auto it = conns_.find(c);
    if (it == conns_.end()) return;
    const std::string node = it->second.node_id;
    const bool authed = it->second.phase == Phase::Authenticated || it->second.phase == Phase::Active;
    conns_.erase(it);
    if (auto b = by_node_.find(node); b != by_node_.end() && b->second == c) {
      by_node_.erase(b);
      if (authed) fed_.node_disconnected(node, now);
    }
  }

  Federation fed_;
  RandomSource random_;
  NonceRegistry nonces_;
  std::map<ConnId, Conn> conns_;
  std::map<std::string, ConnId> by_node_;
};

}  // namespace fedorch
