#pragma once

#include <sys/stat.h>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedorch/auth.hpp"
#include "fedorch/datakit.hpp"
#include "fedorch/metrics.hpp"
#include "fedorch/protocol.hpp"
#include "fedorch/rng.hpp"
#include "fedorch/tensor.hpp"
#include "fedorch/trainer.hpp"

namespace fedorch {

// Reconnect policy

struct ReconnectPolicy {
  TimeMs initial_backoff_ms = 1'000;
  double multiplier = 2.0;
  TimeMs max_backoff_ms = 60'000;
  double jitter = 0.1;  // fraction of the base delay added at random
};

inline void validate_policy(const ReconnectPolicy& p) {
  require(p.initial_backoff_ms > 0 && p.max_backoff_ms > 0 && p.multiplier > 0, ErrorCode::FatalConfigError,
          "backoff parameters must be positive");
  require(p.multiplier >= 1.0, ErrorCode::FatalConfigError, "backoff multiplier must be >= 1");
  require(p.max_backoff_ms >= p.initial_backoff_ms, ErrorCode::FatalConfigError,
          "max_backoff must be >= initial_backoff");
  require(p.jitter >= 0.0 && p.jitter <= 1.0, ErrorCode::FatalConfigError, "jitter must lie in [0, 1]");
}

/// Capped exponential backoff with jitter. Within one outage the delays never
/// decrease and never exceed max_backoff_ms; reset() starts a new outage.
class Backoff {
 public:
  Backoff(ReconnectPolicy policy, std::uint64_t seed) : policy_(policy), rng_(seed) { validate_policy(policy_); }

  TimeMs next() {
    const double base = std::min(static_cast<double>(policy_.max_backoff_ms),
                                 static_cast<double>(policy_.initial_backoff_ms) * factor_);
    factor_ = std::min(factor_ * policy_.multiplier, 1e12);
    const double jittered = std::min(static_cast<double>(policy_.max_backoff_ms), base * (1.0 + policy_.jitter * rng_.uniform()));
    last_ = std::max(last_, static_cast<TimeMs>(jittered));
    return last_;
  }

  void reset() {
    factor_ = 1.0;
    last_ = 0;
  }

 private:
  ReconnectPolicy policy_;
  Rng rng_;
  double factor_ = 1.0;
  TimeMs last_ = 0;
};

// Local learning

struct LearnerOutput {
  WeightedUpdate update;
  NodeRoundReport report;
};

/// What a node runs when a round starts. Implementations must be
/// deterministic in (global, round, epochs) given their construction inputs.
class LocalLearner {
 public:
  virtual ~LocalLearner() = default;
  virtual LearnerOutput train(const TensorMap& global, std::uint32_t round, std::uint32_t epochs) = 0;
};

/// Trains `epochs` passes on the node's train split starting from `global`,
/// with shuffles seeded by derive_seed(config.seed, round).
inline LearnerOutput local_round(const TensorMap& global, const SiteDataset& data, std::uint32_t round,
                                 std::uint32_t epochs, const TrainerConfig& config, TrainerState& state) {
  require(epochs >= 1, ErrorCode::InvalidSpec, "epochs must be >= 1");
  Network net = Network::from_weights(global);
  require(net.input_dim() == data.dim(), ErrorCode::StructureMismatch,
          "global model expects " + std::to_string(net.input_dim()) + " features, " + data.site_id + " has " +
              std::to_string(data.dim()));
  if (config.reset_optimizer_each_round) {
    state.optimizer = TrainerState::fresh(config).optimizer;
  }
  require(state.optimizer.first_moment.empty() || state.optimizer.first_moment.size() == global.numel(),
          ErrorCode::StructureMismatch, "optimizer state does not match the global model");

  LearnerOutput out;
  if (!data.split.test.empty()) {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    for (std::size_t i : data.split.test) {
      scores.push_back(net.predict(data.features.row(i)));
      labels.push_back(data.labels[i]);
    }
    out.report.global_test = confusion(scores, labels);
  }
  TrainReport tr = train_local(global, data, epochs, derive_seed(config.seed, round), config, state);
  out.update = WeightedUpdate{std::move(tr.weights), tr.sample_count, data.site_id};
  out.report.epochs = tr.epochs_run;
  out.report.train_loss = tr.final_train_loss;
  out.report.val_loss = tr.final_val_loss;
  return out;
}

/// Trainer state around the most recent round: `pre` is what that round
/// started from, `post` what it left. A repeat of the round restarts from
/// `pre`, so retraining after a lost submission reproduces the same update.
struct LearnerProgress {
  std::uint32_t round = 0;
  TrainerState pre;
  TrainerState post;
};

class ReferenceLearner : public LocalLearner {
 public:
  ReferenceLearner(SiteDataset data, TrainerConfig config)
      : data_(std::move(data)), config_(config) {
    progress_.post = TrainerState::fresh(config_);
    progress_.pre = progress_.post;
  }

  LearnerOutput train(const TensorMap& global, std::uint32_t round, std::uint32_t epochs) override {
    if (cache_ && cache_->round == round && cache_->epochs == epochs && bit_equal(cache_->global, global))
      return cache_->output;
    require(round >= progress_.round, ErrorCode::InvalidTransition,
            "round " + std::to_string(round) + " after round " + std::to_string(progress_.round));
    TrainerState state = round == progress_.round ? progress_.pre : progress_.post;
    const TrainerState before = state;
    LearnerOutput out = local_round(global, data_, round, epochs, config_, state);
    progress_ = LearnerProgress{round, before, std::move(state)};
    cache_ = Cached{round, epochs, global, out};
    ++trainings_;
    if (on_progress_) on_progress_(progress_);
    return out;
  }

  const SiteDataset& data() const noexcept { return data_; }
  const LearnerProgress& progress() const noexcept { return progress_; }
  void restore(LearnerProgress p) {
    progress_ = std::move(p);
    cache_.reset();
  }
  std::size_t trainings() const noexcept { return trainings_; }

  /// Called after every fresh training run, before its result is returned.
  void on_progress(std::function<void(const LearnerProgress&)> f) { on_progress_ = std::move(f); }

 private:
  struct Cached {
    std::uint32_t round;
    std::uint32_t epochs;
    TensorMap global;
    LearnerOutput output;
  };

  SiteDataset data_;
  TrainerConfig config_;
  LearnerProgress progress_;
  std::optional<Cached> cache_;
  std::size_t trainings_ = 0;
  std::function<void(const LearnerProgress&)> on_progress_;
};

// Trainer state files (JSON; doubles are written with round-trip precision).

inline nlohmann::json to_json(const TrainerState& s) {
  return {{"step", s.optimizer.step},
          {"first_moment", s.optimizer.first_moment},
          {"second_moment", s.optimizer.second_moment},
          {"learning_rate", s.optimizer.learning_rate},
          {"beta1", s.optimizer.beta1},
          {"beta2", s.optimizer.beta2},
          {"epsilon", s.optimizer.epsilon},
          {"factor", s.scheduler.factor},
          {"patience", s.scheduler.patience},
          {"best_loss", std::isfinite(s.scheduler.best_loss) ? nlohmann::json(s.scheduler.best_loss) : nlohmann::json(nullptr)},
          {"evals_since_improvement", s.scheduler.evals_since_improvement},
          {"min_lr", s.scheduler.min_lr},
          {"epochs_completed", s.epochs_completed}};
}

inline TrainerState trainer_state_from_json(const nlohmann::json& j) {
  TrainerState s;
  s.optimizer.step = j.at("step").get<decltype(s.optimizer.step)>();
  s.optimizer.first_moment = j.at("first_moment").get<std::vector<double>>();
  s.optimizer.second_moment = j.at("second_moment").get<std::vector<double>>();
  s.optimizer.learning_rate = j.at("learning_rate").get<double>();
  s.optimizer.beta1 = j.at("beta1").get<double>();
  s.optimizer.beta2 = j.at("beta2").get<double>();
  s.optimizer.epsilon = j.at("epsilon").get<double>();
  s.scheduler.factor = j.at("factor").get<double>();
  s.scheduler.patience = j.at("patience").get<decltype(s.scheduler.patience)>();
  s.scheduler.best_loss =
      j.at("best_loss").is_null() ? std::numeric_limits<double>::infinity() : j.at("best_loss").get<double>();
  s.scheduler.evals_since_improvement =
      j.at("evals_since_improvement").get<decltype(s.scheduler.evals_since_improvement)>();
  s.scheduler.min_lr = j.at("min_lr").get<double>();
  s.epochs_completed = j.at("epochs_completed").get<std::uint64_t>();
  return s;
}

namespace detail {

inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + tmp.string());
    out << text;
    require(static_cast<bool>(out), ErrorCode::IoError, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorCode::IoError, "cannot rename " + tmp.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::IoError, "cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace detail

inline void save_progress(const std::filesystem::path& path, const LearnerProgress& p) {
  nlohmann::json j{{"round", p.round}, {"pre", to_json(p.pre)}, {"post", to_json(p.post)}};
  detail::write_file_atomic(path, j.dump());
}

inline LearnerProgress load_progress(const std::filesystem::path& path) {
  try {
    auto j = nlohmann::json::parse(detail::read_file(path));
    return LearnerProgress{j.at("round").get<std::uint32_t>(), trainer_state_from_json(j.at("pre")),
                           trainer_state_from_json(j.at("post"))};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

inline void save_ticket(const std::filesystem::path& path, const SessionTicket& t) {
  const Bytes text = encode_text_map(ticket_to_text(t));
  detail::write_file_atomic(path, std::string(text.begin(), text.end()));
}

inline std::optional<SessionTicket> load_ticket(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  const std::string text = detail::read_file(path);
  return ticket_from_text(decode_text_map(as_bytes(text)));
}

// Node configuration

struct NodeConfig {
  std::string node_id;
  std::string server_host = "127.0.0.1";
  std::uint16_t server_port = 7400;
  std::string token_env;                   // name of an environment variable holding the token
  std::filesystem::path token_file;        // or a file readable only by its owner
  std::filesystem::path dataset_path;      // CSV
  std::optional<SiteProfile> synthetic;    // or a generated site
  std::size_t input_dim = 16;              // for synthetic sites
  SplitRatios split = kDefaultSplit;
  TrainerConfig trainer;
  ReconnectPolicy reconnect;
  std::filesystem::path state_dir;         // ticket and trainer state; empty keeps them in memory
  TimeMs heartbeat_ms = 5'000;
};

/// Parses a node config document. Relative paths resolve against `base_dir`.
inline NodeConfig parse_node_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  auto bad = [](const std::string& what) { fail(ErrorCode::FatalConfigError, what); };
  try {
    NodeConfig c;
    c.node_id = j.at("node_id").get<std::string>();
    if (c.node_id.empty()) bad("node_id is empty");
    const std::string addr = j.at("server").get<std::string>();
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) bad("server must be host:port");
    c.server_host = addr.substr(0, colon);
    const int port = std::atoi(addr.c_str() + colon + 1);
    if (port <= 0 || port > 65535) bad("server port out of range");
    c.server_port = static_cast<std::uint16_t>(port);

    const auto& tok = j.at("token");
    if (tok.contains("env") == tok.contains("file")) bad("token needs exactly one of env / file");
    if (tok.contains("env")) c.token_env = tok.at("env").get<std::string>();
    if (tok.contains("file")) c.token_file = base_dir / tok.at("file").get<std::string>();

    const auto& data = j.at("data");
    if (data.contains("csv") == data.contains("synthetic")) bad("data needs exactly one of csv / synthetic");
    if (data.contains("csv")) c.dataset_path = base_dir / data.at("csv").get<std::string>();
    if (data.contains("synthetic")) {
      SiteProfile p = data.at("synthetic").get<SiteProfile>();
      if (p.site_id.empty()) p.site_id = c.node_id;
      validate_profile(p);
      c.synthetic = p;
      c.input_dim = data.value("input_dim", c.input_dim);
      if (c.input_dim == 0) bad("input_dim must be >= 1");
    }
    if (data.contains("split")) {
      const auto& s = data.at("split");
      c.split = SplitRatios{s.at(0).get<unsigned>(), s.at(1).get<unsigned>()};
      if (c.split.train_pct + c.split.val_pct >= 100) bad("split leaves no test share");
    }

    if (j.contains("trainer")) {
      const auto& t = j.at("trainer");
      c.trainer.learning_rate = t.value("learning_rate", c.trainer.learning_rate);
      c.trainer.batch_size = t.value("batch_size", c.trainer.batch_size);
      c.trainer.epochs_per_round = t.value("epochs_per_round", c.trainer.epochs_per_round);
      c.trainer.seed = t.value("seed", c.trainer.seed);
      c.trainer.reset_optimizer_each_round = t.value("reset_optimizer_each_round", false);
    }
    if (c.trainer.epochs_per_round == 0) bad("trainer.epochs_per_round must be >= 1");
    if (c.trainer.batch_size == 0) bad("trainer.batch_size must be >= 1");
    if (!(c.trainer.learning_rate > 0)) bad("trainer.learning_rate must be positive");

    if (j.contains("reconnect")) {
      const auto& r = j.at("reconnect");
      c.reconnect.initial_backoff_ms =
          static_cast<TimeMs>(1000.0 * r.value("initial_backoff_s", c.reconnect.initial_backoff_ms / 1000.0));
      c.reconnect.multiplier = r.value("multiplier", c.reconnect.multiplier);
      c.reconnect.max_backoff_ms =
          static_cast<TimeMs>(1000.0 * r.value("max_backoff_s", c.reconnect.max_backoff_ms / 1000.0));
      c.reconnect.jitter = r.value("jitter", c.reconnect.jitter);
    }
    validate_policy(c.reconnect);
    if (j.contains("state_dir")) c.state_dir = base_dir / j.at("state_dir").get<std::string>();
    c.heartbeat_ms = static_cast<TimeMs>(1000.0 * j.value("heartbeat_s", 5.0));
    if (c.heartbeat_ms <= 0) bad("heartbeat_s must be positive");
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FatalConfigError, e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::FatalConfigError) throw;
    fail(ErrorCode::FatalConfigError, e.what());
  }
}

inline NodeConfig load_node_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::FatalConfigError, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FatalConfigError, path.string() + ": " + e.what());
  }
  return parse_node_config(j, path.parent_path());
}

/// Reads a secret from an environment variable, or from a file that must
/// not be accessible to group or others.
inline std::string load_secret(const std::string& env, const std::filesystem::path& file) {
  std::string token;
  if (!env.empty()) {
    const char* v = std::getenv(env.c_str());
    require(v && *v, ErrorCode::FatalConfigError, "environment variable " + env + " is not set");
    token = v;
  } else {
    struct stat st {};
    require(::stat(file.c_str(), &st) == 0, ErrorCode::FatalConfigError, "cannot stat token file " + file.string());
    require((st.st_mode & 077) == 0, ErrorCode::FatalConfigError,
            "token file " + file.string() + " is accessible to group or others; chmod 600 it");
    token = detail::read_file(file);
    while (!token.empty() && (token.back() == '\n' || token.back() == '\r')) token.pop_back();
    require(!token.empty(), ErrorCode::FatalConfigError, "token file " + file.string() + " is empty");
  }
  return token;
}

inline Bytes load_token(const NodeConfig& c) {
  const std::string token = load_secret(c.token_env, c.token_file);
  return Bytes(token.begin(), token.end());
}

inline SiteDataset load_node_dataset(const NodeConfig& c) {
  if (c.synthetic) return generate_site(*c.synthetic, c.input_dim, c.split);
  SiteDataset ds = load_csv(c.dataset_path, c.trainer.seed, c.split);
  if (ds.site_id.empty()) ds.site_id = c.node_id;
  return ds;
}

// Protocol client

enum class AgentPhase { Disconnected, AwaitChallenge, AwaitJoinAck, AwaitResume, Ready, Done, Failed };

inline std::string_view to_string(AgentPhase p) noexcept {
  switch (p) {
    case AgentPhase::Disconnected: return "Disconnected";
    case AgentPhase::AwaitChallenge: return "AwaitChallenge";
    case AgentPhase::AwaitJoinAck: return "AwaitJoinAck";
    case AgentPhase::AwaitResume: return "AwaitResume";
    case AgentPhase::Ready: return "Ready";
    case AgentPhase::Done: return "Done";
    case AgentPhase::Failed: return "Failed";
  }
  return "?";
}

struct AgentStep {
  std::vector<Frame> send;
  bool close = false;  // drop the connection after sending
};

/// Node side of the protocol, independent of any transport. Holds the
/// session ticket and forwards rounds to the learner.
class NodeAgent {
 public:
  NodeAgent(std::string node_id, Bytes token, LocalLearner& learner, std::optional<SessionTicket> ticket = std::nullopt,
            std::function<void(const SessionTicket&)> persist_ticket = {})
      : node_id_(std::move(node_id)),
        token_(std::move(token)),
        learner_(learner),
        ticket_(std::move(ticket)),
        persist_(std::move(persist_ticket)) {}

  AgentPhase phase() const noexcept { return phase_; }
  bool finished() const noexcept { return phase_ == AgentPhase::Done || phase_ == AgentPhase::Failed; }
  const std::optional<Error>& failure() const noexcept { return failure_; }
  const std::optional<SessionTicket>& ticket() const noexcept { return ticket_; }
  const std::string& shutdown_reason() const noexcept { return shutdown_reason_; }
  const std::string& node_id() const noexcept { return node_id_; }
  const std::vector<std::uint32_t>& submitted_rounds() const noexcept { return submitted_; }
  std::uint32_t total_rounds() const noexcept { return total_rounds_; }

  std::vector<Frame> on_connected() {
    if (finished()) return {};
    phase_ = AgentPhase::AwaitChallenge;
    return {Hello{node_id_}.to_frame()};
  }

  void on_disconnected() {
    if (!finished()) phase_ = AgentPhase::Disconnected;
  }

  AgentStep on_frame(const Frame& f) {
    AgentStep step;
    if (finished() || phase_ == AgentPhase::Disconnected) return step;
    try {
      handle(f, step);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::MalformedPayload) {
        step.close = true;
      } else {
        fail_with(e, step);
      }
    }
    return step;
  }

 private:
  void handle(const Frame& f, AgentStep& step) {
    if (f.type == MsgType::Error) {
      ErrorMsg err = ErrorMsg::from_frame(f);
      const auto code = parse_error_code(err.code).value_or(ErrorCode::MalformedPayload);
      const bool authenticating = phase_ == AgentPhase::AwaitChallenge || phase_ == AgentPhase::AwaitJoinAck;
      if (code == ErrorCode::BadProof || code == ErrorCode::Unauthorized ||
          (authenticating && code == ErrorCode::NonceReused)) {
        fail_with(Error(ErrorCode::AuthRejected, err.code + ": " + err.message +
                                                     " (check the node token and that the node is not evicted)"),
                  step);
        return;
      }
      if (authenticating || phase_ == AgentPhase::AwaitResume) step.close = true;
      return;
    }
    if (f.type == MsgType::Shutdown) {
      shutdown_reason_ = Shutdown::from_frame(f).reason;
      if (shutdown_reason_ == "superseded") {
        step.close = true;
        return;
      }
      phase_ = AgentPhase::Done;
      step.close = true;
      return;
    }
    if (f.type == MsgType::Heartbeat) return;

    switch (phase_) {
      case AgentPhase::AwaitChallenge: {
        Challenge c = Challenge::from_frame(f);
        step.send.push_back(AuthProof{node_id_, prove(token_, c.nonce, node_id_)}.to_frame());
        phase_ = AgentPhase::AwaitJoinAck;
        return;
      }
      case AgentPhase::AwaitJoinAck: {
        JoinAck a = JoinAck::from_frame(f);
        total_rounds_ = a.total_rounds;
        step.send.push_back(resume_request());
        phase_ = AgentPhase::AwaitResume;
        return;
      }
      case AgentPhase::AwaitResume: {
        ResumeState s = ResumeState::from_frame(f);
        if (s.decision == ResumeDecision::Rejoin) {
          set_ticket(SessionTicket{s.session_id, node_id_, s.last_acked_round});
          step.send.push_back(resume_request());
          return;
        }
        set_ticket(SessionTicket{s.session_id, node_id_, std::max(cursor(), s.last_acked_round)});
        if (s.decision == ResumeDecision::Done) {
          phase_ = AgentPhase::Done;
          shutdown_reason_ = "finished";
          step.close = true;
          return;
        }
        phase_ = AgentPhase::Ready;
        return;
      }
      case AgentPhase::Ready: {
        if (f.type == MsgType::RoundStart) {
          RoundStart rs = RoundStart::from_frame(f);
          if (rs.round <= cursor()) return;  // already acknowledged
          LearnerOutput out = learner_.train(rs.model, rs.round, rs.epochs);
          RoundResult rr{node_id_, rs.round, out.update.sample_count, out.report, std::move(out.update.weights)};
          step.send.push_back(rr.to_frame());
          submitted_.push_back(rs.round);
          return;
        }
        if (f.type == MsgType::RoundAck) {
          RoundAck ack = RoundAck::from_frame(f);
          if (ack.round > cursor()) set_ticket(SessionTicket{ticket_->session_id, node_id_, ack.round});
          return;
        }
        step.close = true;
        return;
      }
      default: step.close = true; return;
    }
  }

  Frame resume_request() const {
    return ticket_ ? ResumeReq{ticket_->session_id, ticket_->last_acked_round}.to_frame() : ResumeReq{{}, 0}.to_frame();
  }

  std::uint32_t cursor() const { return ticket_ ? ticket_->last_acked_round : 0; }

  void set_ticket(SessionTicket t) {
    if (ticket_ && ticket_->session_id == t.session_id) t.last_acked_round = std::max(t.last_acked_round, cursor());
    ticket_ = std::move(t);
    if (persist_) persist_(*ticket_);
  }

  void fail_with(const Error& e, AgentStep& step) {
    failure_ = e;
    phase_ = AgentPhase::Failed;
    step.send.clear();
    step.close = true;
  }

  std::string node_id_;
  Bytes token_;
  LocalLearner& learner_;
  std::optional<SessionTicket> ticket_;
  std::function<void(const SessionTicket&)> persist_;
  AgentPhase phase_ = AgentPhase::Disconnected;
  std::optional<Error> failure_;
  std::string shutdown_reason_;
  std::vector<std::uint32_t> submitted_;
  std::uint32_t total_rounds_ = 0;
};

}  // namespace fedorch
