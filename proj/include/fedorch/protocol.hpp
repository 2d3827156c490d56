#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedorch/bytes.hpp"
#include "fedorch/error.hpp"
#include "fedorch/metrics.hpp"
#include "fedorch/tensor.hpp"

namespace fedorch {

enum class MsgType : std::uint8_t {
  Hello = 0x01,
  Challenge = 0x02,
  AuthProof = 0x03,
  JoinAck = 0x04,
  RoundStart = 0x05,
  RoundResult = 0x06,
  RoundAck = 0x07,
  Heartbeat = 0x08,
  ResumeReq = 0x09,
  ResumeState = 0x0A,
  Error = 0x0B,
  Shutdown = 0x0C,
};

inline bool is_known_type(std::uint8_t code) noexcept { return code >= 0x01 && code <= 0x0C; }

inline std::string_view to_string(MsgType t) noexcept {
  switch (t) {
    case MsgType::Hello: return "HELLO";
    case MsgType::Challenge: return "CHALLENGE";
    case MsgType::AuthProof: return "AUTH_PROOF";
    case MsgType::JoinAck: return "JOIN_ACK";
    case MsgType::RoundStart: return "ROUND_START";
    case MsgType::RoundResult: return "ROUND_RESULT";
    case MsgType::RoundAck: return "ROUND_ACK";
    case MsgType::Heartbeat: return "HEARTBEAT";
    case MsgType::ResumeReq: return "RESUME_REQ";
    case MsgType::ResumeState: return "RESUME_STATE";
    case MsgType::Error: return "ERROR";
    case MsgType::Shutdown: return "SHUTDOWN";
  }
  return "?";
}

// Frames: u32 BE payload length, u8 type, payload.

inline constexpr std::size_t kFrameHeaderSize = 5;
inline constexpr std::size_t kDefaultMaxPayload = std::size_t{64} << 20;

struct Frame {
  MsgType type = MsgType::Heartbeat;
  Bytes payload;

  bool operator==(const Frame&) const = default;
};

inline Bytes encode_frame(MsgType type, ByteView payload, std::size_t max_payload = kDefaultMaxPayload) {
  require(payload.size() <= max_payload, ErrorCode::Oversize,
          std::to_string(payload.size()) + "-byte payload exceeds cap of " + std::to_string(max_payload));
  require(is_known_type(static_cast<std::uint8_t>(type)), ErrorCode::UnknownType, "undefined message type");
  Bytes out;
  out.reserve(kFrameHeaderSize + payload.size());
  put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
  put_u8(out, static_cast<std::uint8_t>(type));
  put_bytes(out, payload);
  return out;
}

inline Bytes encode_frame(const Frame& f, std::size_t max_payload = kDefaultMaxPayload) {
  return encode_frame(f.type, f.payload, max_payload);
}

/// Incremental decoder for a byte stream. Header errors are raised as soon as
/// the five header bytes are visible; after an error the decoder is poisoned
/// and yields nothing further.
class FrameDecoder {
 public:
  explicit FrameDecoder(std::size_t max_payload = kDefaultMaxPayload) : max_payload_(max_payload) {}

  void feed(ByteView data) {
    require(!poisoned_, ErrorCode::MalformedPayload, "decoder already failed");
    buffer_.insert(buffer_.end(), data.begin(), data.end());
  }

  std::optional<Frame> next() {
    require(!poisoned_, ErrorCode::MalformedPayload, "decoder already failed");
    if (buffer_.size() - pos_ < kFrameHeaderSize) return std::nullopt;
    ByteReader header(ByteView(buffer_).subspan(pos_, kFrameHeaderSize), ErrorCode::Truncated);
    const std::uint32_t len = header.u32_be();
    const std::uint8_t type = header.u8();
    if (len > max_payload_) poison(ErrorCode::Oversize, "declared payload of " + std::to_string(len) + " bytes exceeds cap");
    if (!is_known_type(type)) poison(ErrorCode::UnknownType, "message type 0x" + to_hex(ByteView(&type, 1)));
    if (buffer_.size() - pos_ - kFrameHeaderSize < len) return std::nullopt;
    const auto begin = buffer_.begin() + static_cast<std::ptrdiff_t>(pos_ + kFrameHeaderSize);
    Frame f{static_cast<MsgType>(type), Bytes(begin, begin + len)};
    pos_ += kFrameHeaderSize + len;
    if (pos_ == buffer_.size()) {
      buffer_.clear();
      pos_ = 0;
    } else if (pos_ > 4096 && pos_ * 2 > buffer_.size()) {
      buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(pos_));
      pos_ = 0;
    }
    return f;
  }

  std::size_t buffered() const noexcept { return buffer_.size() - pos_; }

  /// End of stream: any partial frame left over is an error.
  void finish() const {
    require(buffered() == 0, ErrorCode::Truncated, std::to_string(buffered()) + " bytes of an incomplete frame");
  }

 private:
  [[noreturn]] void poison(ErrorCode code, const std::string& what) {
    poisoned_ = true;
    fail(code, what);
  }

  std::size_t max_payload_;
  Bytes buffer_;
  std::size_t pos_ = 0;
  bool poisoned_ = false;
};

/// Decodes exactly one frame occupying all of `bytes`.
inline Frame decode_frame(ByteView bytes, std::size_t max_payload = kDefaultMaxPayload) {
  FrameDecoder d(max_payload);
  d.feed(bytes);
  auto f = d.next();
  require(f.has_value(), ErrorCode::Truncated, "incomplete frame");
  require(d.buffered() == 0, ErrorCode::MalformedPayload, "trailing bytes after frame");
  return std::move(*f);
}

inline std::vector<Frame> decode_stream(ByteView bytes, std::size_t max_payload = kDefaultMaxPayload) {
  FrameDecoder d(max_payload);
  d.feed(bytes);
  std::vector<Frame> out;
  while (auto f = d.next()) out.push_back(std::move(*f));
  d.finish();
  return out;
}

// Canonical text maps: "key=value\n" lines, keys strictly ascending.

using TextMap = std::map<std::string, std::string>;

namespace detail {

inline bool valid_key(std::string_view k) {
  return !k.empty() && std::all_of(k.begin(), k.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
  });
}

}  // namespace detail

inline Bytes encode_text_map(const TextMap& m) {
  Bytes out;
  for (const auto& [k, v] : m) {
    require(detail::valid_key(k), ErrorCode::MalformedPayload, "invalid key '" + k + "'");
    require(v.find('\n') == std::string::npos, ErrorCode::MalformedPayload, "newline in value of '" + k + "'");
    put_string(out, k);
    put_u8(out, '=');
    put_string(out, v);
    put_u8(out, '\n');
  }
  return out;
}

inline TextMap decode_text_map(ByteView bytes) {
  std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  TextMap m;
  std::string_view prev;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    require(nl != std::string_view::npos, ErrorCode::MalformedPayload, "unterminated line");
    const std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl + 1);
    const auto eq = line.find('=');
    require(eq != std::string_view::npos, ErrorCode::MalformedPayload, "line without '='");
    const std::string_view key = line.substr(0, eq);
    require(detail::valid_key(key), ErrorCode::MalformedPayload, "invalid key '" + std::string(key) + "'");
    require(m.empty() || prev < key, ErrorCode::MalformedPayload, "keys not strictly ascending at '" + std::string(key) + "'");
    prev = key;
    m.emplace(std::string(key), std::string(line.substr(eq + 1)));
  }
  return m;
}

inline const std::string& field(const TextMap& m, const std::string& key) {
  auto it = m.find(key);
  require(it != m.end(), ErrorCode::MalformedPayload, "missing field '" + key + "'");
  return it->second;
}

inline std::uint64_t field_u64(const TextMap& m, const std::string& key) {
  const std::string& s = field(m, key);
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc() && ptr == s.data() + s.size() && !s.empty(), ErrorCode::MalformedPayload,
          "field '" + key + "' is not an unsigned integer");
  return v;
}

inline double field_f64(const TextMap& m, const std::string& key) {
  const std::string& s = field(m, key);
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc() && ptr == s.data() + s.size() && !s.empty(), ErrorCode::MalformedPayload,
          "field '" + key + "' is not a number");
  return v;
}

inline std::string format_f64(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Model payloads: text map, one empty line, FTM1 bytes.

inline Bytes encode_model_payload(const TextMap& header, const TensorMap& model) {
  Bytes out = encode_text_map(header);
  put_u8(out, '\n');
  put_bytes(out, serialize(model));
  return out;
}

inline std::pair<TextMap, TensorMap> decode_model_payload(ByteView bytes) {
  std::size_t pos = 0;
  while (true) {
    require(pos < bytes.size(), ErrorCode::MalformedPayload, "model payload has no header terminator");
    if (bytes[pos] == '\n') break;
    while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    require(pos < bytes.size(), ErrorCode::MalformedPayload, "unterminated header line");
    ++pos;
  }
  TextMap header = decode_text_map(bytes.first(pos));
  try {
    return {std::move(header), deserialize(bytes.subspan(pos + 1))};
  } catch (const fedorch::Error& e) {
    if (e.code() == ErrorCode::MalformedEncoding) fail(ErrorCode::MalformedPayload, e.what());
    throw;
  }
}

// Messages

inline constexpr std::uint32_t kProtocolVersion = 1;
inline constexpr std::size_t kNonceSize = 32;
inline constexpr std::size_t kSessionIdSize = 16;

namespace detail {

inline Frame text_frame(MsgType t, const TextMap& m) { return Frame{t, encode_text_map(m)}; }

inline TextMap expect_text(const Frame& f, MsgType t) {
  require(f.type == t, ErrorCode::MalformedPayload,
          "expected " + std::string(to_string(t)) + ", got " + std::string(to_string(f.type)));
  return decode_text_map(f.payload);
}

inline Bytes hex_field(const TextMap& m, const std::string& key, std::size_t size) {
  Bytes b = from_hex(field(m, key));
  require(b.size() == size, ErrorCode::MalformedPayload, "field '" + key + "' has wrong length");
  return b;
}

inline std::uint32_t u32_field(const TextMap& m, const std::string& key) {
  const auto v = field_u64(m, key);
  require(v <= 0xFFFFFFFFu, ErrorCode::MalformedPayload, "field '" + key + "' out of range");
  return static_cast<std::uint32_t>(v);
}

inline void put_counts(TextMap& m, const std::string& prefix, const ConfusionCounts& c) {
  m[prefix + "_fn"] = std::to_string(c.fn);
  m[prefix + "_fp"] = std::to_string(c.fp);
  m[prefix + "_tn"] = std::to_string(c.tn);
  m[prefix + "_tp"] = std::to_string(c.tp);
}

inline ConfusionCounts get_counts(const TextMap& m, const std::string& prefix) {
  return ConfusionCounts{field_u64(m, prefix + "_tp"), field_u64(m, prefix + "_fp"), field_u64(m, prefix + "_tn"),
                         field_u64(m, prefix + "_fn")};
}

}  // namespace detail

struct Hello {
  std::string node_id;
  std::uint32_t version = kProtocolVersion;

  Frame to_frame() const {
    return detail::text_frame(MsgType::Hello, {{"node_id", node_id}, {"version", std::to_string(version)}});
  }
  static Hello from_frame(const Frame& f) {
    auto m = detail::expect_text(f, MsgType::Hello);
    Hello h{field(m, "node_id"), detail::u32_field(m, "version")};
    require(!h.node_id.empty(), ErrorCode::MalformedPayload, "empty node_id");
    return h;
  }
  bool operator==(const Hello&) const = default;
};

struct Challenge {
  Bytes nonce;

  Frame to_frame() const { return detail::text_frame(MsgType::Challenge, {{"nonce", to_hex(nonce)}}); }
  static Challenge from_frame(const Frame& f) {
    auto m = detail::expect_text(f, MsgType::Challenge);
    return {detail::hex_field(m, "nonce", kNonceSize)};
  }
  bool operator==(const Challenge&) const = default;
};

struct AuthProof {
  std::string node_id;
  Bytes proof;

  Frame to_frame() const {
    return detail::text_frame(MsgType::AuthProof, {{"node_id", node_id}, {"proof", to_hex(proof)}});
  }
  static AuthProof from_frame(const Frame& f) {
    auto m = detail::expect_text(f, MsgType::AuthProof);
    return {field(m, "node_id"), detail::hex_field(m, "proof", 32)};
  }
  bool operator==(const AuthProof&) const = default;
};

struct JoinAck {
  std::string node_id;
  std::uint32_t round = 0;
  std::uint32_t total_rounds = 0;

  Frame to_frame() const {
    return detail::text_frame(MsgType::JoinAck, {{"node_id", node_id},
                                                 {"round", std::to_string(round)},
                                                 {"total_rounds", std::to_string(total_rounds)}});
  }
  static JoinAck from_frame(const Frame& f) {
    auto m = detail::expect_text(f, MsgType::JoinAck);
    return {field(m, "node_id"), detail::u32_field(m, "round"), detail::u32_field(m, "total_rounds")};
  }
  bool operator==(const JoinAck&) const = default;
};

struct RoundStart {
  std::uint32_t round = 0;
  std::uint32_t epochs = 0;
  std::uint32_t total_rounds = 0;
  TensorMap model;

  Frame to_frame() const {
    TextMap h{{"epochs", std::to_string(epochs)},
              {"round", std::to_string(round)},
              {"total_rounds", std::to_string(total_rounds)}};
    return Frame{MsgType::RoundStart, encode_model_payload(h, model)};
  }
  static RoundStart from_frame(const Frame& f) {
    require(f.type == MsgType::RoundStart, ErrorCode::MalformedPayload, "expected ROUND_START");
    auto [h, model] = decode_model_payload(f.payload);
    return {detail::u32_field(h, "round"), detail::u32_field(h, "epochs"), detail::u32_field(h, "total_rounds"),
            std::move(model)};
  }
};

/// What a node reports alongside its weights. `global_test` scores the global
/// model the node received for this round on its own test split.
struct NodeRoundReport {
  std::uint32_t epochs = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  ConfusionCounts global_test;

  bool operator==(const NodeRoundReport&) const = default;
};

struct RoundResult {
  std::string node_id;
  std::uint32_t round = 0;
  std::uint64_t sample_count = 0;
  NodeRoundReport report;
  TensorMap model;

  Frame to_frame() const {
    TextMap h{{"epochs", std::to_string(report.epochs)},
              {"node_id", node_id},
              {"round", std::to_string(round)},
              {"sample_count", std::to_string(sample_count)},
              {"train_loss", format_f64(report.train_loss)},
              {"val_loss", format_f64(report.val_loss)}};
    detail::put_counts(h, "test", report.global_test);
    return Frame{MsgType::RoundResult, encode_model_payload(h, model)};
  }
  static RoundResult from_frame(const Frame& f) {
    require(f.type == MsgType::RoundResult, ErrorCode::MalformedPayload, "expected ROUND_RESULT");
    auto [h, model] = decode_model_payload(f.payload);
    RoundResult r;
    r.node_id = field(h, "node_id");
    r.round = detail::u32_field(h, "round");
    r.sample_count = field_u64(h, "sample_count");
    r.report.epochs = detail::u32_field(h, "epochs");
    r.report.train_loss = field_f64(h, "train_loss");
    r.report.val_loss = field_f64(h, "val_loss");
    r.report.global_test = detail::get_counts(h, "test");
    r.model = std::move(model);
    return r;
  }
};

struct RoundAck {
  std::uint32_t round = 0;
  bool duplicate = false;

  Frame to_frame() const {
    return detail::text_frame(MsgType::RoundAck,
                              {{"duplicate", duplicate ? "1" : "0"}, {"round", std::to_string(round)}});
  }
  static RoundAck from_frame(const Frame& f) {
    auto m = detail::expect_text(f, MsgType::RoundAck);
    return {detail::u32_field(m, "round"), field(m, "duplicate") == "1"};
  }
  bool operator==(const RoundAck&) const = default;
};

inline Frame heartbeat_frame() { return Frame{MsgType::Heartbeat, {}}; }

struct ResumeReq {
  Bytes session_id;  // empty when the node holds no ticket
  std::uint32_t last_acked_round = 0;

  Frame to_frame() const {
    return detail::text_frame(MsgType::ResumeReq, {{"last_acked_round", std::to_string(last_acked_round)},
                                                   {"session_id", to_hex(session_id)}});
  }
  static ResumeReq from_frame(const Frame& f) {
    auto m = detail::expect_text(f, MsgType::ResumeReq);
    ResumeReq r{from_hex(field(m, "session_id")), detail::u32_field(m, "last_acked_round")};
    require(r.session_id.empty() || r.session_id.size() == kSessionIdSize, ErrorCode::MalformedPayload,
            "session_id has wrong length");
    return r;
  }
  bool operator==(const ResumeReq&) const = default;
};

enum class ResumeDecision { RoundStart, Wait, Done, Rejoin };

inline std::string_view to_string(ResumeDecision d) noexcept {
  switch (d) {
    case ResumeDecision::RoundStart: return "ROUND_START";
    case ResumeDecision::Wait: return "WAIT";
    case ResumeDecision::Done: return "DONE";
    case ResumeDecision::Rejoin: return "REJOIN";
  }
  return "?";
}

inline ResumeDecision parse_resume_decision(std::string_view s) {
  for (auto d : {ResumeDecision::RoundStart, ResumeDecision::Wait, ResumeDecision::Done, ResumeDecision::Rejoin})
    if (to_string(d) == s) return d;
  fail(ErrorCode::MalformedPayload, "unknown resume decision '" + std::string(s) + "'");
}

struct ResumeState {
  ResumeDecision decision = ResumeDecision::Wait;
  std::uint32_t round = 0;
  std::uint32_t last_acked_round = 0;
  Bytes session_id;

  Frame to_frame() const {
    return detail::text_frame(MsgType::ResumeState, {{"decision", std::string(to_string(decision))},
                                                     {"last_acked_round", std::to_string(last_acked_round)},
                                                     {"round", std::to_string(round)},
                                                     {"session_id", to_hex(session_id)}});
  }
  static ResumeState from_frame(const Frame& f) {
    auto m = detail::expect_text(f, MsgType::ResumeState);
    return {parse_resume_decision(field(m, "decision")), detail::u32_field(m, "round"),
            detail::u32_field(m, "last_acked_round"), detail::hex_field(m, "session_id", kSessionIdSize)};
  }
  bool operator==(const ResumeState&) const = default;
};

struct ErrorMsg {
  std::string code;
  std::string message;

  Frame to_frame() const {
    std::string msg = message;
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    return detail::text_frame(MsgType::Error, {{"code", code}, {"message", msg}});
  }
  static ErrorMsg from_frame(const Frame& f) {
    auto m = detail::expect_text(f, MsgType::Error);
    return {field(m, "code"), field(m, "message")};
  }
  static ErrorMsg from(ErrorCode c, std::string message) { return {std::string(to_string(c)), std::move(message)}; }
  bool operator==(const ErrorMsg&) const = default;
};

struct Shutdown {
  std::string reason;

  Frame to_frame() const { return detail::text_frame(MsgType::Shutdown, {{"reason", reason}}); }
  static Shutdown from_frame(const Frame& f) {
    auto m = detail::expect_text(f, MsgType::Shutdown);
    return {field(m, "reason")};
  }
  bool operator==(const Shutdown&) const = default;
};

// Sessions

struct SessionTicket {
  Bytes session_id;
  std::string node_id;
  std::uint32_t last_acked_round = 0;

  bool operator==(const SessionTicket&) const = default;
};

/// Server-side view of one node at the moment it asks to resume.
struct ResumeContext {
  std::optional<SessionTicket> server_session;  // the coordinator's record for this node, if any
  std::uint32_t round = 0;                      // current round index
  bool finished = false;                        // Finished or Aborted
  bool round_open = false;                      // InRound and the node is expected
  bool contributed = false;                     // node already submitted for `round`
};

struct ResumeOutcome {
  ResumeDecision decision;
  std::uint32_t cursor;  // merged last_acked_round; unused for Rejoin
};

/// The ticket's cursor is merged with the server's record by max, since an
/// ack may have been lost after the server recorded it.
inline ResumeOutcome resume_handshake(const SessionTicket& ticket, const ResumeContext& ctx) {
  const auto& rec = ctx.server_session;
  if (!rec || ticket.session_id.empty() || rec->session_id != ticket.session_id || rec->node_id != ticket.node_id)
    return {ResumeDecision::Rejoin, 0};
  const std::uint32_t cursor = std::max(ticket.last_acked_round, rec->last_acked_round);
  if (ctx.finished) return {ResumeDecision::Done, cursor};
  if (ctx.contributed) return {ResumeDecision::Wait, cursor};
  if (ctx.round > 0 && cursor + 1 < ctx.round) return {ResumeDecision::Rejoin, 0};
  if (cursor >= ctx.round && ctx.round > 0) return {ResumeDecision::Rejoin, 0};
  if (!ctx.round_open) return {ResumeDecision::Wait, cursor};
  return {ResumeDecision::RoundStart, cursor};
}

inline TextMap ticket_to_text(const SessionTicket& t) {
  return {{"last_acked_round", std::to_string(t.last_acked_round)},
          {"node_id", t.node_id},
          {"session_id", to_hex(t.session_id)}};
}

inline SessionTicket ticket_from_text(const TextMap& m) {
  SessionTicket t{from_hex(field(m, "session_id")), field(m, "node_id"), detail::u32_field(m, "last_acked_round")};
  require(t.session_id.size() == kSessionIdSize, ErrorCode::MalformedPayload, "session_id has wrong length");
  return t;
}

}  // namespace fedorch
