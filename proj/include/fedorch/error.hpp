#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fedorch {

enum class ErrorCode {
  // tensor-core
  StructureMismatch,
  EmptyUpdateSet,
  NonFiniteInput,
  MalformedEncoding,
  // trainer
  InvalidSpec,
  DimensionMismatch,
  EmptyBatch,
  NonFiniteLoss,
  EmptySplit,
  // datakit
  TooFewSamples,
  InvalidProfile,
  ParseError,
  IoError,
  UnknownPreset,
  // metrics
  LengthMismatch,
  Empty,
  SingleClass,
  // fedproto
  Oversize,
  UnknownType,
  Truncated,
  MalformedPayload,
  NonceExpired,
  NonceReused,
  BadProof,
  Unauthenticated,
  // coordinator
  InsufficientNodes,
  AlreadyRunning,
  WrongRound,
  NotExpected,
  InvalidTransition,
  CorruptCheckpoint,
  Unauthorized,
  Conflict,
  NotFound,
  // nodeagent
  FatalConfigError,
  AuthRejected,
  // simharness
  InvalidPlan,
  Stalled,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::StructureMismatch: return "StructureMismatch";
    case ErrorCode::EmptyUpdateSet: return "EmptyUpdateSet";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::MalformedEncoding: return "MalformedEncoding";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::InvalidProfile: return "InvalidProfile";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::UnknownPreset: return "UnknownPreset";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::Empty: return "Empty";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::Oversize: return "Oversize";
    case ErrorCode::UnknownType: return "UnknownType";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::MalformedPayload: return "MalformedPayload";
    case ErrorCode::NonceExpired: return "NonceExpired";
    case ErrorCode::NonceReused: return "NonceReused";
    case ErrorCode::BadProof: return "BadProof";
    case ErrorCode::Unauthenticated: return "Unauthenticated";
    case ErrorCode::InsufficientNodes: return "InsufficientNodes";
    case ErrorCode::AlreadyRunning: return "AlreadyRunning";
    case ErrorCode::WrongRound: return "WrongRound";
    case ErrorCode::NotExpected: return "NotExpected";
    case ErrorCode::InvalidTransition: return "InvalidTransition";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::Unauthorized: return "Unauthorized";
    case ErrorCode::Conflict: return "Conflict";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::FatalConfigError: return "FatalConfigError";
    case ErrorCode::AuthRejected: return "AuthRejected";
    case ErrorCode::InvalidPlan: return "InvalidPlan";
    case ErrorCode::Stalled: return "Stalled";
  }
  return "Unknown";
}

inline std::optional<ErrorCode> parse_error_code(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(ErrorCode::Stalled); ++i) {
    const auto code = static_cast<ErrorCode>(i);
    if (to_string(code) == name) return code;
  }
  return std::nullopt;
}

/// Every failure raised by the library carries one of the codes above so
/// callers (and the wire protocol's ERROR frame) can branch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace fedorch
