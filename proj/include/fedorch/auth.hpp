#pragma once

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/rand.h>

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string_view>

#include "fedorch/bytes.hpp"
#include "fedorch/error.hpp"

namespace fedorch {

/// Milliseconds on whatever clock the caller drives (steady clock in
/// production, virtual time in the simulator).
using TimeMs = std::int64_t;

inline TimeMs steady_now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

inline Bytes hmac_sha256(ByteView key, ByteView message) {
  Bytes out(EVP_MAX_MD_SIZE);
  unsigned int len = 0;
  const unsigned char* ok = HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), message.data(),
                                 message.size(), out.data(), &len);
  require(ok != nullptr, ErrorCode::BadProof, "HMAC computation failed");
  out.resize(len);
  return out;
}

/// HMAC-SHA256(token, nonce || node_id).
inline Bytes prove(ByteView token, ByteView nonce, std::string_view node_id) {
  Bytes message(nonce.begin(), nonce.end());
  put_string(message, node_id);
  return hmac_sha256(token, message);
}

inline bool constant_time_equal(ByteView a, ByteView b) {
  if (a.size() != b.size()) return false;
  return CRYPTO_memcmp(a.data(), b.data(), a.size()) == 0;
}

using RandomSource = std::function<void(std::span<std::uint8_t>)>;

inline void system_random(std::span<std::uint8_t> out) {
  require(RAND_bytes(out.data(), static_cast<int>(out.size())) == 1, ErrorCode::BadProof, "RAND_bytes failed");
}

inline Bytes random_bytes(const RandomSource& source, std::size_t n) {
  Bytes b(n);
  source(b);
  return b;
}

/// Issued challenges. Each nonce admits exactly one verification attempt,
/// successful or not, and expires `ttl_ms` after issue.
class NonceRegistry {
 public:
  explicit NonceRegistry(TimeMs ttl_ms = 30'000, RandomSource source = system_random)
      : ttl_ms_(ttl_ms), source_(std::move(source)) {}

  Bytes issue(TimeMs now) {
    prune(now);
    Bytes nonce;
    do {
      nonce = random_bytes(source_, 32);
    } while (issued_.count(nonce));
    issued_.emplace(nonce, Entry{now, false});
    return nonce;
  }

  /// Consumes the nonce, then checks expiry and the proof. Returns true or throws.
  bool verify(ByteView token, ByteView nonce, std::string_view node_id, ByteView proof, TimeMs now) {
    auto it = issued_.find(Bytes(nonce.begin(), nonce.end()));
    require(it != issued_.end() && !it->second.consumed, ErrorCode::NonceReused, "nonce unknown or already used");
    it->second.consumed = true;
    require(now - it->second.issued_at <= ttl_ms_, ErrorCode::NonceExpired, "challenge expired");
    require(constant_time_equal(prove(token, nonce, node_id), proof), ErrorCode::BadProof, "proof does not verify");
    return true;
  }

  /// Forgets entries well past expiry. A forgotten nonce reads as reused.
  void prune(TimeMs now) {
    for (auto it = issued_.begin(); it != issued_.end();) {
      if (now - it->second.issued_at > 2 * ttl_ms_) it = issued_.erase(it);
      else ++it;
    }
  }

  std::size_t size() const noexcept { return issued_.size(); }
  TimeMs ttl_ms() const noexcept { return ttl_ms_; }

 private:
  struct Entry {
    TimeMs issued_at;
    bool consumed;
  };

  TimeMs ttl_ms_;
  RandomSource source_;
  std::map<Bytes, Entry> issued_;
};

}  // namespace fedorch
