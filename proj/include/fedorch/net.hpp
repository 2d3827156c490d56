#pragma once

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "fedorch/bytes.hpp"
#include "fedorch/error.hpp"
#include "fedorch/protocol.hpp"

namespace fedorch {

/// Owning file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { reset(); }

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

namespace detail {

inline std::string errno_text(const std::string& what) { return what + ": " + std::strerror(errno); }

inline void set_nonblocking(int fd) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  require(flags >= 0 && ::fcntl(fd, F_SETFL, flags | O_NONBLOCK) == 0, ErrorCode::IoError, errno_text("fcntl"));
}

inline addrinfo* resolve(const std::string& host, std::uint16_t port, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), std::to_string(port).c_str(), &hints, &res);
  require(rc == 0, ErrorCode::IoError, "cannot resolve " + host + ": " + ::gai_strerror(rc));
  return res;
}

}  // namespace detail

/// Listening socket; port 0 picks a free port (see local_port).
inline Socket tcp_listen(const std::string& host, std::uint16_t port, int backlog = 64) {
  addrinfo* res = detail::resolve(host, port, true);
  std::string last = "no address";
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
    if (!s.valid()) continue;
    int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(s.fd(), backlog) == 0) {
      ::freeaddrinfo(res);
      detail::set_nonblocking(s.fd());
      return s;
    }
    last = std::strerror(errno);
  }
  ::freeaddrinfo(res);
  fail(ErrorCode::IoError, "cannot listen on " + host + ":" + std::to_string(port) + ": " + last);
}

inline std::uint16_t local_port(const Socket& s) {
  sockaddr_storage addr{};
  socklen_t len = sizeof addr;
  require(::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len) == 0, ErrorCode::IoError,
          detail::errno_text("getsockname"));
  if (addr.ss_family == AF_INET6) return ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port);
  return ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
}

/// Connects with a timeout; the returned socket is non-blocking.
inline Socket tcp_connect(const std::string& host, std::uint16_t port, int timeout_ms) {
  addrinfo* res = detail::resolve(host, port, false);
  std::string last = "no address";
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
    if (!s.valid()) continue;
    detail::set_nonblocking(s.fd());
    int rc = ::connect(s.fd(), ai->ai_addr, ai->ai_addrlen);
    if (rc != 0 && errno == EINPROGRESS) {
      pollfd p{s.fd(), POLLOUT, 0};
      rc = ::poll(&p, 1, timeout_ms);
      if (rc == 1) {
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
        errno = err;
      } else {
        if (rc == 0) errno = ETIMEDOUT;
        rc = -1;
      }
    }
    if (rc == 0) {
      ::freeaddrinfo(res);
      int one = 1;
      ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return s;
    }
    last = std::strerror(errno);
  }
  ::freeaddrinfo(res);
  fail(ErrorCode::IoError, "cannot connect to " + host + ":" + std::to_string(port) + ": " + last);
}

/// A framed, non-blocking connection: buffered writes and a streaming decoder.
class FramedConnection {
 public:
  explicit FramedConnection(Socket s) : sock_(std::move(s)) {}

  int fd() const noexcept { return sock_.fd(); }
  bool open() const noexcept { return sock_.valid(); }
  bool wants_write() const noexcept { return sent_ < out_.size(); }
  bool closing() const noexcept { return close_after_flush_; }

  void queue(const Frame& f) { put_bytes(out_, encode_frame(f)); }
  void close_after_flush() { close_after_flush_ = true; }

  /// Writes what the socket accepts. False once the peer is gone.
  bool flush() {
    while (sent_ < out_.size()) {
      const ssize_t n = ::send(sock_.fd(), out_.data() + sent_, out_.size() - sent_, MSG_NOSIGNAL);
      if (n > 0) {
        sent_ += static_cast<std::size_t>(n);
        continue;
      }
      if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) break;
      if (n < 0 && errno == EINTR) continue;
      return false;
    }
    if (sent_ == out_.size()) {
      out_.clear();
      sent_ = 0;
    }
    return true;
  }

  /// Reads what is available and appends complete frames to `frames`.
  /// False on EOF or error; a malformed stream throws.
  bool read(std::vector<Frame>& frames) {
    std::uint8_t buf[65536];
    while (true) {
      const ssize_t n = ::recv(sock_.fd(), buf, sizeof buf, 0);
      if (n > 0) {
        decoder_.feed(ByteView(buf, static_cast<std::size_t>(n)));
        while (auto f = decoder_.next()) frames.push_back(std::move(*f));
        continue;
      }
      if (n == 0) return false;
      if (errno == EAGAIN || errno == EWOULDBLOCK) return true;
      if (errno == EINTR) continue;
      return false;
    }
  }

  void close() { sock_.reset(); }

 private:
  Socket sock_;
  FrameDecoder decoder_;
  Bytes out_;
  std::size_t sent_ = 0;
  bool close_after_flush_ = false;
};

}  // namespace fedorch
