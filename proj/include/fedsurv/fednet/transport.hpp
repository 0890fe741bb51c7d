#pragma once

// Line-oriented duplex channels: an in-process loopback pair and plain TCP.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>

#include "fedsurv/errors.hpp"

namespace fedsurv {

using Millis = std::chrono::milliseconds;

class Channel {
 public:
  virtual ~Channel() = default;
  /// Sends one line (no embedded newline). Throws SiteUnavailable when the peer is gone.
  virtual void send_line(const std::string& line) = 0;
  /// Next line, or nullopt on timeout. Throws SiteUnavailable when the peer closed.
  virtual std::optional<std::string> receive_line(Millis timeout) = 0;
  virtual void close() = 0;
};

namespace detail {

struct LoopbackQueue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::string> lines;
  bool closed = false;
};

}  // namespace detail

class LoopbackChannel : public Channel {
 public:
  LoopbackChannel(std::shared_ptr<detail::LoopbackQueue> in, std::shared_ptr<detail::LoopbackQueue> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  ~LoopbackChannel() override { close(); }

  void send_line(const std::string& line) override {
    std::lock_guard lock(out_->mu);
    if (out_->closed) fail(ErrorKind::SiteUnavailable, "loopback peer closed");
    out_->lines.push_back(line);
    out_->cv.notify_all();
  }

  std::optional<std::string> receive_line(Millis timeout) override {
    std::unique_lock lock(in_->mu);
    if (!in_->cv.wait_for(lock, timeout, [&] { return !in_->lines.empty() || in_->closed; })) return std::nullopt;
    if (in_->lines.empty()) fail(ErrorKind::SiteUnavailable, "loopback peer closed");
    std::string line = std::move(in_->lines.front());
    in_->lines.pop_front();
    return line;
  }

  void close() override {
    for (auto* q : {in_.get(), out_.get()}) {
      std::lock_guard lock(q->mu);
      q->closed = true;
      q->cv.notify_all();
    }
  }

 private:
  std::shared_ptr<detail::LoopbackQueue> in_, out_;
};

/// Two connected in-process endpoints.
inline std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> loopback_pair() {
  auto a = std::make_shared<detail::LoopbackQueue>();
  auto b = std::make_shared<detail::LoopbackQueue>();
  return {std::make_unique<LoopbackChannel>(a, b), std::make_unique<LoopbackChannel>(b, a)};
}

class TcpChannel : public Channel {
 public:
  explicit TcpChannel(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  TcpChannel(const TcpChannel&) = delete;
  TcpChannel& operator=(const TcpChannel&) = delete;
  ~TcpChannel() override { close(); }

  void send_line(const std::string& line) override {
    if (fd_ < 0) fail(ErrorKind::SiteUnavailable, "connection closed");
    std::string buf = line + '\n';
    std::size_t off = 0;
    while (off < buf.size()) {
      const ssize_t w = ::send(fd_, buf.data() + off, buf.size() - off, MSG_NOSIGNAL);
      if (w < 0 && errno == EINTR) continue;
      if (w <= 0) fail(ErrorKind::SiteUnavailable, std::string("send failed: ") + std::strerror(errno));
      off += static_cast<std::size_t>(w);
    }
  }

  std::optional<std::string> receive_line(Millis timeout) override {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      if (fd_ < 0) fail(ErrorKind::SiteUnavailable, "connection closed");
      const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now()).count();
      if (left <= 0) return std::nullopt;
      pollfd p{fd_, POLLIN, 0};
      const int rc = ::poll(&p, 1, static_cast<int>(std::min<long long>(left, 1 << 30)));
      if (rc < 0 && errno == EINTR) continue;
      if (rc < 0) fail(ErrorKind::SiteUnavailable, std::string("poll failed: ") + std::strerror(errno));
      if (rc == 0) return std::nullopt;
      char chunk[65536];
      const ssize_t r = ::recv(fd_, chunk, sizeof chunk, 0);
      if (r < 0 && errno == EINTR) continue;
      if (r <= 0) {
        close();
        fail(ErrorKind::SiteUnavailable, "peer closed the connection");
      }
      buffer_.append(chunk, static_cast<std::size_t>(r));
    }
  }

  void close() override {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
  std::string buffer_;
};

class TcpListener {
 public:
  /// Binds host:port (port 0 picks a free port).
  TcpListener(const std::string& host, int port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) fail(ErrorKind::SiteUnavailable, std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd_);
      fail(ErrorKind::InvalidInput, "bad listen address '" + host + "'");
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(fd_, 64) < 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      fail(ErrorKind::SiteUnavailable, "cannot listen on " + host + ":" + std::to_string(port) + ": " + why);
    }
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }

  int port() const {
    sockaddr_in addr{};
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    return ntohs(addr.sin_port);
  }

  /// Next connection, or nullptr on timeout.
  std::unique_ptr<Channel> accept(Millis timeout) {
    pollfd p{fd_, POLLIN, 0};
    int rc;
    do {
      rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    } while (rc < 0 && errno == EINTR);
    if (rc <= 0) return nullptr;
    const int c = ::accept(fd_, nullptr, nullptr);
    if (c < 0) return nullptr;
    return std::make_unique<TcpChannel>(c);
  }

 private:
  int fd_ = -1;
};

/// Connects to host:port, retrying until `timeout` elapses.
inline std::unique_ptr<Channel> tcp_connect(const std::string& host, int port, Millis timeout = Millis(10000)) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  while (true) {
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) == 0) {
      for (auto* ai = res; ai; ai = ai->ai_next) {
        const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
          ::freeaddrinfo(res);
          return std::make_unique<TcpChannel>(fd);
        }
        ::close(fd);
      }
      ::freeaddrinfo(res);
    }
    if (std::chrono::steady_clock::now() >= deadline)
      fail(ErrorKind::SiteUnavailable, "cannot connect to " + host + ":" + std::to_string(port));
    std::this_thread::sleep_for(Millis(100));
  }
}

}  // namespace fedsurv
