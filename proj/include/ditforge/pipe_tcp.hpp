#pragma once

// TCP transport for the named-pipe data plane. A producer runs a server;
// remote consumers connect, declare {pipe, job_id} on the wire, and then
// receive length-delimited frames. Routing (broadcast/spray, backpressure,
// metrics) stays in the in-process PipeRegistry.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ditforge/error.hpp"
#include "ditforge/frame.hpp"
#include "ditforge/model_spec.hpp"
#include "ditforge/pipe.hpp"

namespace ditforge {

struct PeerConsumer {
  std::string addr;
  std::string job_id;
};

struct PipePeerEntry {
  std::string name;
  std::vector<std::string> producers;
  std::vector<PeerConsumer> consumers;
  PipeMode mode = PipeMode::kSpray;
};

struct PeersConfig {
  std::vector<PipePeerEntry> pipes;

  const PipePeerEntry& find(const std::string& name) const {
    for (const auto& p : pipes)
      if (p.name == name) return p;
    throw ValidationError("pipe '" + name + "' not in peers file");
  }
};

inline PeersConfig peers_config_from_json(const json& j) {
  detail::require_fields(j, {"pipes"}, {}, "peers file");
  PeersConfig cfg;
  for (const auto& p : j.at("pipes")) {
    detail::require_fields(p, {"name", "producers", "consumers", "mode"}, {}, "peers pipe entry");
    PipePeerEntry e;
    e.name = p.at("name").get<std::string>();
    for (const auto& a : p.at("producers")) e.producers.push_back(a.get<std::string>());
    for (const auto& c : p.at("consumers")) {
      detail::require_fields(c, {"addr", "job_id"}, {}, "peers consumer entry");
      e.consumers.push_back({c.at("addr").get<std::string>(), c.at("job_id").get<std::string>()});
    }
    e.mode = pipe_mode_from_string(p.at("mode").get<std::string>());
    cfg.pipes.push_back(std::move(e));
  }
  return cfg;
}

namespace net {

struct AddrParts {
  std::string host;
  std::uint16_t port;
};

inline AddrParts split_addr(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw ValidationError("address '" + addr + "' lacks :port");
  return {addr.substr(0, colon), static_cast<std::uint16_t>(std::stoi(addr.substr(colon + 1)))};
}

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close_fd();
      fd_ = o.fd_;
      o.fd_ = -1;
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close_fd(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close_fd() {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

  void send_all(const std::uint8_t* data, std::size_t len) const {
    std::size_t off = 0;
    while (off < len) {
      const ssize_t n = ::send(fd_, data + off, len - off, MSG_NOSIGNAL);
      if (n <= 0) throw DomainError("tcp send failed: " + std::string(std::strerror(errno)));
      off += static_cast<std::size_t>(n);
    }
  }

  // returns 0 on orderly shutdown
  std::size_t recv_some(std::uint8_t* data, std::size_t len) const {
    const ssize_t n = ::recv(fd_, data, len, 0);
    if (n < 0) throw DomainError("tcp recv failed: " + std::string(std::strerror(errno)));
    return static_cast<std::size_t>(n);
  }

 private:
  int fd_ = -1;
};

inline Socket listen_on(std::uint16_t port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw DomainError("socket() failed");
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_addr.s_addr = htonl(INADDR_ANY);
  sa.sin_port = htons(port);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
    ::close(fd);
    throw DomainError("bind to port " + std::to_string(port) + " failed: " + std::strerror(errno));
  }
  if (::listen(fd, 16) != 0) {
    ::close(fd);
    throw DomainError("listen failed");
  }
  return Socket(fd);
}

inline std::uint16_t bound_port(const Socket& s) {
  sockaddr_in sa{};
  socklen_t len = sizeof(sa);
  ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&sa), &len);
  return ntohs(sa.sin_port);
}

inline Socket connect_to(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
    throw DomainError("resolve '" + host + "' failed");
  int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd < 0) {
    ::freeaddrinfo(res);
    throw DomainError("socket() failed");
  }
  if (::connect(fd, res->ai_addr, res->ai_addrlen) != 0) {
    ::freeaddrinfo(res);
    ::close(fd);
    throw DomainError("connect to " + host + ":" + std::to_string(port) + " failed: " +
                      std::strerror(errno));
  }
  ::freeaddrinfo(res);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return Socket(fd);
}

inline std::string read_line(const Socket& s) {
  std::string line;
  std::uint8_t c;
  while (true) {
    const std::size_t n = s.recv_some(&c, 1);
    if (n == 0) throw DomainError("peer closed during handshake");
    if (c == '\n') return line;
    line.push_back(static_cast<char>(c));
    if (line.size() > 4096) throw DomainError("handshake line too long");
  }
}

}  // namespace net

// Producer-side TCP endpoint: accepts consumer connections, registers them
// in the local registry, and streams their deliveries over the socket.
class TcpProducerServer {
 public:
  TcpProducerServer(const std::string& pipe_name, PipeMode mode, std::uint16_t port,
                    PipeOptions opt = {})
      : registry_(opt), pipe_name_(pipe_name), listener_(net::listen_on(port)) {
    producer_ = registry_.declare_producer(pipe_name, mode);
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  ~TcpProducerServer() { stop(); }

  std::uint16_t port() const { return net::bound_port(listener_); }

  void send(Frame f) { producer_->send(std::move(f)); }

  PipeMetrics metrics() const { return registry_.metrics(pipe_name_); }

  // consumers that have completed their handshake
  std::size_t consumers_registered() const { return consumers_registered_.load(); }

  void close_pipe() { producer_->close(); }

  void stop() {
    if (stopped_.exchange(true)) return;
    producer_->close();
    listener_.close_fd();
    if (accept_thread_.joinable()) accept_thread_.join();
    for (auto& t : writer_threads_)
      if (t.joinable()) t.join();
  }

 private:
  void accept_loop() {
    while (true) {
      const int fd = ::accept(listener_.fd(), nullptr, nullptr);
      if (fd < 0) return;  // listener closed
      auto sock = std::make_shared<net::Socket>(fd);
      try {
        const json decl = json::parse(net::read_line(*sock));
        const std::string pipe = decl.at("pipe").get<std::string>();
        const std::string job = decl.at("job_id").get<std::string>();
        if (pipe != pipe_name_) {
          continue;  // unknown pipe: drop connection
        }
        auto consumer = registry_.declare_consumer(pipe, job);
        consumers_registered_.fetch_add(1);
        writer_threads_.emplace_back([sock, consumer] {
          try {
            while (auto f = consumer->recv()) {
              const auto bytes = encode_frame(*f);
              sock->send_all(bytes.data(), bytes.size());
            }
          } catch (const DomainError&) {
            consumer->leave();  // peer went away; free its queue
          }
        });
      } catch (const std::exception&) {
        // malformed handshake: drop connection
      }
    }
  }

  PipeRegistry registry_;
  std::string pipe_name_;
  std::shared_ptr<ProducerHandle> producer_;
  net::Socket listener_;
  std::thread accept_thread_;
  std::vector<std::thread> writer_threads_;
  std::atomic<bool> stopped_{false};
  std::atomic<std::size_t> consumers_registered_{0};
};

// Consumer-side TCP endpoint: connects, declares itself, and decodes the
// incoming frame stream (resynchronizing on magic after corruption).
class TcpConsumerClient {
 public:
  TcpConsumerClient(const std::string& host, std::uint16_t port, const std::string& pipe,
                    const std::string& job_id)
      : sock_(net::connect_to(host, port)) {
    const json decl = {{"pipe", pipe}, {"job_id", job_id}};
    const std::string line = decl.dump() + "\n";
    sock_.send_all(reinterpret_cast<const std::uint8_t*>(line.data()), line.size());
  }

  // nullopt = end of stream
  std::optional<Frame> recv() {
    while (true) {
      if (auto f = reader_.next()) return f;
      std::uint8_t buf[65536];
      const std::size_t n = sock_.recv_some(buf, sizeof(buf));
      if (n == 0) return reader_.next();  // drain whatever is left
      reader_.feed(buf, n);
    }
  }

  std::size_t corrupt_events() const { return reader_.corrupt_events(); }

 private:
  net::Socket sock_;
  FrameStreamReader reader_;
};

}  // namespace ditforge
