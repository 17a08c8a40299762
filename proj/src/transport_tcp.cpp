#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <mutex>
#include <thread>

#include "hashmesh/common.hpp"
#include "hashmesh/transport.hpp"

namespace hashmesh::transport {

namespace {

constexpr char kMagic[4] = {'H', 'M', 'S', 'H'};
constexpr std::uint16_t kVersion = 1;

#pragma pack(push, 1)
struct Handshake {
  char magic[4];
  std::uint16_t version;
  std::uint32_t rank;
};
struct MsgHeader {
  std::uint64_t seq;
  std::uint32_t payload_len;
  std::uint8_t op;
  std::uint8_t kind;
  std::uint8_t phase;
  std::uint8_t pad;
};
#pragma pack(pop)

using Clock = std::chrono::steady_clock;

struct Deadline {
  Clock::time_point at;

  static Deadline in_ms(int ms) { return Deadline{Clock::now() + std::chrono::milliseconds(ms)}; }
  int remaining_ms() const {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(at - Clock::now());
    return static_cast<int>(std::max<std::int64_t>(0, left.count()));
  }
  bool expired() const { return Clock::now() >= at; }
};

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      close_fd();
      fd_ = o.fd_;
      o.fd_ = -1;
    }
    return *this;
  }
  ~Fd() { close_fd(); }
  int get() const { return fd_; }
  bool valid() const { return fd_ >= 0; }

 private:
  void close_fd() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  int fd_ = -1;
};

void poll_or_timeout(int fd, short events, const Deadline& dl, std::uint32_t peer,
                     const char* what) {
  pollfd pf{fd, events, 0};
  const int rc = ::poll(&pf, 1, std::max(1, dl.remaining_ms()));
  if (rc == 0 || dl.expired()) {
    throw TransportError(std::string("timeout ") + what + " rank " + std::to_string(peer));
  }
  if (rc < 0) {
    throw TransportError(std::string("poll failed while ") + what + " rank " +
                         std::to_string(peer) + ": " + std::strerror(errno));
  }
}

void write_all(int fd, const void* data, std::size_t len, const Deadline& dl, std::uint32_t peer) {
  const auto* p = static_cast<const std::byte*>(data);
  while (len > 0) {
    poll_or_timeout(fd, POLLOUT, dl, peer, "writing to");
    const ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EAGAIN || errno == EINTR) continue;
      throw TransportError("send to rank " + std::to_string(peer) +
                           " failed: " + std::strerror(errno));
    }
    p += n;
    len -= static_cast<std::size_t>(n);
  }
}

void read_all(int fd, void* data, std::size_t len, const Deadline& dl, std::uint32_t peer) {
  auto* p = static_cast<std::byte*>(data);
  while (len > 0) {
    poll_or_timeout(fd, POLLIN, dl, peer, "waiting for rank");
    const ssize_t n = ::recv(fd, p, len, 0);
    if (n == 0) {
      throw TransportError("rank " + std::to_string(peer) + " disconnected");
    }
    if (n < 0) {
      if (errno == EAGAIN || errno == EINTR) continue;
      throw TransportError("recv from rank " + std::to_string(peer) +
                           " failed: " + std::strerror(errno));
    }
    p += n;
    len -= static_cast<std::size_t>(n);
  }
}

std::pair<std::string, std::uint16_t> split_host_port(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) {
    throw ConfigError("peer address '" + addr + "' is not host:port");
  }
  const std::string host = addr.substr(0, colon);
  const int port = std::stoi(addr.substr(colon + 1));
  if (port <= 0 || port > 65535) throw ConfigError("peer address '" + addr + "' has a bad port");
  return {host, static_cast<std::uint16_t>(port)};
}

sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw TransportError("cannot resolve host '" + host + "'");
  }
  sockaddr_in addr = *reinterpret_cast<sockaddr_in*>(res->ai_addr);
  addr.sin_port = htons(port);
  ::freeaddrinfo(res);
  return addr;
}

class TcpMeshEndpoint final : public CollectiveEndpoint {
 public:
  explicit TcpMeshEndpoint(const TcpTopology& topo)
      : rank_(topo.node_id),
        n_(static_cast<std::uint32_t>(topo.peers.size())),
        timeout_ms_(topo.timeout_ms) {
    if (n_ == 0 || rank_ >= n_) {
      throw ConfigError("tcp topology: node_id out of range");
    }
    peers_.resize(n_);
    if (n_ == 1) return;
    const Deadline dl = Deadline::in_ms(timeout_ms_);

    // Everyone listens on its own configured port; lower ranks dial higher
    // ranks, so this node accepts from [0, rank) and dials (rank, n).
    Fd listener;
    if (rank_ > 0) listener = make_listener(topo.peers[rank_]);
    std::thread dialer([&] { dial_higher(topo, dl); });
    try {
      accept_lower(listener, dl);
    } catch (...) {
      dialer.join();
      throw;
    }
    dialer.join();
    if (dial_error_) std::rethrow_exception(dial_error_);
  }

  std::uint32_t node_id() const override { return rank_; }
  std::uint32_t world_size() const override { return n_; }

  std::vector<std::vector<std::byte>> all_gather_var(std::span<const std::byte> local,
                                                     PayloadKind kind, Phase phase) override {
    const std::uint64_t seq = seq_++;
    std::vector<std::vector<std::byte>> out(n_);
    out[rank_].assign(local.begin(), local.end());
    exchange_rounds(seq, 'G', kind, phase, local, out.data());
    std::uint64_t received = 0;
    for (std::uint32_t r = 0; r < n_; ++r) {
      if (r != rank_) received += out[r].size();
    }
    bump(phase, local.size(), received);
    return out;
  }

  void all_reduce_sum(std::span<float> inout, PayloadKind kind, Phase phase) override {
    const std::uint64_t seq = seq_++;
    const std::uint64_t bytes = inout.size() * sizeof(float);
    const auto* raw = reinterpret_cast<const std::byte*>(inout.data());
    const Deadline dl = Deadline::in_ms(timeout_ms_);
    // Gather-to-0 then broadcast; summation in rank order on rank 0 keeps
    // the result identical to the loopback reduction.
    if (rank_ == 0) {
      std::vector<std::byte> buf;
      for (std::uint32_t r = 1; r < n_; ++r) {
        const MsgHeader h = recv_header(r, seq, 'R', dl);
        if (h.payload_len != bytes) {
          throw ProtocolError("all_reduce_sum: rank " + std::to_string(r) +
                              " supplied length " + std::to_string(h.payload_len / sizeof(float)) +
                              ", expected " + std::to_string(inout.size()));
        }
        buf.resize(h.payload_len);
        read_all(peers_[r].get(), buf.data(), buf.size(), dl, r);
        const auto* v = reinterpret_cast<const float*>(buf.data());
        for (std::size_t i = 0; i < inout.size(); ++i) inout[i] += v[i];
      }
      for (std::uint32_t r = 1; r < n_; ++r) {
        send_msg(r, seq, 'R', kind, phase, {reinterpret_cast<const std::byte*>(inout.data()),
                                            bytes},
                 dl);
      }
    } else if (n_ > 1) {
      send_msg(0, seq, 'R', kind, phase, {raw, bytes}, dl);
      const MsgHeader h = recv_header(0, seq, 'R', dl);
      if (h.payload_len != bytes) {
        throw ProtocolError("all_reduce_sum: reduced length from rank 0 mismatches");
      }
      read_all(peers_[0].get(), inout.data(), bytes, dl, 0);
    }
    bump(phase, bytes, bytes);
  }

  void barrier() override {
    const std::uint64_t seq = seq_++;
    std::vector<std::vector<std::byte>> sink(n_);
    exchange_rounds(seq, 'B', PayloadKind::kNone, Phase::kControl, {}, sink.data());
    bump(Phase::kControl, 0, 0);
  }

  CommStats stats() const override {
    std::lock_guard lock(stats_mu_);
    return stats_;
  }

 private:
  Fd make_listener(const std::string& self_addr) {
    const auto [host, port] = split_host_port(self_addr);
    Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!fd.valid()) throw TransportError("socket() failed");
    const int one = 1;
    ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = INADDR_ANY;
    addr.sin_port = htons(port);
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      throw TransportError("bind to port " + std::to_string(port) +
                           " failed: " + std::strerror(errno));
    }
    if (::listen(fd.get(), static_cast<int>(n_)) != 0) {
      throw TransportError("listen failed");
    }
    return fd;
  }

  void dial_higher(const TcpTopology& topo, const Deadline& dl) {
    try {
      for (std::uint32_t r = rank_ + 1; r < n_; ++r) {
        const auto [host, port] = split_host_port(topo.peers[r]);
        const sockaddr_in addr = resolve(host, port);
        Fd fd;
        for (;;) {
          fd = Fd(::socket(AF_INET, SOCK_STREAM, 0));
          if (!fd.valid()) throw TransportError("socket() failed");
          if (::connect(fd.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) {
            break;
          }
          if (dl.expired()) {
            throw TransportError("timeout connecting to rank " + std::to_string(r) + " at " +
                                 topo.peers[r]);
          }
          std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
        const int one = 1;
        ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        Handshake hello{{}, kVersion, rank_};
        std::memcpy(hello.magic, kMagic, 4);
        write_all(fd.get(), &hello, sizeof(hello), dl, r);
        Handshake reply{};
        read_all(fd.get(), &reply, sizeof(reply), dl, r);
        check_handshake(reply, r);
        if (reply.rank != r) {
          throw ProtocolError("peer at " + topo.peers[r] + " identifies as rank " +
                              std::to_string(reply.rank) + ", expected " + std::to_string(r));
        }
        std::lock_guard lock(peers_mu_);
        peers_[r] = std::move(fd);
      }
    } catch (...) {
      dial_error_ = std::current_exception();
    }
  }

  void accept_lower(Fd& listener, const Deadline& dl) {
    for (std::uint32_t pending = rank_; pending > 0; --pending) {
      poll_or_timeout(listener.get(), POLLIN, dl, rank_ - pending, "accepting connection from");
      Fd fd(::accept(listener.get(), nullptr, nullptr));
      if (!fd.valid()) throw TransportError("accept failed");
      const int one = 1;
      ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      Handshake hello{};
      read_all(fd.get(), &hello, sizeof(hello), dl, /*peer=*/0);
      check_handshake(hello, hello.rank);
      if (hello.rank >= rank_) {
        throw ProtocolError("unexpected handshake from rank " + std::to_string(hello.rank));
      }
      Handshake reply{{}, kVersion, rank_};
      std::memcpy(reply.magic, kMagic, 4);
      write_all(fd.get(), &reply, sizeof(reply), dl, hello.rank);
      std::lock_guard lock(peers_mu_);
      if (peers_[hello.rank].valid()) {
        throw ProtocolError("duplicate connection from rank " + std::to_string(hello.rank));
      }
      peers_[hello.rank] = std::move(fd);
    }
  }

  static void check_handshake(const Handshake& h, std::uint32_t peer) {
    if (std::memcmp(h.magic, kMagic, 4) != 0) {
      throw ProtocolError("bad protocol magic from rank " + std::to_string(peer));
    }
    if (h.version != kVersion) {
      throw ProtocolError("protocol version mismatch with rank " + std::to_string(peer) + " (" +
                          std::to_string(h.version) + " vs " + std::to_string(kVersion) + ")");
    }
  }

  void send_msg(std::uint32_t to, std::uint64_t seq, char op, PayloadKind kind, Phase phase,
                std::span<const std::byte> payload, const Deadline& dl) {
    MsgHeader h{};
    h.seq = seq;
    h.payload_len = static_cast<std::uint32_t>(payload.size());
    h.op = static_cast<std::uint8_t>(op);
    h.kind = static_cast<std::uint8_t>(kind);
    h.phase = static_cast<std::uint8_t>(phase);
    write_all(peers_[to].get(), &h, sizeof(h), dl, to);
    if (!payload.empty()) write_all(peers_[to].get(), payload.data(), payload.size(), dl, to);
  }

  MsgHeader recv_header(std::uint32_t from, std::uint64_t seq, char op, const Deadline& dl) {
    MsgHeader h{};
    read_all(peers_[from].get(), &h, sizeof(h), dl, from);
    if (h.seq != seq || h.op != static_cast<std::uint8_t>(op)) {
      throw ProtocolError("collective mismatch: rank " + std::to_string(from) + " sent op '" +
                          static_cast<char>(h.op) + "' seq " + std::to_string(h.seq) +
                          ", expected op '" + op + "' seq " + std::to_string(seq));
    }
    return h;
  }

  // One round per shift: send to (rank+s), receive from (rank-s); a sender
  // thread keeps the pair full-duplex so large payloads cannot deadlock.
  void exchange_rounds(std::uint64_t seq, char op, PayloadKind kind, Phase phase,
                       std::span<const std::byte> local, std::vector<std::byte>* out) {
    const Deadline dl = Deadline::in_ms(timeout_ms_);
    for (std::uint32_t s = 1; s < n_; ++s) {
      const std::uint32_t to = (rank_ + s) % n_;
      const std::uint32_t from = (rank_ + n_ - s) % n_;
      std::exception_ptr send_err;
      std::thread sender([&] {
        try {
          send_msg(to, seq, op, kind, phase, local, dl);
        } catch (...) {
          send_err = std::current_exception();
        }
      });
      try {
        const MsgHeader h = recv_header(from, seq, op, dl);
        out[from].resize(h.payload_len);
        if (h.payload_len > 0) {
          read_all(peers_[from].get(), out[from].data(), h.payload_len, dl, from);
        }
      } catch (...) {
        sender.join();
        throw;
      }
      sender.join();
      if (send_err) std::rethrow_exception(send_err);
    }
  }

  void bump(Phase phase, std::uint64_t sent, std::uint64_t received) {
    std::lock_guard lock(stats_mu_);
    stats_.bytes_sent += sent;
    stats_.bytes_received += received;
    stats_.collective_calls += 1;
    auto& ph = stats_.phase[static_cast<std::size_t>(phase)];
    ph.bytes_sent += sent;
    ph.bytes_received += received;
    ph.calls += 1;
  }

  std::uint32_t rank_;
  std::uint32_t n_;
  int timeout_ms_;
  std::vector<Fd> peers_;  // peers_[rank_] unused
  std::mutex peers_mu_;
  std::exception_ptr dial_error_;
  std::uint64_t seq_ = 0;
  mutable std::mutex stats_mu_;
  CommStats stats_;
};

}  // namespace

std::unique_ptr<CollectiveEndpoint> connect_tcp_mesh(const TcpTopology& topology) {
  return std::make_unique<TcpMeshEndpoint>(topology);
}

}  // namespace hashmesh::transport
