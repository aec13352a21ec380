// SPDX-License-Identifier: Apache-2.0
#pragma once

// Length-framed TCP backend.
//
// Rendezvous: the scheduler listens first. Every other node opens its own
// listener, connects to the scheduler and sends Register(port, host). Once
// all expected nodes registered, the scheduler answers with the address book.
// Each node then dials the linked peers that sort after it and accepts the
// ones that sort before it (first frame on a dialed socket is Hello), reports
// Ready, and waits for Go. The scheduler connection stays as the scheduler
// link. Counters start at zero after Go.

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/uio.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <thread>

#include "hybridps/transport/endpoint.hpp"

namespace hps::transport::tcp {

struct Address {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  static Address parse(std::string_view text) {
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos)
      throw ConfigError("address must be host:port, got '" + std::string(text) + "'");
    Address a;
    a.host = std::string(text.substr(0, colon));
    auto port = std::string(text.substr(colon + 1));
    try {
      std::size_t used = 0;
      unsigned long v = std::stoul(port, &used);
      if (used != port.size() || v > 65535) throw std::out_of_range("port");
      a.port = static_cast<std::uint16_t>(v);
    } catch (const std::logic_error&) {
      throw ConfigError("bad port in address '" + std::string(text) + "'");
    }
    if (a.host.empty()) a.host = "127.0.0.1";
    return a;
  }

  std::string str() const { return host + ":" + std::to_string(port); }
  bool operator==(const Address&) const = default;
};

// Owning file descriptor.
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

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(std::exchange(fd_, -1));
  }
  void shutdown_both() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

 private:
  int fd_ = -1;
};

namespace detail {

inline std::string errno_text(const char* what) {
  return std::string(what) + ": " + std::strerror(errno);
}

inline sockaddr_in resolve(const Address& addr) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(addr.port);
  if (::inet_pton(AF_INET, addr.host.c_str(), &sa.sin_addr) == 1) return sa;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(addr.host.c_str(), nullptr, &hints, &res) != 0 || !res)
    throw TransportError("cannot resolve host '" + addr.host + "'");
  sa.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return sa;
}

inline void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

inline Millis remaining(Clock::time_point deadline) {
  auto left = std::chrono::duration_cast<Millis>(deadline - Clock::now());
  return left.count() > 0 ? left : Millis(0);
}

// Waits for `events` on fd; false on deadline.
inline bool wait_fd(int fd, short events, Clock::time_point deadline) {
  for (;;) {
    pollfd p{fd, events, 0};
    int ms = static_cast<int>(remaining(deadline).count());
    int rc = ::poll(&p, 1, ms);
    if (rc > 0) return true;
    if (rc == 0) return false;
    if (errno != EINTR) throw TransportError(errno_text("poll"));
  }
}

inline void write_all(int fd, std::span<const std::byte> a, std::span<const std::byte> b = {}) {
  iovec iov[2] = {{const_cast<std::byte*>(a.data()), a.size()},
                  {const_cast<std::byte*>(b.data()), b.size()}};
  int cnt = b.empty() ? 1 : 2;
  iovec* cur = iov;
  while (cnt > 0) {
    msghdr msg{};
    msg.msg_iov = cur;
    msg.msg_iovlen = static_cast<std::size_t>(cnt);
    ssize_t n = ::sendmsg(fd, &msg, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ClosedError(errno_text("send"));
    }
    auto left = static_cast<std::size_t>(n);
    while (cnt > 0 && left >= cur->iov_len) {
      left -= cur->iov_len;
      ++cur;
      --cnt;
    }
    if (cnt > 0) {
      cur->iov_base = static_cast<char*>(cur->iov_base) + left;
      cur->iov_len -= left;
    }
  }
}

// Reads exactly buf.size() bytes. Returns false on orderly EOF at offset 0.
inline bool read_exact(int fd, std::span<std::byte> buf,
                       std::optional<Clock::time_point> deadline = std::nullopt) {
  std::size_t got = 0;
  while (got < buf.size()) {
    if (deadline && !wait_fd(fd, POLLIN, *deadline))
      throw TimeoutError("timed out reading from socket");
    ssize_t n = ::recv(fd, buf.data() + got, buf.size() - got, 0);
    if (n == 0) {
      if (got == 0) return false;
      throw ClosedError("connection closed mid-frame");
    }
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ClosedError(errno_text("recv"));
    }
    got += static_cast<std::size_t>(n);
  }
  return true;
}

// Reads one complete frame (header + payload) as its wire image.
inline std::optional<Bytes> read_wire_frame(int fd, std::size_t max_frame,
                                            std::optional<Clock::time_point> deadline = std::nullopt) {
  HeaderBytes h;
  if (!read_exact(fd, h, deadline)) return std::nullopt;
  auto hdr = decode_header(h);
  if (hdr.length > max_frame) throw TransportError("incoming frame oversize");
  Bytes wire(kHeaderSize + hdr.length);
  std::memcpy(wire.data(), h.data(), kHeaderSize);
  if (hdr.length > 0 &&
      !read_exact(fd, std::span(wire).subspan(kHeaderSize), deadline))
    throw ClosedError("connection closed mid-frame");
  return wire;
}

inline Frame read_frame_or_throw(int fd, NodeId self, std::size_t max_frame,
                                 Clock::time_point deadline) {
  auto wire = read_wire_frame(fd, max_frame, deadline);
  if (!wire) throw ClosedError("peer closed during rendezvous");
  return decode_frame(*wire, self);
}

inline void write_frame(int fd, NodeId src, std::uint8_t tag,
                        std::span<const std::byte> payload) {
  auto h = encode_header(src, tag, static_cast<std::uint32_t>(payload.size()));
  write_all(fd, h, payload);
}

inline Socket dial(const Address& addr, Clock::time_point deadline) {
  auto sa = resolve(addr);
  auto backoff = Millis(5);
  for (;;) {
    Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!s.valid()) throw TransportError(errno_text("socket"));
    if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) == 0) {
      set_nodelay(s.fd());
      return s;
    }
    if (errno != ECONNREFUSED && errno != EINTR && errno != ETIMEDOUT &&
        errno != ENOENT && errno != EAGAIN)
      throw TransportError(errno_text(("connect " + addr.str()).c_str()));
    if (Clock::now() + backoff >= deadline)
      throw TimeoutError("could not reach " + addr.str());
    std::this_thread::sleep_for(backoff);
    backoff = std::min(backoff * 2, Millis(200));
  }
}

}  // namespace detail

class Listener {
 public:
  explicit Listener(const Address& addr) {
    sock_ = Socket(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!sock_.valid()) throw TransportError(detail::errno_text("socket"));
    int one = 1;
    ::setsockopt(sock_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    auto sa = detail::resolve(addr);
    if (::bind(sock_.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0)
      throw TransportError(detail::errno_text(("bind " + addr.str()).c_str()));
    if (::listen(sock_.fd(), 512) != 0) throw TransportError(detail::errno_text("listen"));
    socklen_t len = sizeof sa;
    ::getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&sa), &len);
    addr_ = {addr.host, ntohs(sa.sin_port)};
  }

  const Address& address() const { return addr_; }

  Socket accept(Clock::time_point deadline) {
    if (!detail::wait_fd(sock_.fd(), POLLIN, deadline))
      throw TimeoutError("rendezvous: timed out waiting for peers on " + addr_.str());
    Socket s(::accept4(sock_.fd(), nullptr, nullptr, SOCK_CLOEXEC));
    if (!s.valid()) throw TransportError(detail::errno_text("accept"));
    detail::set_nodelay(s.fd());
    return s;
  }

 private:
  Socket sock_;
  Address addr_;
};

class TcpEndpoint final : public Endpoint {
 public:
  TcpEndpoint(NodeId id, std::size_t max_frame, WireTap tap)
      : Endpoint(id, max_frame), tap_(std::move(tap)) {}

  ~TcpEndpoint() override { close(); }

  using Endpoint::send;

  void send(NodeId dst, std::uint8_t tag, Bytes payload) override {
    check_payload(payload.size());
    Conn* conn = find(dst);
    if (!conn) throw TransportError("unknown destination " + to_string(dst));
    if (!conn->open.load()) throw ClosedError("connection to " + to_string(dst) + " closed");
    {
      std::lock_guard lock(conn->write_mu);
      try {
        detail::write_frame(conn->sock.fd(), id(), tag, payload);
      } catch (const ClosedError&) {
        conn->open = false;
        throw ClosedError("connection to " + to_string(dst) + " closed");
      }
    }
    count_sent(dst, kHeaderSize + payload.size());
  }

  std::vector<NodeId> peers() const override {
    std::lock_guard lock(mu_);
    std::vector<NodeId> out;
    for (const auto& [id, c] : conns_) out.push_back(id);
    return out;
  }

  void close() override {
    std::map<NodeId, std::unique_ptr<Conn>> conns;
    {
      std::lock_guard lock(mu_);
      if (closed_) return;
      closed_ = true;
      conns.swap(conns_);
    }
    close_mailbox();
    for (auto& [id, c] : conns) {
      c->open = false;
      c->sock.shutdown_both();
    }
    for (auto& [id, c] : conns)
      if (c->reader.joinable()) c->reader.join();
  }

  // Takes ownership of an established connection and starts its reader.
  void adopt(NodeId peer, Socket sock) {
    auto conn = std::make_unique<Conn>();
    conn->sock = std::move(sock);
    Conn* raw = conn.get();
    {
      std::lock_guard lock(mu_);
      if (conns_.contains(peer)) throw TransportError("duplicate link to " + to_string(peer));
      conns_[peer] = std::move(conn);
    }
    raw->reader = std::thread([this, raw, peer] { read_loop(*raw, peer); });
  }

 private:
  struct Conn {
    Socket sock;
    std::mutex write_mu;
    std::thread reader;
    std::atomic<bool> open{true};
  };

  Conn* find(NodeId peer) const {
    std::lock_guard lock(mu_);
    auto it = conns_.find(peer);
    return it == conns_.end() ? nullptr : it->second.get();
  }

  void read_loop(Conn& conn, NodeId peer) {
    try {
      for (;;) {
        auto wire = detail::read_wire_frame(conn.sock.fd(), max_frame());
        if (!wire) break;
        auto hdr = decode_header(*wire);
        if (hdr.src != peer) throw TransportError("frame source does not match link");
        if (tap_) tap_(peer, id(), *wire);
        std::size_t n = wire->size();
        Frame f = decode_frame(*wire, id());
        if (!deliver(std::move(f), n)) break;
      }
    } catch (const std::exception& e) {
      if (conn.open.load()) log(LogLevel::debug, to_string(id()) + " link to " +
                                                     to_string(peer) + ": " + e.what());
    }
    conn.open = false;
  }

  WireTap tap_;
  mutable std::mutex mu_;
  std::map<NodeId, std::unique_ptr<Conn>> conns_;
  bool closed_ = false;
};

struct Options {
  Millis timeout{30000};
  std::size_t max_frame = kDefaultMaxFrame;
  // host peers advertise for their own listeners
  std::string advertise_host = "127.0.0.1";
  WireTap tap;
};

namespace detail {

inline Bytes encode_book(const std::map<NodeId, Address>& book) {
  ByteWriter w;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(book.size()));
  for (const auto& [id, addr] : book) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(id.role));
    w.put<std::uint32_t>(id.rank);
    w.put<std::uint16_t>(addr.port);
    w.put_string(addr.host);
  }
  return w.take();
}

inline std::map<NodeId, Address> decode_book(std::span<const std::byte> payload) {
  ByteReader r(payload);
  std::map<NodeId, Address> book;
  auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    NodeId id;
    id.role = static_cast<Role>(r.get<std::uint8_t>());
    id.rank = r.get<std::uint32_t>();
    Address a;
    a.port = r.get<std::uint16_t>();
    a.host = r.get_string();
    book[id] = a;
  }
  return book;
}

inline Bytes encode_text(std::string_view s) {
  ByteWriter w;
  w.put_string(s);
  return w.take();
}

}  // namespace detail

// Scheduler half of the rendezvous. Blocks until every node in `topo` has
// registered and reported Ready.
inline std::shared_ptr<TcpEndpoint> serve_rendezvous(Listener& listener,
                                                     const Topology& topo,
                                                     const Options& opts = {}) {
  topo.validate();
  const NodeId self = NodeId::scheduler();
  auto deadline = Clock::now() + opts.timeout;
  std::size_t expected = topo.nodes().size() - 1;
  std::map<NodeId, Socket> socks;
  std::map<NodeId, Address> book;

  auto reject_all = [&](const std::string& why) {
    auto msg = detail::encode_text(why);
    for (auto& [id, s] : socks) {
      try {
        detail::write_frame(s.fd(), self, tags::kReject, msg);
      } catch (const std::exception&) {
      }
    }
  };

  while (socks.size() < expected) {
    Socket s = listener.accept(deadline);
    Frame reg = detail::read_frame_or_throw(s.fd(), self, opts.max_frame, deadline);
    if (reg.tag != tags::kRegister) throw TransportError("rendezvous: expected Register");
    std::string why;
    if (!topo.contains(reg.src) || reg.src.role == Role::scheduler)
      why = "node " + to_string(reg.src) + " is not part of this run";
    else if (socks.contains(reg.src))
      why = "duplicate node " + to_string(reg.src);
    if (!why.empty()) {
      try {
        detail::write_frame(s.fd(), self, tags::kReject, detail::encode_text(why));
      } catch (const std::exception&) {
      }
      reject_all(why);
      throw TransportError("rendezvous: " + why);
    }
    ByteReader r(reg.payload);
    Address a;
    a.port = r.get<std::uint16_t>();
    a.host = r.get_string();
    book[reg.src] = a;
    socks.emplace(reg.src, std::move(s));
  }

  auto book_bytes = detail::encode_book(book);
  for (auto& [id, s] : socks) detail::write_frame(s.fd(), self, tags::kAddressBook, book_bytes);
  for (auto& [id, s] : socks) {
    Frame f = detail::read_frame_or_throw(s.fd(), self, opts.max_frame, deadline);
    if (f.tag != tags::kReady) {
      reject_all("rendezvous failed at " + to_string(id));
      throw TransportError("rendezvous: " + to_string(id) + " did not report Ready");
    }
  }
  for (auto& [id, s] : socks) detail::write_frame(s.fd(), self, tags::kGo, {});

  auto ep = std::make_shared<TcpEndpoint>(self, opts.max_frame, opts.tap);
  for (auto& [id, s] : socks) ep->adopt(id, std::move(s));
  return ep;
}

// Peer half of the rendezvous.
inline std::shared_ptr<TcpEndpoint> join(const Topology& topo, NodeId self,
                                         const Address& scheduler,
                                         const Options& opts = {}) {
  topo.validate();
  if (!topo.contains(self) || self.role == Role::scheduler)
    throw ConfigError("node " + to_string(self) + " is not part of this run");
  auto deadline = Clock::now() + opts.timeout;
  Listener listener(Address{opts.advertise_host, 0});

  Socket sched = detail::dial(scheduler, deadline);
  ByteWriter reg;
  reg.put<std::uint16_t>(listener.address().port);
  reg.put_string(listener.address().host);
  auto reg_bytes = reg.take();
  detail::write_frame(sched.fd(), self, tags::kRegister, reg_bytes);

  auto expect_from_scheduler = [&](std::uint8_t tag) {
    Frame f = detail::read_frame_or_throw(sched.fd(), self, opts.max_frame, deadline);
    if (f.tag == tags::kReject) {
      ByteReader r(f.payload);
      throw TransportError("rendezvous rejected: " + r.get_string());
    }
    if (f.tag != tag) throw TransportError("rendezvous: unexpected frame from scheduler");
    return f;
  };

  auto book = detail::decode_book(expect_from_scheduler(tags::kAddressBook).payload);
  auto ep = std::make_shared<TcpEndpoint>(self, opts.max_frame, opts.tap);

  std::size_t lower = 0;
  for (NodeId peer : topo.links_of(self)) {
    if (peer.role == Role::scheduler) continue;
    if (peer < self) {
      ++lower;
      continue;
    }
    auto it = book.find(peer);
    if (it == book.end()) throw TransportError("address book lacks " + to_string(peer));
    Socket s = detail::dial(it->second, deadline);
    detail::write_frame(s.fd(), self, tags::kHello, {});
    ep->adopt(peer, std::move(s));
  }
  for (std::size_t i = 0; i < lower; ++i) {
    Socket s = listener.accept(deadline);
    auto wire = detail::read_wire_frame(s.fd(), opts.max_frame, deadline);
    if (!wire) throw ClosedError("peer hung up before Hello");
    auto hdr = decode_header(*wire);
    if (hdr.tag != tags::kHello || !topo.linked(self, hdr.src))
      throw TransportError("rendezvous: unexpected connection from " + to_string(hdr.src));
    ep->adopt(hdr.src, std::move(s));
  }

  detail::write_frame(sched.fd(), self, tags::kReady, {});
  expect_from_scheduler(tags::kGo);
  ep->adopt(NodeId::scheduler(), std::move(sched));
  return ep;
}

// Brings up every node of `topo` over loopback TCP inside this process, one
// thread per node during rendezvous.
inline Registry connect_all_local(const Topology& topo, const Options& opts = {}) {
  topo.validate();
  Listener listener(Address{opts.advertise_host, 0});
  Registry reg;
  reg.topology = topo;
  auto nodes = topo.nodes();
  std::vector<std::shared_ptr<TcpEndpoint>> eps(nodes.size());
  std::vector<std::exception_ptr> errors(nodes.size());
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    threads.emplace_back([&, i] {
      try {
        if (nodes[i].role == Role::scheduler)
          eps[i] = serve_rendezvous(listener, topo, opts);
        else
          eps[i] = join(topo, nodes[i], listener.address(), opts);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) {
      for (auto& ep : eps)
        if (ep) ep->close();
      std::rethrow_exception(e);
    }
  for (std::size_t i = 0; i < nodes.size(); ++i) reg.endpoints[nodes[i]] = eps[i];
  std::vector<std::shared_ptr<TcpEndpoint>> keep = eps;
  reg.abort = [keep] {
    for (auto& ep : keep) ep->close();
  };
  return reg;
}

}  // namespace hps::transport::tcp
