// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <optional>

#include "hybridps/transport/frame.hpp"
#include "hybridps/transport/topology.hpp"

namespace hps::transport {

// Per-link traffic, wire bytes including the 13-byte header.
struct LinkCounters {
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t msgs_sent = 0;
  std::uint64_t msgs_received = 0;

  LinkCounters& operator+=(const LinkCounters& o) {
    bytes_sent += o.bytes_sent;
    bytes_received += o.bytes_received;
    msgs_sent += o.msgs_sent;
    msgs_received += o.msgs_received;
    return *this;
  }
  bool operator==(const LinkCounters&) const = default;
};

// Observes every frame's full wire image on arrival at `to`.
using WireTap =
    std::function<void(NodeId from, NodeId to, std::span<const std::byte> wire)>;

using FramePredicate = std::function<bool(const Frame&)>;

// Receive queue of one node. Matching receives scan in arrival order, so
// frames from one source are always consumed in the order they were sent.
class Mailbox {
 public:
  bool push(Frame f) {
    {
      std::lock_guard lock(mu_);
      if (closed_) return false;
      queue_.push_back(std::move(f));
    }
    cv_.notify_all();
    return true;
  }

  Frame pop_match(const FramePredicate& pred, Millis timeout) {
    std::unique_lock lock(mu_);
    auto deadline = Clock::now() + timeout;
    auto take = [&]() -> std::optional<Frame> {
      for (auto it = queue_.begin(); it != queue_.end(); ++it)
        if (!pred || pred(*it)) {
          Frame f = std::move(*it);
          queue_.erase(it);
          return f;
        }
      return std::nullopt;
    };
    for (;;) {
      if (auto f = take()) return std::move(*f);
      if (closed_) throw ClosedError("endpoint closed");
      if (cv_.wait_until(lock, deadline) == std::cv_status::timeout) {
        if (auto f = take()) return std::move(*f);
        throw TimeoutError("recv timed out after " +
                           std::to_string(timeout.count()) + " ms");
      }
    }
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  bool closed() const {
    std::lock_guard lock(mu_);
    return closed_;
  }

  std::size_t pending() const {
    std::lock_guard lock(mu_);
    return queue_.size();
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Frame> queue_;
  bool closed_ = false;
};

// One node's view of the network: send to linked peers, receive from its own
// mailbox. send() is safe from several threads.
class Endpoint {
 public:
  explicit Endpoint(NodeId id, std::size_t max_frame = kDefaultMaxFrame)
      : id_(id), max_frame_(max_frame) {}
  virtual ~Endpoint() = default;

  Endpoint(const Endpoint&) = delete;
  Endpoint& operator=(const Endpoint&) = delete;

  NodeId id() const { return id_; }
  std::size_t max_frame() const { return max_frame_; }

  virtual void send(NodeId dst, std::uint8_t tag, Bytes payload) = 0;

  void send(NodeId dst, std::uint8_t tag, std::span<const std::byte> payload) {
    send(dst, tag, Bytes(payload.begin(), payload.end()));
  }

  Frame recv(Millis timeout) { return mailbox_.pop_match(nullptr, timeout); }

  Frame recv_match(const FramePredicate& pred, Millis timeout) {
    return mailbox_.pop_match(pred, timeout);
  }

  Frame recv_from(NodeId src, std::uint8_t tag, Millis timeout) {
    return mailbox_.pop_match(
        [&](const Frame& f) { return f.src == src && f.tag == tag; }, timeout);
  }

  virtual std::vector<NodeId> peers() const = 0;

  bool linked(NodeId peer) const {
    auto p = peers();
    return std::find(p.begin(), p.end(), peer) != p.end();
  }

  LinkCounters counters(NodeId peer) const {
    std::lock_guard lock(counter_mu_);
    auto it = counters_.find(peer);
    return it == counters_.end() ? LinkCounters{} : it->second;
  }

  std::map<NodeId, LinkCounters> all_counters() const {
    std::lock_guard lock(counter_mu_);
    return counters_;
  }

  // Sum over links whose peer has the given role.
  LinkCounters counters_for_role(Role role) const {
    std::lock_guard lock(counter_mu_);
    LinkCounters total;
    for (const auto& [peer, c] : counters_)
      if (peer.role == role) total += c;
    return total;
  }

  virtual void close() = 0;
  bool closed() const { return mailbox_.closed(); }

 protected:
  void check_payload(std::size_t n) const {
    if (n > max_frame_)
      throw TransportError("frame oversize: " + std::to_string(n) + " > " +
                           std::to_string(max_frame_));
  }

  void count_sent(NodeId dst, std::size_t wire_bytes) {
    std::lock_guard lock(counter_mu_);
    auto& c = counters_[dst];
    c.bytes_sent += wire_bytes;
    ++c.msgs_sent;
  }

  bool deliver(Frame f, std::size_t wire_bytes) {
    NodeId src = f.src;
    std::lock_guard lock(counter_mu_);
    if (!mailbox_.push(std::move(f))) return false;
    auto& c = counters_[src];
    c.bytes_received += wire_bytes;
    ++c.msgs_received;
    return true;
  }

  void close_mailbox() { mailbox_.close(); }

 private:
  NodeId id_;
  std::size_t max_frame_;
  Mailbox mailbox_;
  mutable std::mutex counter_mu_;
  std::map<NodeId, LinkCounters> counters_;
};

// The endpoints hosted by this process after connect_all.
struct Registry {
  Topology topology;
  std::map<NodeId, std::shared_ptr<Endpoint>> endpoints;
  // Closes every hosted endpoint so blocked receivers wake up.
  std::function<void()> abort;

  Endpoint& at(NodeId id) const {
    auto it = endpoints.find(id);
    if (it == endpoints.end()) throw TransportError("no endpoint for " + to_string(id));
    return *it->second;
  }

  std::shared_ptr<Endpoint> share(NodeId id) const {
    at(id);
    return endpoints.at(id);
  }

  void close_all() const {
    for (const auto& [id, ep] : endpoints) ep->close();
  }
};

}  // namespace hps::transport
