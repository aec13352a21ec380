// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <memory>

#include "hybridps/transport/endpoint.hpp"

namespace hps {

// An ordered group of worker endpoints. Rank i is members[i]; the logical
// ring runs 0 -> 1 -> ... -> p-1 -> 0.
class Communicator {
 public:
  Communicator(std::shared_ptr<transport::Endpoint> ep,
               std::vector<transport::NodeId> members, Millis timeout = Millis(60000))
      : ep_(std::move(ep)), members_(std::move(members)), timeout_(timeout) {
    if (!ep_) throw ConfigError("communicator without endpoint");
    auto it = std::find(members_.begin(), members_.end(), ep_->id());
    if (it == members_.end())
      throw ConfigError("endpoint " + transport::to_string(ep_->id()) +
                        " is not a member of its communicator");
    rank_ = static_cast<int>(it - members_.begin());
  }

  int rank() const { return rank_; }
  int size() const { return static_cast<int>(members_.size()); }
  int left() const { return (rank_ + size() - 1) % size(); }
  int right() const { return (rank_ + 1) % size(); }
  transport::NodeId member(int r) const { return members_.at(static_cast<std::size_t>(r)); }
  const std::vector<transport::NodeId>& members() const { return members_; }
  transport::Endpoint& endpoint() const { return *ep_; }
  Millis timeout() const { return timeout_; }

  void send(int to, std::uint8_t tag, Bytes payload) const {
    ep_->send(member(to), tag, std::move(payload));
  }

  // Next frame from `from` with `tag` whose first payload byte is `channel`.
  transport::Frame recv(int from, std::uint8_t tag, std::uint8_t channel) const {
    auto src = member(from);
    return ep_->recv_match(
        [&](const transport::Frame& f) {
          return f.src == src && f.tag == tag && !f.payload.empty() &&
                 std::to_integer<std::uint8_t>(f.payload[0]) == channel;
        },
        timeout_);
  }

  // Marks the communicator busy for one collective call.
  class BusyGuard {
   public:
    explicit BusyGuard(const Communicator& c) : c_(&c) {}
    BusyGuard(BusyGuard&& o) noexcept : c_(std::exchange(o.c_, nullptr)) {}
    BusyGuard(const BusyGuard&) = delete;
    ~BusyGuard() {
      if (c_) c_->busy_.store(false);
    }

   private:
    const Communicator* c_;
  };

  [[nodiscard]] BusyGuard acquire(std::string_view op) const {
    bool expected = false;
    if (!busy_.compare_exchange_strong(expected, true))
      throw RejectedError(std::string(op) +
                          ": another collective is already running on this communicator");
    return BusyGuard(*this);
  }

 private:
  std::shared_ptr<transport::Endpoint> ep_;
  std::vector<transport::NodeId> members_;
  int rank_ = 0;
  Millis timeout_;
  mutable std::atomic<bool> busy_{false};
};

}  // namespace hps
