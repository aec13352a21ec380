// SPDX-License-Identifier: Apache-2.0
#pragma once

// In-process backend: every node is an endpoint in this address space and a
// send is a move into the destination mailbox. Used by tests and by the
// launcher's in-process mode.

#include <set>

#include "hybridps/transport/endpoint.hpp"

namespace hps::transport {

class InProcNetwork;

class InProcEndpoint final : public Endpoint {
 public:
  InProcEndpoint(NodeId id, std::shared_ptr<InProcNetwork> net, std::size_t max_frame)
      : Endpoint(id, max_frame), net_(std::move(net)) {}

  void send(NodeId dst, std::uint8_t tag, Bytes payload) override;
  using Endpoint::send;

  std::vector<NodeId> peers() const override;

  void close() override { close_mailbox(); }

 private:
  friend class InProcNetwork;
  std::shared_ptr<InProcNetwork> net_;
};

class InProcNetwork : public std::enable_shared_from_this<InProcNetwork> {
 public:
  struct Options {
    std::size_t max_frame = kDefaultMaxFrame;
    WireTap tap;
  };

  static std::shared_ptr<InProcNetwork> create() { return create(Options()); }

  static std::shared_ptr<InProcNetwork> create(Options opts) {
    return std::shared_ptr<InProcNetwork>(new InProcNetwork(std::move(opts)));
  }

  std::shared_ptr<InProcEndpoint> add_node(NodeId id) {
    std::lock_guard lock(mu_);
    if (nodes_.contains(id))
      throw TransportError("duplicate node " + to_string(id));
    auto ep = std::make_shared<InProcEndpoint>(id, shared_from_this(), opts_.max_frame);
    nodes_[id] = ep;
    return ep;
  }

  void link(NodeId a, NodeId b) {
    std::lock_guard lock(mu_);
    links_.insert({std::min(a, b), std::max(a, b)});
  }

  bool linked(NodeId a, NodeId b) const {
    std::lock_guard lock(mu_);
    return links_.contains({std::min(a, b), std::max(a, b)});
  }

  std::vector<NodeId> peers_of(NodeId id) const {
    std::lock_guard lock(mu_);
    std::vector<NodeId> out;
    for (auto [a, b] : links_) {
      if (a == id) out.push_back(b);
      if (b == id) out.push_back(a);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  // Closes every live endpoint.
  void abort() {
    std::vector<std::shared_ptr<InProcEndpoint>> live;
    {
      std::lock_guard lock(mu_);
      for (auto& [id, w] : nodes_)
        if (auto ep = w.lock()) live.push_back(std::move(ep));
    }
    for (auto& ep : live) ep->close();
  }

 private:
  friend class InProcEndpoint;

  explicit InProcNetwork(Options opts) : opts_(std::move(opts)) {}

  void route(NodeId src, NodeId dst, std::uint8_t tag, Bytes payload) {
    std::shared_ptr<InProcEndpoint> target;
    {
      std::lock_guard lock(mu_);
      if (!links_.contains({std::min(src, dst), std::max(src, dst)}))
        throw TransportError("unknown destination " + to_string(dst) + " from " +
                             to_string(src));
      auto it = nodes_.find(dst);
      if (it != nodes_.end()) target = it->second.lock();
    }
    if (!target || target->closed())
      throw ClosedError("connection to " + to_string(dst) + " closed");
    std::size_t wire = kHeaderSize + payload.size();
    if (opts_.tap) opts_.tap(src, dst, encode_frame(src, tag, payload));
    Frame f{src, dst, tag, std::move(payload)};
    if (!target->deliver(std::move(f), wire))
      throw ClosedError("connection to " + to_string(dst) + " closed");
  }

  Options opts_;
  mutable std::mutex mu_;
  std::map<NodeId, std::weak_ptr<InProcEndpoint>> nodes_;
  std::set<std::pair<NodeId, NodeId>> links_;
};

inline void InProcEndpoint::send(NodeId dst, std::uint8_t tag, Bytes payload) {
  check_payload(payload.size());
  std::size_t wire = kHeaderSize + payload.size();
  net_->route(id(), dst, tag, std::move(payload));
  count_sent(dst, wire);
}

inline std::vector<NodeId> InProcEndpoint::peers() const { return net_->peers_of(id()); }

// Builds every node of the topology on one in-process network.
inline Registry connect_all_inproc(const Topology& topo,
                                   InProcNetwork::Options opts = {}) {
  topo.validate();
  auto net = InProcNetwork::create(std::move(opts));
  Registry reg;
  reg.topology = topo;
  auto nodes = topo.nodes();
  for (auto id : nodes) reg.endpoints[id] = net->add_node(id);
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (std::size_t j = i + 1; j < nodes.size(); ++j)
      if (topo.linked(nodes[i], nodes[j])) net->link(nodes[i], nodes[j]);
  reg.abort = [net] { net->abort(); };
  return reg;
}

}  // namespace hps::transport
