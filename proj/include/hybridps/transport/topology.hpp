// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <vector>

#include "hybridps/transport/frame.hpp"

namespace hps::transport {

// Who exists in a run and who talks to whom. The scheduler links to every
// node, each worker links to every server, and workers of the same client
// group are linked pairwise. Servers never link to each other.
struct Topology {
  std::uint32_t workers = 1;
  std::uint32_t servers = 0;
  std::uint32_t clients = 1;

  void validate() const {
    if (workers == 0) throw ConfigError("need at least one worker");
    if (clients == 0) throw ConfigError("need at least one client");
    if (workers % clients != 0)
      throw ConfigError("clients (" + std::to_string(clients) +
                        ") must divide workers (" + std::to_string(workers) + ")");
  }

  std::uint32_t workers_per_client() const { return workers / clients; }
  std::uint32_t group_of(std::uint32_t worker_rank) const {
    return worker_rank / workers_per_client();
  }
  std::uint32_t group_rank_of(std::uint32_t worker_rank) const {
    return worker_rank % workers_per_client();
  }

  std::vector<NodeId> group_members(std::uint32_t group) const {
    std::vector<NodeId> out;
    auto wpc = workers_per_client();
    for (std::uint32_t i = 0; i < wpc; ++i) out.push_back(NodeId::worker(group * wpc + i));
    return out;
  }

  std::vector<NodeId> nodes() const {
    std::vector<NodeId> out{NodeId::scheduler()};
    for (std::uint32_t s = 0; s < servers; ++s) out.push_back(NodeId::server(s));
    for (std::uint32_t w = 0; w < workers; ++w) out.push_back(NodeId::worker(w));
    return out;
  }

  bool linked(NodeId a, NodeId b) const {
    if (a == b) return false;
    if (a.role == Role::scheduler || b.role == Role::scheduler) return true;
    if (a.role == Role::server && b.role == Role::server) return false;
    if (a.role == Role::worker && b.role == Role::worker)
      return group_of(a.rank) == group_of(b.rank);
    return true;  // worker <-> server
  }

  std::vector<NodeId> links_of(NodeId id) const {
    std::vector<NodeId> out;
    for (auto n : nodes())
      if (linked(id, n)) out.push_back(n);
    return out;
  }

  bool contains(NodeId id) const {
    switch (id.role) {
      case Role::scheduler: return id.rank == 0;
      case Role::server: return id.rank < servers;
      case Role::worker: return id.rank < workers;
    }
    return false;
  }
};

}  // namespace hps::transport
