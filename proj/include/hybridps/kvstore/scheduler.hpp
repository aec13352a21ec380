// SPDX-License-Identifier: Apache-2.0
#pragma once

// The scheduler's role after rendezvous: global barriers, collecting each
// worker's report and each server's stats, and noticing when the run is over.
// A worker is done once it sends Shutdown; a server once it sends its stats.

#include <map>
#include <set>

#include "hybridps/kvstore/server.hpp"

namespace hps::kv {

struct SchedulerReport {
  // payload of every WorkerMetrics frame, by worker rank, in arrival order
  std::map<std::uint32_t, std::vector<Bytes>> worker_reports;
  std::vector<ServerStats> server_stats;
};

class SchedulerService {
 public:
  SchedulerService(std::shared_ptr<transport::Endpoint> ep, transport::Topology topo,
                   Millis idle_timeout = Millis(120000))
      : ep_(std::move(ep)), topo_(topo), idle_timeout_(idle_timeout) {
    topo_.validate();
  }

  SchedulerReport run() {
    using namespace transport;
    SchedulerReport report;
    std::set<std::uint32_t> workers_done, servers_done;
    std::map<std::uint32_t, std::set<std::uint32_t>> barriers;
    while (workers_done.size() < topo_.workers || servers_done.size() < topo_.servers) {
      Frame f = ep_->recv(idle_timeout_);
      switch (f.tag) {
        case tags::kBarrier: {
          ByteReader r(f.payload);
          auto id = r.get<std::uint32_t>();
          auto& arrived = barriers[id];
          arrived.insert(f.src.rank);
          if (arrived.size() == topo_.workers) {
            barriers.erase(id);
            for (std::uint32_t w = 0; w < topo_.workers; ++w)
              ep_->send(NodeId::worker(w), tags::kBarrier, f.payload);
          }
          break;
        }
        case tags::kWorkerMetrics:
          report.worker_reports[f.src.rank].push_back(std::move(f.payload));
          break;
        case tags::kServerStats:
          report.server_stats.push_back(ServerStats::decode(f.payload));
          servers_done.insert(f.src.rank);
          break;
        case tags::kShutdown:
          workers_done.insert(f.src.rank);
          break;
        case tags::kAbort: {
          ByteReader r(f.payload);
          throw Error("run aborted by " + to_string(f.src) + ": " + r.get_string());
        }
        default:
          throw TransportError("scheduler: unexpected message kind " + std::to_string(f.tag) +
                               " from " + to_string(f.src));
      }
    }
    return report;
  }

 private:
  std::shared_ptr<transport::Endpoint> ep_;
  transport::Topology topo_;
  Millis idle_timeout_;
};

// Worker side of a global barrier.
inline void barrier(transport::Endpoint& ep, std::uint32_t id, Millis timeout) {
  ByteWriter w;
  w.put<std::uint32_t>(id);
  ep.send(transport::NodeId::scheduler(), transport::tags::kBarrier, w.take());
  ep.recv_match(
      [id](const transport::Frame& f) {
        if (f.src.role != transport::Role::scheduler || f.tag != transport::tags::kBarrier)
          return false;
        ByteReader r(f.payload);
        return r.get<std::uint32_t>() == id;
      },
      timeout);
}

}  // namespace hps::kv
