// SPDX-License-Identifier: Apache-2.0
#pragma once

// Runs every node hosted in a registry on its own thread: the scheduler
// service, the servers, and one user function per worker. The first failure
// closes all hosted endpoints so nobody stays blocked, and is rethrown.

#include <thread>

#include "hybridps/kvstore/client.hpp"

namespace hps::kv {

struct ClusterOptions {
  StoreMode mode = StoreMode::Sync;
  Millis timeout{60000};
  std::size_t server_threads = 2;
  // called on each server after it has served its last request
  std::function<void(const Server&)> on_server_done;
};

// Runs one node's role. Worker functions receive their endpoint; after they
// return, the worker reports Shutdown to the scheduler.
template <typename WorkerFn>
void run_node(const transport::Registry& reg, transport::NodeId id, const ClusterOptions& opts,
              WorkerFn& worker_fn, SchedulerReport* report_out) {
  using transport::Role;
  auto ep = reg.share(id);
  switch (id.role) {
    case Role::scheduler: {
      SchedulerService svc(ep, reg.topology, opts.timeout);
      auto report = svc.run();
      if (report_out) *report_out = std::move(report);
      break;
    }
    case Role::server: {
      Server server(ep, Server::Options{opts.mode, reg.topology, opts.timeout, opts.server_threads});
      auto stats = server.run();
      ep->send(transport::NodeId::scheduler(), transport::tags::kServerStats, stats.encode());
      if (opts.on_server_done) opts.on_server_done(server);
      break;
    }
    case Role::worker:
      worker_fn(ep);
      ep->send(transport::NodeId::scheduler(), transport::tags::kShutdown, Bytes{});
      break;
  }
}

template <typename WorkerFn>
SchedulerReport run_cluster(const transport::Registry& reg, const ClusterOptions& opts,
                            WorkerFn worker_fn) {
  SchedulerReport report;
  std::mutex mu;
  std::exception_ptr first;
  std::vector<std::thread> threads;
  for (const auto& [id, ep] : reg.endpoints) {
    threads.emplace_back([&, id = id] {
      try {
        run_node(reg, id, opts, worker_fn, &report);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first) {
          first = std::current_exception();
          if (reg.abort) reg.abort();
          else reg.close_all();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first) std::rethrow_exception(first);
  return report;
}

}  // namespace hps::kv
