// SPDX-License-Identifier: Apache-2.0
#pragma once

// Whole-run training over a set of hosted endpoints: each worker trains,
// reports its per-epoch metrics to the scheduler and shuts down; the
// scheduler's collected reports are merged into one record per epoch.

#include "hybridps/kvstore/cluster.hpp"
#include "hybridps/trainer/drivers.hpp"

namespace hps::train {

struct TrainResult {
  std::vector<MetricsRecord> metrics;  // merged over workers
  std::map<std::uint32_t, std::vector<MetricsRecord>> by_rank;
  std::vector<kv::ServerStats> server_stats;
};

struct RunSetup {
  kv::StoreMode mode = kv::StoreMode::Sync;
  transport::Topology topology;
  std::size_t rings = 2;
  Millis timeout{60000};
  Model model;
  TrainOptions train;
};

// Worker body: train, then send the metrics to the scheduler.
inline void train_worker(std::shared_ptr<transport::Endpoint> ep, const Dataset& data,
                         const RunSetup& setup) {
  kv::KVStore::Options o;
  o.mode = setup.mode;
  o.topology = setup.topology;
  o.rings = setup.rings;
  o.timeout = setup.timeout;
  kv::KVStore store(ep, o);
  auto records = WorkerTrainer(store, data, setup.model, setup.train, setup.topology).run();
  store.shutdown();
  ep->send(transport::NodeId::scheduler(), transport::tags::kWorkerMetrics,
           encode_metrics(records));
}

inline TrainResult collect(const kv::SchedulerReport& report) {
  TrainResult out;
  for (const auto& [rank, frames] : report.worker_reports)
    for (const auto& f : frames) out.by_rank[rank] = decode_metrics(f);
  out.metrics = merge_metrics(out.by_rank);
  out.server_stats = report.server_stats;
  return out;
}

inline TrainResult train_cluster(const transport::Registry& reg, const Dataset& data,
                                 const RunSetup& setup) {
  kv::ClusterOptions co;
  co.mode = setup.mode;
  co.timeout = setup.timeout;
  auto report = kv::run_cluster(reg, co, [&](std::shared_ptr<transport::Endpoint> ep) {
    train_worker(std::move(ep), data, setup);
  });
  return collect(report);
}

}  // namespace hps::train
