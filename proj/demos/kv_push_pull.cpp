// SPDX-License-Identifier: Apache-2.0
// Six workers in two groups of three push gradients to one server, which
// applies SGD and serves the updated weights back.

#include <cstdio>

#include "hybridps/kvstore/cluster.hpp"
#include "hybridps/transport/inproc.hpp"

using namespace std::chrono_literals;

int main() {
  hps::transport::Topology topo{6, 1, 2};
  auto mode = hps::kv::StoreMode::SyncMpi;
  auto reg = hps::transport::connect_all_inproc(topo);
  hps::kv::ClusterOptions opts;
  opts.mode = mode;
  std::mutex mu;
  hps::kv::run_cluster(reg, opts, [&](std::shared_ptr<hps::transport::Endpoint> ep) {
    hps::kv::KVStore kv(ep, hps::kv::KVStore::Options{mode, topo, 2, 10000ms, 1});
    hps::TensorGroup<double> w(0, 1, 4, 1.0);
    kv.init(0, w);
    kv.set_optimizer(hps::optim::OptimizerSpec::sgd(0.1, 1.0 / 6));
    for (int it = 0; it < 3; ++it) {
      hps::TensorGroup<double> g(0, 1, 4, 1.0);
      kv.push(0, g);
      kv.pull(0, w);
      kv.wait_all();
    }
    {
      std::lock_guard lock(mu);
      std::printf("worker %u (group %u%s): w[0] = %.3f at version %llu\n", kv.rank(), kv.group(),
                  kv.is_master() ? ", master" : "", w.lanes[0][0],
                  static_cast<unsigned long long>(kv.last_version(0)));
    }
    kv.shutdown();
  });
}
