// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <thread>

#include "hybridps/collectives/communicator.hpp"
#include "hybridps/transport/inproc.hpp"

namespace hps {

// Runs fn(Communicator&) on p in-process ranks forming one group, one thread
// per rank. If a rank throws, the network is torn down so the others unblock,
// and the first failure is rethrown.
template <typename Fn>
void run_local_group(std::size_t p, Fn&& fn, Millis timeout = Millis(60000),
                     transport::InProcNetwork::Options net_opts = {}) {
  transport::Topology topo{static_cast<std::uint32_t>(p), 0, 1};
  auto reg = transport::connect_all_inproc(topo, std::move(net_opts));
  auto members = topo.group_members(0);
  std::mutex first_mu;
  std::exception_ptr first;
  std::vector<std::thread> ranks;
  ranks.reserve(p);
  for (std::size_t r = 0; r < p; ++r) {
    ranks.emplace_back([&, r] {
      try {
        Communicator comm(reg.share(members[r]), members, timeout);
        fn(comm);
      } catch (...) {
        std::lock_guard lock(first_mu);
        if (!first) {
          first = std::current_exception();
          reg.abort();
        }
      }
    });
  }
  for (auto& t : ranks) t.join();
  if (first) std::rethrow_exception(first);
}

}  // namespace hps
