// SPDX-License-Identifier: Apache-2.0
// Four in-process ranks, two lanes each, summed with a two-ring allreduce.

#include <cstdio>

#include "hybridps/collectives/cost_model.hpp"
#include "hybridps/collectives/local_group.hpp"
#include "hybridps/collectives/ring.hpp"

int main() {
  const std::size_t p = 4, n = 1 << 16;
  std::vector<hps::CostLedger> ledgers(p);
  std::vector<double> first(p);
  hps::run_local_group(p, [&](hps::Communicator& comm) {
    auto r = static_cast<std::size_t>(comm.rank());
    hps::TensorGroup<double> g(0, 2, n, static_cast<double>(r + 1));
    ledgers[r] = hps::allreduce(comm, g, 2);
    first[r] = g.lanes[0][0];
  });
  // each lane of each rank held r+1, so the sum is 2 * (1+2+3+4) = 20
  for (std::size_t r = 0; r < p; ++r)
    std::printf("rank %zu: value %.1f, sent %llu elements in %llu steps\n", r, first[r],
                static_cast<unsigned long long>(ledgers[r].elements_sent_per_rank),
                static_cast<unsigned long long>(ledgers[r].comm_steps));

  hps::CostParams c{5e-6, 1e-9, 2e-10};
  double bytes = static_cast<double>(n * sizeof(double));
  std::printf("modeled: ring %.3g s, gather-to-root %.3g s\n", hps::predict_cost(p, bytes, c),
              hps::predict_naive_cost(p, bytes, c));
}
