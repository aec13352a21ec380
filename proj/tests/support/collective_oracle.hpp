// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reference sums for collective tests. The oracle adds rank by rank, lane by
// lane, in one straight loop, independent of any partitioning.
//
// Relative error is measured against the sum of absolute summands rather
// than the absolute value of the sum: random signed inputs can cancel to
// nearly zero, where a plain relative error would only measure cancellation.

#include <cmath>
#include <random>

#include "hybridps/collectives/local_group.hpp"
#include "hybridps/collectives/ring.hpp"

namespace hps::testkit {

template <typename T = double>
std::vector<TensorGroup<T>> random_inputs(std::size_t p, std::size_t lanes, std::size_t n,
                                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<TensorGroup<T>> out;
  for (std::size_t r = 0; r < p; ++r) {
    TensorGroup<T> g(7, lanes, n);
    for (auto& lane : g.lanes)
      for (auto& x : lane) x = static_cast<T>(dist(rng));
    out.push_back(std::move(g));
  }
  return out;
}

struct OracleSum {
  std::vector<double> sum;
  std::vector<double> magnitude;  // sum of |summand|
};

template <typename T>
OracleSum oracle_sum(const std::vector<TensorGroup<T>>& inputs) {
  OracleSum o;
  std::size_t n = inputs.front().size();
  o.sum.assign(n, 0.0);
  o.magnitude.assign(n, 0.0);
  for (const auto& g : inputs)
    for (const auto& lane : g.lanes)
      for (std::size_t i = 0; i < n; ++i) {
        o.sum[i] += static_cast<double>(lane[i]);
        o.magnitude[i] += std::abs(static_cast<double>(lane[i]));
      }
  return o;
}

template <typename T>
double max_rel_error(std::span<const T> got, const OracleSum& o) {
  if (got.size() != o.sum.size()) return INFINITY;
  double worst = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    double scale = std::max(o.magnitude[i], 1e-300);
    worst = std::max(worst, std::abs(static_cast<double>(got[i]) - o.sum[i]) / scale);
  }
  return worst;
}

// Worst relative error over every lane of every rank.
template <typename T>
double max_rel_error(const std::vector<TensorGroup<T>>& results, const OracleSum& o) {
  double worst = 0;
  for (const auto& g : results)
    for (const auto& lane : g.lanes)
      worst = std::max(worst, max_rel_error(std::span<const T>(lane), o));
  return worst;
}

template <typename T>
bool bit_identical(const std::vector<TensorGroup<T>>& a, const std::vector<TensorGroup<T>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t r = 0; r < a.size(); ++r)
    if (a[r].lanes != b[r].lanes) return false;
  return true;
}

template <typename T>
struct AllreduceRun {
  std::vector<TensorGroup<T>> results;
  std::vector<CostLedger> ledgers;
};

// Allreduce of `inputs` (one group per rank) on an in-process group.
template <typename T>
AllreduceRun<T> run_allreduce(const std::vector<TensorGroup<T>>& inputs, std::size_t rings) {
  AllreduceRun<T> run;
  run.results = inputs;
  run.ledgers.resize(inputs.size());
  run_local_group(inputs.size(), [&](Communicator& comm) {
    auto r = static_cast<std::size_t>(comm.rank());
    run.ledgers[r] = allreduce(comm, run.results[r], rings);
  });
  return run;
}

}  // namespace hps::testkit
