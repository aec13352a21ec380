// SPDX-License-Identifier: Apache-2.0
#pragma once

// Randomized dependency-graph stress for the engine. Each op stamps a global
// logical clock on entry and exit; afterwards every conflicting pair (A, B)
// with seq(A) < seq(B) must satisfy exit(A) < entry(B).

#include <atomic>
#include <random>

#include "hybridps/engine.hpp"

namespace hps::testkit {

struct StressResult {
  std::size_t executed = 0;
  std::size_t violations = 0;
  bool admission_in_order = false;
};

inline StressResult stress_engine(std::size_t ops, std::size_t tag_count, std::size_t threads,
                                  std::uint32_t seed) {
  engine::Engine::Options opts;
  opts.threads = threads;
  opts.record_trace = true;
  engine::Engine eng(opts);
  std::vector<engine::Tag> tags;
  for (std::size_t i = 0; i < tag_count; ++i) tags.push_back(eng.new_tag());

  struct Op {
    std::vector<std::size_t> reads, mutates;
    std::uint64_t entry = 0, exit = 0;
  };
  std::vector<Op> log(ops);
  std::atomic<std::uint64_t> clock{0};
  std::mt19937 rng(seed);

  for (std::size_t i = 0; i < ops; ++i) {
    auto& op = log[i];
    std::vector<std::size_t> picked;
    std::size_t k = 1 + rng() % 3;
    while (picked.size() < k) {
      auto t = rng() % tag_count;
      if (std::find(picked.begin(), picked.end(), t) == picked.end()) picked.push_back(t);
    }
    for (auto t : picked) (rng() % 2 ? op.mutates : op.reads).push_back(t);
    std::vector<engine::Tag> r, m;
    for (auto t : op.reads) r.push_back(tags[t]);
    for (auto t : op.mutates) m.push_back(tags[t]);
    bool spin = rng() % 8 == 0;
    eng.push(
        [&op, &clock, spin] {
          op.entry = ++clock;
          if (spin) std::this_thread::yield();
          op.exit = ++clock;
        },
        r, m);
  }
  eng.wait_all();

  StressResult res;
  res.executed = eng.trace().size();
  auto admitted = eng.admission_log();
  res.admission_in_order = admitted.size() == ops;
  for (std::size_t i = 0; i < admitted.size(); ++i)
    if (admitted[i] != i + 1) res.admission_in_order = false;

  // Per tag, walk ops in seq order: a reader must follow the last writer, a
  // writer must follow the last writer and every reader since.
  for (std::size_t t = 0; t < tag_count; ++t) {
    std::uint64_t writer_exit = 0, readers_exit = 0;
    for (const auto& op : log) {
      bool reads = std::find(op.reads.begin(), op.reads.end(), t) != op.reads.end();
      bool writes = std::find(op.mutates.begin(), op.mutates.end(), t) != op.mutates.end();
      if (reads) {
        if (op.entry < writer_exit) ++res.violations;
        readers_exit = std::max(readers_exit, op.exit);
      } else if (writes) {
        if (op.entry < writer_exit || op.entry < readers_exit) ++res.violations;
        writer_exit = op.exit;
        readers_exit = 0;
      }
    }
  }
  return res;
}

}  // namespace hps::testkit
