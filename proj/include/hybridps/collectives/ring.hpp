// SPDX-License-Identifier: Apache-2.0
#pragma once

// Bucket (ring) collectives over tensor groups.
//
// Reduce-scatter: at stage s rank r sends chunk (r-s-1) mod p to its right
// neighbour and folds the chunk (r-s-2) mod p arriving from the left into its
// own lane sum. After p-1 stages rank r owns the fully reduced partition r.
// Allgather then circulates the reduced partitions for another p-1 stages.
//
// With several rings, every partition is cut into one sub-slice per ring and
// ring k moves only the k-th sub-slices. Each stage issues all rings' sends
// first; the lane sum for ring k+1 is started while ring k waits on the
// network. Element ownership and summation order are the same for any ring
// count, so results match the single-ring path bit for bit.

#include <future>
#include <optional>

#include "hybridps/collectives/communicator.hpp"
#include "hybridps/collectives/lane.hpp"

namespace hps {

struct RingPlan {
  std::size_t n = 0;
  std::size_t p = 1;
  std::vector<Range> partitions;  // partitions[i] is owned by ring position i
  std::vector<int> order;         // order[i] = rank at ring position i

  static RingPlan make(std::size_t n, std::size_t p) {
    if (p == 0) throw ConfigError("ring plan needs p >= 1");
    RingPlan plan;
    plan.n = n;
    plan.p = p;
    plan.partitions = split_even(n, p);
    plan.order.resize(p);
    for (std::size_t i = 0; i < p; ++i) plan.order[i] = static_cast<int>(i);
    return plan;
  }

  int position_of(int rank) const {
    auto it = std::find(order.begin(), order.end(), rank);
    if (it == order.end()) throw ConfigError("rank " + std::to_string(rank) + " not in ring");
    return static_cast<int>(it - order.begin());
  }

  const Range& partition_of(int rank) const {
    return partitions[static_cast<std::size_t>(position_of(rank))];
  }

  void validate() const {
    if (partitions.size() != p || order.size() != p) throw ConfigError("ring plan shape");
    std::size_t pos = 0;
    for (const auto& r : partitions) {
      if (r.begin != pos || r.end < r.begin) throw ConfigError("ring plan partitions not contiguous");
      pos = r.end;
    }
    if (pos != n) throw ConfigError("ring plan does not cover the buffer");
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < p; ++i)
      if (sorted[i] != static_cast<int>(i)) throw ConfigError("ring order is not a permutation");
  }
};

// Step and volume accounting for one collective call on one rank.
struct CostLedger {
  std::uint64_t comm_steps = 0;
  std::uint64_t elements_sent_per_rank = 0;
  std::uint64_t elements_received_per_rank = 0;
  std::uint64_t lane_reduce_elements = 0;
  std::uint64_t messages_sent = 0;
  std::uint32_t rings_used = 1;
  bool rings_clamped = false;

  CostLedger& operator+=(const CostLedger& o) {
    comm_steps += o.comm_steps;
    elements_sent_per_rank += o.elements_sent_per_rank;
    elements_received_per_rank += o.elements_received_per_rank;
    lane_reduce_elements += o.lane_reduce_elements;
    messages_sent += o.messages_sent;
    rings_used = std::max(rings_used, o.rings_used);
    rings_clamped = rings_clamped || o.rings_clamped;
    return *this;
  }
};

namespace detail {

inline int wrap(int v, int p) { return ((v % p) + p) % p; }

// Chunk payload: channel (1 byte), stage (4), element count (4), elements.
inline constexpr std::size_t kChunkHeader = 9;

template <typename T>
Bytes encode_chunk(std::uint8_t channel, std::uint32_t stage, std::span<const T> values) {
  ByteWriter w(kChunkHeader + values.size_bytes());
  w.put<std::uint8_t>(channel);
  w.put<std::uint32_t>(stage);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(values.size()));
  w.put_span(values);
  return w.take();
}

struct ChunkHeader {
  std::uint8_t channel;
  std::uint32_t stage;
  std::uint32_t count;
};

template <typename T>
ChunkHeader decode_chunk_into(const transport::Frame& f, std::span<T> out) {
  ByteReader r(f.payload);
  ChunkHeader h{r.get<std::uint8_t>(), r.get<std::uint32_t>(), r.get<std::uint32_t>()};
  if (h.count > out.size() || r.remaining() != std::size_t{h.count} * sizeof(T))
    throw ShapeError("chunk from " + transport::to_string(f.src) + " carries " +
                     std::to_string(h.count) + " elements, expected at most " +
                     std::to_string(out.size()) + " (plan or shape mismatch between ranks)");
  r.get_into(out.first(h.count));
  return h;
}

// Largest element count that fits one frame.
template <typename T>
std::size_t piece_elements(const Communicator& comm) {
  return std::max<std::size_t>(1, (comm.endpoint().max_frame() - kChunkHeader) / sizeof(T));
}

// Sends `values` as one or more frames sharing (channel, stage). Returns the
// number of frames.
template <typename T>
std::size_t send_elements(const Communicator& comm, int to, std::uint8_t tag,
                          std::uint8_t channel, std::uint32_t stage,
                          std::span<const T> values) {
  std::size_t piece = piece_elements<T>(comm), frames = 0, pos = 0;
  do {
    auto len = std::min(piece, values.size() - pos);
    comm.send(to, tag, encode_chunk<T>(channel, stage, values.subspan(pos, len)));
    pos += len;
    ++frames;
  } while (pos < values.size());
  return frames;
}

template <typename T>
void recv_elements(const Communicator& comm, int from, std::uint8_t tag,
                   std::uint8_t channel, std::uint32_t stage, std::span<T> out) {
  std::size_t pos = 0;
  do {
    auto frame = comm.recv(from, tag, channel);
    auto h = decode_chunk_into<T>(frame, out.subspan(pos));
    if (h.stage != stage)
      throw ShapeError("ring stage mismatch: got " + std::to_string(h.stage) + ", expected " +
                       std::to_string(stage) + " (plan mismatch between ranks)");
    pos += h.count;
    if (h.count == 0 && pos < out.size())
      throw ShapeError("empty chunk before buffer was complete");
  } while (pos < out.size());
}

// sub-slices[c][k]: the part of partition c moved by ring k.
inline std::vector<std::vector<Range>> ring_slices(const RingPlan& plan, std::size_t rings) {
  std::vector<std::vector<Range>> out(plan.p);
  for (std::size_t c = 0; c < plan.p; ++c) {
    auto parts = split_even(plan.partitions[c].size(), rings);
    for (auto& r : parts) {
      r.begin += plan.partitions[c].begin;
      r.end += plan.partitions[c].begin;
    }
    out[c] = std::move(parts);
  }
  return out;
}

inline std::size_t effective_rings(std::size_t requested, std::size_t n, CostLedger& ledger) {
  if (requested == 0) throw ConfigError("allreduce needs at least one ring");
  std::size_t rings = requested;
  if (n > 0 && rings > n) {
    warn("allreduce: " + std::to_string(requested) + " rings for " + std::to_string(n) +
         " elements, clamping to " + std::to_string(n));
    rings = n;
    ledger.rings_clamped = true;
  }
  if (n == 0) rings = 1;
  ledger.rings_used = static_cast<std::uint32_t>(rings);
  return rings;
}

// Reduce-scatter stages. On return acc[partition(me)] holds the global sum.
template <typename T>
void reduce_scatter_stages(const Communicator& comm, const TensorGroup<T>& group,
                           const RingPlan& plan, std::size_t rings, std::vector<T>& acc,
                           CostLedger& ledger) {
  const int p = static_cast<int>(plan.p);
  const int me = plan.position_of(comm.rank());
  const int right = plan.order[static_cast<std::size_t>(wrap(me + 1, p))];
  const int left = plan.order[static_cast<std::size_t>(wrap(me - 1, p))];
  auto slices = ring_slices(plan, rings);
  acc.resize(plan.n);

  for (int s = 0; s + 1 < p; ++s) {
    const auto& out_slices = slices[static_cast<std::size_t>(wrap(me - s - 1, p))];
    const auto& in_slices = slices[static_cast<std::size_t>(wrap(me - s - 2, p))];
    auto stage = static_cast<std::uint32_t>(s);

    for (std::size_t k = 0; k < rings; ++k) {
      Range r = out_slices[k];
      std::span<T> data(acc.data() + r.begin, r.size());
      if (s == 0) {
        lane_reduce_into(group, r, data);
        ledger.lane_reduce_elements += r.size();
      }
      ledger.messages_sent += send_elements<T>(comm, right, transport::tags::kReduceScatterChunk,
                                               static_cast<std::uint8_t>(k), stage,
                                               std::span<const T>(data));
      ledger.elements_sent_per_rank += r.size();
    }

    // Lane sums for ring k+1 run while ring k waits for its incoming chunk.
    auto start_local = [&](std::size_t k) {
      Range r = in_slices[k];
      auto policy = r.size() >= kParallelLaneThreshold ? std::launch::async : std::launch::deferred;
      return std::async(policy, [&group, r] { return lane_reduce(group, r); });
    };
    std::vector<std::future<std::vector<T>>> local(rings);
    local[0] = start_local(0);
    std::vector<T> incoming;
    for (std::size_t k = 0; k < rings; ++k) {
      if (k + 1 < rings) local[k + 1] = start_local(k + 1);
      Range r = in_slices[k];
      incoming.resize(r.size());
      recv_elements<T>(comm, left, transport::tags::kReduceScatterChunk,
                       static_cast<std::uint8_t>(k), stage, std::span<T>(incoming));
      ledger.elements_received_per_rank += r.size();
      auto mine = local[k].get();
      ledger.lane_reduce_elements += r.size();
      T* dst = acc.data() + r.begin;
      for (std::size_t i = 0; i < r.size(); ++i) dst[i] = incoming[i] + mine[i];
    }
    ++ledger.comm_steps;
  }
}

// Allgather stages over a buffer whose own partition is complete. Every
// received sub-slice is handed to `on_chunk` (range into `full`).
template <typename T, typename OnChunk>
void allgather_stages(const Communicator& comm, const RingPlan& plan, std::size_t rings,
                      std::vector<T>& full, CostLedger& ledger, OnChunk&& on_chunk) {
  const int p = static_cast<int>(plan.p);
  const int me = plan.position_of(comm.rank());
  const int right = plan.order[static_cast<std::size_t>(wrap(me + 1, p))];
  const int left = plan.order[static_cast<std::size_t>(wrap(me - 1, p))];
  auto slices = ring_slices(plan, rings);

  for (int s = 0; s + 1 < p; ++s) {
    const auto& out_slices = slices[static_cast<std::size_t>(wrap(me - s, p))];
    const auto& in_slices = slices[static_cast<std::size_t>(wrap(me - s - 1, p))];
    auto stage = static_cast<std::uint32_t>(s);
    for (std::size_t k = 0; k < rings; ++k) {
      Range r = out_slices[k];
      ledger.messages_sent += send_elements<T>(
          comm, right, transport::tags::kAllgatherChunk, static_cast<std::uint8_t>(k), stage,
          std::span<const T>(full.data() + r.begin, r.size()));
      ledger.elements_sent_per_rank += r.size();
    }
    for (std::size_t k = 0; k < rings; ++k) {
      Range r = in_slices[k];
      recv_elements<T>(comm, left, transport::tags::kAllgatherChunk,
                       static_cast<std::uint8_t>(k), stage,
                       std::span<T>(full.data() + r.begin, r.size()));
      ledger.elements_received_per_rank += r.size();
      on_chunk(r);
    }
    ++ledger.comm_steps;
  }
}

}  // namespace detail

// Every rank contributes its partition (per `plan`) and receives the whole
// buffer.
template <typename T>
std::vector<T> ring_allgather(const Communicator& comm, std::span<const T> my_part,
                              const RingPlan& plan, CostLedger* ledger_out = nullptr) {
  auto busy = comm.acquire("ring_allgather");
  plan.validate();
  if (plan.p != static_cast<std::size_t>(comm.size()))
    throw ConfigError("ring plan is for " + std::to_string(plan.p) + " ranks, communicator has " +
                      std::to_string(comm.size()));
  Range mine = plan.partition_of(comm.rank());
  if (my_part.size() != mine.size())
    throw ShapeError("ring_allgather: local part has " + std::to_string(my_part.size()) +
                     " elements, plan expects " + std::to_string(mine.size()));
  std::vector<T> full(plan.n);
  std::copy(my_part.begin(), my_part.end(), full.begin() + static_cast<std::ptrdiff_t>(mine.begin));
  CostLedger ledger;
  detail::allgather_stages<T>(comm, plan, 1, full, ledger, [](Range) {});
  if (ledger_out) *ledger_out = ledger;
  return full;
}

template <typename T>
std::vector<T> ring_allgather(const Communicator& comm, const std::vector<T>& my_part,
                              const RingPlan& plan, CostLedger* ledger_out = nullptr) {
  return ring_allgather(comm, std::span<const T>(my_part), plan, ledger_out);
}

// Returns this rank's partition of the global sum of every rank's lane sum.
template <typename T>
std::vector<T> ring_reduce_scatter(const Communicator& comm, const TensorGroup<T>& group,
                                   const RingPlan& plan, CostLedger* ledger_out = nullptr) {
  auto busy = comm.acquire("ring_reduce_scatter");
  group.validate();
  plan.validate();
  if (plan.n != group.size() || plan.p != static_cast<std::size_t>(comm.size()))
    throw ShapeError("ring_reduce_scatter: plan does not match group/communicator");
  CostLedger ledger;
  Range mine = plan.partition_of(comm.rank());
  std::vector<T> out;
  if (plan.p == 1) {
    out = lane_reduce(group);
    ledger.lane_reduce_elements = group.size();
  } else {
    std::vector<T> acc;
    detail::reduce_scatter_stages(comm, group, plan, 1, acc, ledger);
    out.assign(acc.begin() + static_cast<std::ptrdiff_t>(mine.begin),
               acc.begin() + static_cast<std::ptrdiff_t>(mine.end));
  }
  if (ledger_out) *ledger_out = ledger;
  return out;
}

// In-place tensor allreduce: afterwards every lane of every rank holds the
// sum over all ranks and lanes.
template <typename T>
CostLedger allreduce(const Communicator& comm, TensorGroup<T>& group, std::size_t rings = 2) {
  auto busy = comm.acquire("allreduce");
  group.validate();
  CostLedger ledger;
  const std::size_t n = group.size();
  rings = detail::effective_rings(rings, n, ledger);
  const auto p = static_cast<std::size_t>(comm.size());

  if (p == 1) {
    auto sum = lane_reduce(group);
    ledger.lane_reduce_elements = n;
    lane_broadcast(sum, group);
    return ledger;
  }

  auto plan = RingPlan::make(n, p);
  std::vector<T> acc;
  detail::reduce_scatter_stages(comm, group, plan, rings, acc, ledger);

  Range mine = plan.partition_of(comm.rank());
  std::vector<std::future<void>> copies;
  // Large chunks are copied into the lanes while the next transfer is in flight.
  auto publish = [&](Range r) {
    std::span<const T> values(acc.data() + r.begin, r.size());
    if (r.size() >= kParallelLaneThreshold)
      copies.push_back(std::async(std::launch::async, [&group, r, values] {
        lane_broadcast_range(group, r, values);
      }));
    else
      lane_broadcast_range(group, r, values);
  };
  publish(mine);
  detail::allgather_stages<T>(comm, plan, rings, acc, ledger, publish);
  for (auto& c : copies) c.get();
  return ledger;
}

// Root sends `data` to every other rank.
template <typename T>
CostLedger broadcast(const Communicator& comm, std::vector<T>& data, int root = 0) {
  auto busy = comm.acquire("broadcast");
  CostLedger ledger;
  if (comm.size() == 1) return ledger;
  if (comm.rank() == root) {
    for (int r = 0; r < comm.size(); ++r) {
      if (r == root) continue;
      ledger.messages_sent += detail::send_elements<T>(
          comm, r, transport::tags::kBroadcastChunk, 0, 0, std::span<const T>(data));
      ledger.elements_sent_per_rank += data.size();
    }
  } else {
    detail::recv_elements<T>(comm, root, transport::tags::kBroadcastChunk, 0, 0,
                             std::span<T>(data));
    ledger.elements_received_per_rank += data.size();
  }
  ledger.comm_steps = 1;
  return ledger;
}

// Baseline: gather lane sums at rank 0, sum in rank order, send the result
// back. Root ingress is (p-1)·n elements.
template <typename T>
CostLedger naive_allreduce(const Communicator& comm, TensorGroup<T>& group) {
  auto busy = comm.acquire("naive_allreduce");
  group.validate();
  CostLedger ledger;
  auto local = lane_reduce(group);
  ledger.lane_reduce_elements = group.size();
  const int p = comm.size();
  if (p > 1) {
    if (comm.rank() == 0) {
      std::vector<T> incoming(local.size());
      for (int r = 1; r < p; ++r) {
        detail::recv_elements<T>(comm, r, transport::tags::kGatherChunk, 0, 0,
                                 std::span<T>(incoming));
        ledger.elements_received_per_rank += incoming.size();
        for (std::size_t i = 0; i < local.size(); ++i) local[i] += incoming[i];
      }
      for (int r = 1; r < p; ++r) {
        ledger.messages_sent += detail::send_elements<T>(
            comm, r, transport::tags::kGatherChunk, 1, 0, std::span<const T>(local));
        ledger.elements_sent_per_rank += local.size();
      }
    } else {
      ledger.messages_sent += detail::send_elements<T>(
          comm, 0, transport::tags::kGatherChunk, 0, 0, std::span<const T>(local));
      ledger.elements_sent_per_rank += local.size();
      detail::recv_elements<T>(comm, 0, transport::tags::kGatherChunk, 1, 0,
                               std::span<T>(local));
      ledger.elements_received_per_rank += local.size();
    }
    ledger.comm_steps = 2;
  }
  lane_broadcast(local, group);
  return ledger;
}

}  // namespace hps
