// SPDX-License-Identifier: Apache-2.0
#pragma once

// Intra-worker lane operations. A reduction splits the index range into one
// chunk per lane and lets each lane sum its chunk across all lanes, the way
// per-device kernels would run side by side. Per element the summation order
// is always lane 0, 1, ..., L-1, so results do not depend on the split.

#include <future>
#include <span>

#include "hybridps/collectives/tensor_group.hpp"

namespace hps {

// Chunks at least this long get their own thread.
inline constexpr std::size_t kParallelLaneThreshold = 1u << 15;

namespace detail {

template <typename T>
void sum_lanes(const TensorGroup<T>& group, Range r, T* out) {
  const auto& lanes = group.lanes;
  const T* first = lanes[0].data();
  for (std::size_t i = r.begin; i < r.end; ++i) out[i - r.begin] = first[i];
  for (std::size_t l = 1; l < lanes.size(); ++l) {
    const T* src = lanes[l].data();
    for (std::size_t i = r.begin; i < r.end; ++i) out[i - r.begin] += src[i];
  }
}

}  // namespace detail

// Sums lanes over `range`, writing range.size() elements to `out`.
template <typename T>
void lane_reduce_into(const TensorGroup<T>& group, Range range, std::span<T> out) {
  if (out.size() != range.size()) throw ShapeError("lane_reduce: output size mismatch");
  if (range.end > group.size()) throw ShapeError("lane_reduce: range out of bounds");
  auto chunks = split_even(range.size(), group.lane_count());
  bool parallel = group.lane_count() > 1 && chunks.front().size() >= kParallelLaneThreshold;
  std::vector<std::future<void>> pending;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    Range sub{range.begin + chunks[c].begin, range.begin + chunks[c].end};
    T* dst = out.data() + chunks[c].begin;
    if (parallel && c + 1 < chunks.size())
      pending.push_back(std::async(std::launch::async,
                                   [&group, sub, dst] { detail::sum_lanes(group, sub, dst); }));
    else
      detail::sum_lanes(group, sub, dst);
  }
  for (auto& f : pending) f.get();
}

template <typename T>
std::vector<T> lane_reduce(const TensorGroup<T>& group, Range range) {
  group.validate();
  std::vector<T> out(range.size());
  lane_reduce_into(group, range, std::span<T>(out));
  return out;
}

// Elementwise sum over all lanes.
template <typename T>
std::vector<T> lane_reduce(const TensorGroup<T>& group) {
  group.validate();
  return lane_reduce(group, Range{0, group.size()});
}

// Copies `values` into [range) of every lane.
template <typename T>
void lane_broadcast_range(TensorGroup<T>& group, Range range, std::span<const T> values) {
  if (values.size() != range.size()) throw ShapeError("lane_broadcast: length mismatch");
  if (range.end > group.size()) throw ShapeError("lane_broadcast: range out of bounds");
  if (range.size() == 0) return;
  auto copy = [&group, range, values](std::size_t lane) {
    std::copy(values.begin(), values.end(),
              group.lanes[lane].begin() + static_cast<std::ptrdiff_t>(range.begin));
  };
  bool parallel = group.lane_count() > 1 && range.size() >= kParallelLaneThreshold;
  std::vector<std::future<void>> pending;
  for (std::size_t l = 0; l < group.lane_count(); ++l) {
    if (parallel && l + 1 < group.lane_count())
      pending.push_back(std::async(std::launch::async, copy, l));
    else
      copy(l);
  }
  for (auto& f : pending) f.get();
}

// Sets every lane to `src`.
template <typename T>
void lane_broadcast(std::span<const T> src, TensorGroup<T>& group) {
  group.validate();
  if (src.size() != group.size())
    throw ShapeError("lane_broadcast: source has " + std::to_string(src.size()) +
                     " elements, group has " + std::to_string(group.size()));
  lane_broadcast_range(group, Range{0, group.size()}, src);
}

template <typename T>
void lane_broadcast(const std::vector<T>& src, TensorGroup<T>& group) {
  lane_broadcast(std::span<const T>(src), group);
}

}  // namespace hps
