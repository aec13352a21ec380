// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "hybridps/common.hpp"

namespace hps {

// A keyed bundle of equal-length vectors, one per lane. A lane stands in for
// one accelerator of a multi-device worker; the group is the unit that
// collectives reduce and the store keeps per key.
template <typename T = double>
struct TensorGroup {
  std::uint32_t key = 0;
  std::vector<std::vector<T>> lanes;

  TensorGroup() = default;
  TensorGroup(std::uint32_t key_, std::size_t lane_count, std::size_t n, T fill = T{})
      : key(key_), lanes(lane_count, std::vector<T>(n, fill)) {
    if (lane_count == 0) throw ShapeError("tensor group needs at least one lane");
  }

  std::size_t lane_count() const { return lanes.size(); }
  std::size_t size() const { return lanes.empty() ? 0 : lanes.front().size(); }

  void validate() const {
    if (lanes.empty()) throw ShapeError("tensor group needs at least one lane");
    for (const auto& l : lanes)
      if (l.size() != lanes.front().size())
        throw ShapeError("mismatched lane lengths in group " + std::to_string(key));
  }

  void fill(T value) {
    for (auto& l : lanes) std::fill(l.begin(), l.end(), value);
  }
};

}  // namespace hps
