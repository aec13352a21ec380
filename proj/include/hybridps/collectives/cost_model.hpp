// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace hps {

// alpha: seconds per message, beta: seconds per byte moved,
// gamma: seconds per byte reduced.
struct CostParams {
  double alpha = 0;
  double beta = 0;
  double gamma = 0;
};

// Modeled time of a bucket allreduce over p ranks on n bytes:
//   (p-1)·alpha + 2·((p-1)/p)·n·beta + ((p-1)/p)·n·gamma
inline double predict_cost(std::size_t p, double n_bytes, double alpha, double beta,
                           double gamma) {
  if (p <= 1) return 0.0;
  double pm1 = static_cast<double>(p - 1);
  double frac = pm1 / static_cast<double>(p);
  return pm1 * alpha + 2.0 * frac * n_bytes * beta + frac * n_bytes * gamma;
}

inline double predict_cost(std::size_t p, double n_bytes, const CostParams& c) {
  return predict_cost(p, n_bytes, c.alpha, c.beta, c.gamma);
}

// Gather-to-root then send-back: the root serializes 2(p-1) transfers of n
// bytes and reduces (p-1)·n bytes.
inline double predict_naive_cost(std::size_t p, double n_bytes, const CostParams& c) {
  if (p <= 1) return 0.0;
  double pm1 = static_cast<double>(p - 1);
  return 2.0 * pm1 * (c.alpha + n_bytes * c.beta) + pm1 * n_bytes * c.gamma;
}

}  // namespace hps
