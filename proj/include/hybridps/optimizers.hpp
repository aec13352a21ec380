// SPDX-License-Identifier: Apache-2.0
#pragma once

// Update rules applied by servers (and by workers for their local steps).
//   sgd:     w <- w - lr·rescale·g
//   center:  c <- c + alpha·(w - c)     (server side of elastic averaging)
//   local:   w <- w - alpha·(w - c)     (worker side of elastic averaging)

#include <cmath>
#include <span>

#include "hybridps/common.hpp"

namespace hps::optim {

// Assign is what a server does with no optimizer installed: the stored value
// becomes the pushed aggregate.
enum class OptimizerKind : std::uint8_t { Assign = 0, Sgd = 1, Elastic1 = 2 };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::Assign: return "assign";
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::Elastic1: return "elastic1";
  }
  return "unknown";
}

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::Assign;
  double lr = 1.0;
  double rescale = 1.0;
  double alpha = 0.5;

  static OptimizerSpec assign() { return {}; }
  static OptimizerSpec sgd(double lr, double rescale = 1.0) {
    return {OptimizerKind::Sgd, lr, rescale, 0.5};
  }
  // The elastic rule carries alpha in rescale as well, so a server that
  // only looks at rescale still sees the coupling strength.
  static OptimizerSpec elastic(double alpha) {
    return {OptimizerKind::Elastic1, 1.0, alpha, alpha};
  }

  void validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("learning rate must be > 0");
    if (!(rescale > 0) || !std::isfinite(rescale)) throw ConfigError("rescale must be > 0");
    if (kind == OptimizerKind::Elastic1 && !(alpha > 0 && alpha <= 1))
      throw ConfigError("elastic alpha must be in (0, 1]");
  }

  bool operator==(const OptimizerSpec&) const = default;
};

// kind (1 byte), lr (8), rescale (8), alpha (8); little-endian.
inline constexpr std::size_t kOptimizerSpecBytes = 25;

inline void encode(ByteWriter& w, const OptimizerSpec& s) {
  w.put<std::uint8_t>(static_cast<std::uint8_t>(s.kind));
  w.put<double>(s.lr);
  w.put<double>(s.rescale);
  w.put<double>(s.alpha);
}

inline OptimizerSpec decode_optimizer(ByteReader& r) {
  OptimizerSpec s;
  auto kind = r.get<std::uint8_t>();
  if (kind > static_cast<std::uint8_t>(OptimizerKind::Elastic1))
    throw TransportError("unknown optimizer kind " + std::to_string(kind));
  s.kind = static_cast<OptimizerKind>(kind);
  s.lr = r.get<double>();
  s.rescale = r.get<double>();
  s.alpha = r.get<double>();
  return s;
}

namespace detail {
inline void same_length(std::size_t a, std::size_t b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": length mismatch " + std::to_string(a) + " vs " +
                     std::to_string(b));
}
inline void finite(std::span<const double> v, const char* op, const char* what) {
  for (double x : v)
    if (!std::isfinite(x))
      throw DivergenceError(std::string(op) + ": non-finite " + what);
}
}  // namespace detail

inline void sgd_update_inplace(std::span<double> w, std::span<const double> g, double lr,
                               double rescale) {
  detail::same_length(w.size(), g.size(), "sgd_update");
  detail::finite(g, "sgd_update", "gradient");
  detail::finite(w, "sgd_update", "weights");
  const double step = lr * rescale;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= step * g[i];
}

inline std::vector<double> sgd_update(std::span<const double> w, std::span<const double> g,
                                      double lr, double rescale) {
  std::vector<double> out(w.begin(), w.end());
  sgd_update_inplace(out, g, lr, rescale);
  return out;
}

inline void elastic_center_update_inplace(std::span<double> center, std::span<const double> w,
                                          double alpha) {
  detail::same_length(center.size(), w.size(), "elastic_center_update");
  for (std::size_t i = 0; i < center.size(); ++i) center[i] += alpha * (w[i] - center[i]);
}

inline std::vector<double> elastic_center_update(std::span<const double> center,
                                                 std::span<const double> w, double alpha) {
  std::vector<double> out(center.begin(), center.end());
  elastic_center_update_inplace(out, w, alpha);
  return out;
}

inline void elastic_local_update_inplace(std::span<double> w, std::span<const double> center,
                                         double alpha) {
  detail::same_length(w.size(), center.size(), "elastic_local_update");
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= alpha * (w[i] - center[i]);
}

inline std::vector<double> elastic_local_update(std::span<const double> w,
                                                std::span<const double> center, double alpha) {
  std::vector<double> out(w.begin(), w.end());
  elastic_local_update_inplace(out, center, alpha);
  return out;
}

}  // namespace hps::optim
