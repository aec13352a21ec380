// SPDX-License-Identifier: Apache-2.0
#pragma once

// Softmax regression and a one-hidden-layer tanh MLP with hand-written
// gradients. Every weight matrix and bias vector is its own store key.
//
// Keys, logistic: 0 W (classes x dim), 1 b (classes).
// Keys, mlp:      0 W1 (hidden x dim), 1 b1 (hidden),
//                 2 W2 (classes x hidden), 3 b2 (classes).
// Matrices are row-major.

#include <cmath>
#include <random>

#include "hybridps/trainer/dataset.hpp"

namespace hps::train {

using Params = std::vector<std::vector<double>>;

enum class ModelKind { logistic, mlp };

inline std::string to_string(ModelKind k) { return k == ModelKind::logistic ? "logistic" : "mlp"; }

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "logistic" || s == "logistic-regression") return ModelKind::logistic;
  if (s == "mlp") return ModelKind::mlp;
  throw ConfigError("unknown model '" + std::string(s) + "'");
}

struct Model {
  ModelKind kind = ModelKind::logistic;
  std::size_t dim = 0;
  std::size_t classes = 2;
  std::size_t hidden = 16;

  std::size_t key_count() const { return kind == ModelKind::logistic ? 2 : 4; }

  std::vector<std::size_t> shapes() const {
    if (kind == ModelKind::logistic) return {classes * dim, classes};
    return {hidden * dim, hidden, classes * hidden, classes};
  }

  void check(const Params& p) const {
    auto s = shapes();
    if (p.size() != s.size()) throw ShapeError("model expects " + std::to_string(s.size()) + " keys");
    for (std::size_t k = 0; k < s.size(); ++k)
      if (p[k].size() != s[k])
        throw ShapeError("key " + std::to_string(k) + " has " + std::to_string(p[k].size()) +
                         " values, model expects " + std::to_string(s[k]));
  }
};

// Weights ~ N(0, 1/fan_in), biases zero.
inline Params init_params(const Model& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Params p;
  auto matrix = [&](std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> d(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
    std::vector<double> w(rows * cols);
    for (auto& x : w) x = d(rng);
    p.push_back(std::move(w));
    p.emplace_back(rows, 0.0);
  };
  if (m.kind == ModelKind::logistic) {
    matrix(m.classes, m.dim);
  } else {
    matrix(m.hidden, m.dim);
    matrix(m.classes, m.hidden);
  }
  return p;
}

namespace detail {

// out = W x + b for a rows x cols matrix W.
inline void affine(std::span<const double> w, std::span<const double> b,
                   std::span<const double> x, std::span<double> out) {
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < out.size(); ++r) {
    double acc = b[r];
    const double* row = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
}

// Overwrites logits with softmax probabilities; returns -log p[label].
inline double softmax_xent(std::span<double> z, std::uint32_t label) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double sum = 0;
  for (double v : z) sum += std::exp(v - mx);
  double loss = std::log(sum) - (z[label] - mx);
  for (auto& v : z) v = std::exp(v - mx) / sum;
  return loss;
}

}  // namespace detail

struct LossAndGrad {
  double loss = 0;  // summed over the batch
  Params grad;      // per key, summed over the batch
};

// Batch gradients are sums of per-sample gradients; any averaging is left to
// the optimizer's rescale. An empty batch yields zero loss and zero
// gradients.
inline LossAndGrad forward_backward(const Model& m, const Params& p,
                                    std::span<const Sample* const> batch) {
  m.check(p);
  LossAndGrad out;
  for (auto n : m.shapes()) out.grad.emplace_back(n, 0.0);
  std::vector<double> z(m.classes), h(m.hidden), dh(m.hidden);
  for (const Sample* s : batch) {
    if (s->x.size() != m.dim) throw ShapeError("sample has the wrong feature count");
    if (s->label >= m.classes) throw ShapeError("sample label out of range");
    const std::span<const double> x(s->x);
    if (m.kind == ModelKind::logistic) {
      detail::affine(p[0], p[1], x, z);
      out.loss += detail::softmax_xent(z, s->label);
      z[s->label] -= 1.0;
      for (std::size_t c = 0; c < m.classes; ++c) {
        double* row = out.grad[0].data() + c * m.dim;
        for (std::size_t i = 0; i < m.dim; ++i) row[i] += z[c] * x[i];
        out.grad[1][c] += z[c];
      }
      continue;
    }
    detail::affine(p[0], p[1], x, h);
    for (auto& v : h) v = std::tanh(v);
    detail::affine(p[2], p[3], h, z);
    out.loss += detail::softmax_xent(z, s->label);
    z[s->label] -= 1.0;
    std::fill(dh.begin(), dh.end(), 0.0);
    for (std::size_t c = 0; c < m.classes; ++c) {
      double* grow = out.grad[2].data() + c * m.hidden;
      const double* wrow = p[2].data() + c * m.hidden;
      for (std::size_t j = 0; j < m.hidden; ++j) {
        grow[j] += z[c] * h[j];
        dh[j] += wrow[j] * z[c];
      }
      out.grad[3][c] += z[c];
    }
    for (std::size_t j = 0; j < m.hidden; ++j) {
      double da = dh[j] * (1.0 - h[j] * h[j]);
      double* row = out.grad[0].data() + j * m.dim;
      for (std::size_t i = 0; i < m.dim; ++i) row[i] += da * x[i];
      out.grad[1][j] += da;
    }
  }
  if (!std::isfinite(out.loss)) throw DivergenceError("non-finite training loss");
  return out;
}

inline double batch_loss(const Model& m, const Params& p, std::span<const Sample* const> batch) {
  return forward_backward(m, p, batch).loss;
}

inline std::uint32_t predict(const Model& m, const Params& p, const Sample& s) {
  std::vector<double> z(m.classes);
  if (m.kind == ModelKind::logistic) {
    detail::affine(p[0], p[1], s.x, z);
  } else {
    std::vector<double> h(m.hidden);
    detail::affine(p[0], p[1], s.x, h);
    for (auto& v : h) v = std::tanh(v);
    detail::affine(p[2], p[3], h, z);
  }
  return static_cast<std::uint32_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

inline double accuracy(const Model& m, const Params& p, const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples) hits += predict(m, p, s) == s.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace hps::train
