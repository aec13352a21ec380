// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic classification data and worker sharding.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "hybridps/common.hpp"

namespace hps::train {

struct Sample {
  std::vector<double> x;
  std::uint32_t label = 0;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::size_t dim = 0;
  std::size_t classes = 0;
};

enum class DatasetKind { blobs, moons, file };

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::blobs: return "blobs";
    case DatasetKind::moons: return "moons";
    case DatasetKind::file: return "file";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "blobs" || s == "gaussian-blobs") return DatasetKind::blobs;
  if (s == "moons" || s == "two-moons") return DatasetKind::moons;
  if (s == "file") return DatasetKind::file;
  throw ConfigError("unknown dataset '" + std::string(s) + "'");
}

struct DatasetSpec {
  DatasetKind kind = DatasetKind::blobs;
  std::size_t classes = 2;
  std::size_t dim = 16;
  double separation = 6.0;  // distance between class means, in noise std devs
  std::size_t train_size = 10000;
  std::size_t test_size = 2000;
  double noise = 0.1;  // moons only
  std::string path;    // file only
  std::uint64_t seed = 1;

  bool operator==(const DatasetSpec&) const = default;
};

// Class c is centered at (separation / sqrt 2) * e_c, so every pair of
// means is `separation` apart; features get unit Gaussian noise. Labels
// cycle 0, 1, ..., classes-1. Train samples are drawn first, then test.
inline Dataset gaussian_blobs(std::size_t classes, std::size_t dim, double separation,
                              std::size_t n_train, std::size_t n_test, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("gaussian-blobs needs at least 2 classes");
  if (classes > dim) throw ConfigError("gaussian-blobs needs classes <= dim");
  const double offset = separation / std::numbers::sqrt2;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise;
  auto draw = [&](std::size_t i) {
    Sample s;
    s.label = static_cast<std::uint32_t>(i % classes);
    s.x.resize(dim);
    for (auto& v : s.x) v = noise(rng);
    s.x[s.label] += offset;
    return s;
  };
  Dataset d{{}, {}, dim, classes};
  for (std::size_t i = 0; i < n_train; ++i) d.train.push_back(draw(i));
  for (std::size_t i = 0; i < n_test; ++i) d.test.push_back(draw(i));
  return d;
}

inline Dataset two_moons(std::size_t n_train, std::size_t n_test, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> jitter(0.0, noise);
  auto draw = [&](std::size_t i) {
    Sample s;
    s.label = static_cast<std::uint32_t>(i % 2);
    double t = angle(rng);
    if (s.label == 0) s.x = {std::cos(t), std::sin(t)};
    else s.x = {1.0 - std::cos(t), 0.5 - std::sin(t)};
    s.x[0] += jitter(rng);
    s.x[1] += jitter(rng);
    return s;
  };
  Dataset d{{}, {}, 2, 2};
  for (std::size_t i = 0; i < n_train; ++i) d.train.push_back(draw(i));
  for (std::size_t i = 0; i < n_test; ++i) d.test.push_back(draw(i));
  return d;
}

// Rows of "label,x1,...,xd". Rows are shuffled with `seed`; the last
// test_size rows (at most a fifth of the file) become the test set.
inline Dataset load_csv(const std::string& path, std::size_t test_size, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset file '" + path + "'");
  std::vector<Sample> rows;
  std::string line;
  std::size_t dim = 0, classes = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    Sample s;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      try {
        if (first) s.label = static_cast<std::uint32_t>(std::stoul(cell));
        else s.x.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ConfigError("bad value '" + cell + "' in " + path);
      }
      first = false;
    }
    if (s.x.empty()) throw ConfigError("row without features in " + path);
    if (dim == 0) dim = s.x.size();
    if (s.x.size() != dim) throw ConfigError("ragged rows in " + path);
    classes = std::max<std::size_t>(classes, s.label + 1);
    rows.push_back(std::move(s));
  }
  if (rows.size() < 2) throw ConfigError("dataset file '" + path + "' has fewer than 2 rows");
  std::mt19937_64 rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  std::size_t n_test = std::clamp<std::size_t>(test_size, 1, rows.size() / 5 + 1);
  Dataset d{{}, {}, dim, std::max<std::size_t>(classes, 2)};
  d.test.assign(rows.end() - static_cast<std::ptrdiff_t>(n_test), rows.end());
  rows.resize(rows.size() - n_test);
  d.train = std::move(rows);
  return d;
}

inline Dataset make_dataset(const DatasetSpec& s) {
  switch (s.kind) {
    case DatasetKind::blobs:
      return gaussian_blobs(s.classes, s.dim, s.separation, s.train_size, s.test_size, s.seed);
    case DatasetKind::moons: return two_moons(s.train_size, s.test_size, s.noise, s.seed);
    case DatasetKind::file: return load_csv(s.path, s.test_size, s.seed);
  }
  throw ConfigError("bad dataset kind");
}

// Seeded shuffle of [0, n) cut into `workers` contiguous shards whose sizes
// differ by at most one (the first n % workers shards are the larger ones).
inline std::vector<std::vector<std::size_t>> shard_data(std::size_t n, std::size_t workers,
                                                       std::uint64_t seed) {
  if (workers == 0) throw ConfigError("shard_data: zero workers");
  if (n < workers)
    throw ConfigError("shard_data: " + std::to_string(n) + " samples for " +
                      std::to_string(workers) + " workers");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> shards;
  for (auto r : split_even(n, workers))
    shards.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(r.begin),
                        order.begin() + static_cast<std::ptrdiff_t>(r.end));
  return shards;
}

}  // namespace hps::train
