// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: flat key=value text, one key per line, '#' starts a
// comment. Every key is also a long command-line flag of the same name.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "hybridps/kvstore/messages.hpp"
#include "hybridps/trainer/drivers.hpp"
#include "hybridps/transport/tcp.hpp"

namespace hps::launcher {

enum class TransportKind { inproc, tcp_local, tcp };

inline std::string to_string(TransportKind t) {
  switch (t) {
    case TransportKind::inproc: return "inproc";
    case TransportKind::tcp_local: return "tcp-local";
    case TransportKind::tcp: return "tcp";
  }
  return "?";
}

inline TransportKind parse_transport(std::string_view s) {
  if (s == "inproc") return TransportKind::inproc;
  if (s == "tcp-local") return TransportKind::tcp_local;
  if (s == "tcp") return TransportKind::tcp;
  throw ConfigError("unknown transport '" + std::string(s) + "' (inproc, tcp-local, tcp)");
}

struct RunConfig {
  std::uint32_t workers = 4;
  std::uint32_t servers = 1;
  std::uint32_t clients = 4;
  kv::StoreMode mode = kv::StoreMode::Sync;
  std::string algo = "auto";  // auto, sgd, asgd, esgd
  std::size_t rings = 2;
  std::size_t lanes = 1;
  std::size_t batch_size = 128;
  double lr = 0.5;
  double alpha = 0.5;
  std::size_t interval = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  TransportKind transport = TransportKind::inproc;
  std::string scheduler_addr = "127.0.0.1:0";
  train::DatasetSpec dataset;
  train::ModelKind model = train::ModelKind::logistic;
  std::size_t hidden = 16;
  std::string out = "metrics.csv";
  std::string run_id = "run";
  std::uint64_t timeout_ms = 60000;
  std::vector<std::uint64_t> sizes{4u << 20, 16u << 20, 64u << 20};  // bench, bytes
  std::size_t reps = 3;                                              // bench

  bool operator==(const RunConfig&) const = default;

  transport::Topology topology() const { return {workers, servers, clients}; }
  Millis timeout() const { return Millis(static_cast<Millis::rep>(timeout_ms)); }

  // The dataset seed always follows `seed`.
  train::DatasetSpec dataset_spec() const {
    auto d = dataset;
    d.seed = seed;
    return d;
  }

  train::Algorithm algorithm() const {
    return algo == "auto" ? train::default_algorithm(mode) : train::parse_algorithm(algo);
  }
};

namespace detail {

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      out = static_cast<T>(std::stod(std::string(v), &used));
      if (used != v.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError("bad value '" + std::string(v) + "' for " + std::string(key));
    }
  } else {
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw ConfigError("bad value '" + std::string(v) + "' for " + std::string(key));
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_sizes(const std::vector<std::uint64_t>& sizes) {
  std::string s;
  for (std::size_t i = 0; i < sizes.size(); ++i) s += (i ? "," : "") + std::to_string(sizes[i]);
  return s;
}

inline std::vector<std::uint64_t> parse_sizes(std::string_view v) {
  std::vector<std::uint64_t> out;
  std::string cell;
  std::stringstream ss{std::string(v)};
  while (std::getline(ss, cell, ','))
    if (!cell.empty()) out.push_back(parse_number<std::uint64_t>("sizes", cell));
  return out;
}

struct Field {
  std::string name;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <typename T>
Field number(std::string name, std::string help, T RunConfig::*member) {
  return {name, std::move(help),
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*member);
            else return std::to_string(c.*member);
          },
          [member, name](RunConfig& c, std::string_view v) {
            c.*member = parse_number<T>(name, v);
          }};
}

template <typename T>
Field dataset_number(std::string name, std::string help, T train::DatasetSpec::*member) {
  return {name, std::move(help),
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.dataset.*member);
            else return std::to_string(c.dataset.*member);
          },
          [member, name](RunConfig& c, std::string_view v) {
            c.dataset.*member = parse_number<T>(name, v);
          }};
}

inline Field text(std::string name, std::string help, std::string RunConfig::*member) {
  return {name, std::move(help), [member](const RunConfig& c) { return c.*member; },
          [member](RunConfig& c, std::string_view v) { c.*member = std::string(v); }};
}

}  // namespace detail

inline const std::vector<detail::Field>& config_fields() {
  using namespace detail;
  static const std::vector<Field> fields = {
      number("workers", "number of workers", &RunConfig::workers),
      number("servers", "number of servers (0 only in pure-mpi mode)", &RunConfig::servers),
      number("clients", "number of client groups; must divide workers", &RunConfig::clients),
      {"mode", "sync, async, sync-mpi, async-mpi or pure-mpi",
       [](const RunConfig& c) { return kv::to_string(c.mode); },
       [](RunConfig& c, std::string_view v) { c.mode = kv::parse_mode(v); }},
      text("algo", "auto, sgd, asgd or esgd", &RunConfig::algo),
      number("rings", "rings per group allreduce", &RunConfig::rings),
      number("lanes", "lanes per worker", &RunConfig::lanes),
      number("batch_size", "samples per worker per iteration", &RunConfig::batch_size),
      number("lr", "learning rate", &RunConfig::lr),
      number("alpha", "elastic coupling strength", &RunConfig::alpha),
      number("interval", "elastic exchange period in iterations", &RunConfig::interval),
      number("epochs", "training epochs", &RunConfig::epochs),
      number("seed", "seed for data, sharding and parameters", &RunConfig::seed),
      {"transport", "inproc, tcp-local or tcp (one process per node)",
       [](const RunConfig& c) { return to_string(c.transport); },
       [](RunConfig& c, std::string_view v) { c.transport = parse_transport(v); }},
      text("scheduler_addr", "scheduler host:port for tcp", &RunConfig::scheduler_addr),
      {"dataset", "blobs, moons or file",
       [](const RunConfig& c) { return train::to_string(c.dataset.kind); },
       [](RunConfig& c, std::string_view v) { c.dataset.kind = train::parse_dataset_kind(v); }},
      dataset_number("classes", "blobs: number of classes", &train::DatasetSpec::classes),
      dataset_number("dim", "blobs: feature count", &train::DatasetSpec::dim),
      dataset_number("separation", "blobs: distance between class means",
                     &train::DatasetSpec::separation),
      dataset_number("train_size", "training samples", &train::DatasetSpec::train_size),
      dataset_number("test_size", "validation samples", &train::DatasetSpec::test_size),
      dataset_number("noise", "moons: noise std dev", &train::DatasetSpec::noise),
      {"data_file", "file: path of a label,x1,...,xd CSV",
       [](const RunConfig& c) { return c.dataset.path; },
       [](RunConfig& c, std::string_view v) { c.dataset.path = std::string(v); }},
      {"model", "logistic or mlp",
       [](const RunConfig& c) { return train::to_string(c.model); },
       [](RunConfig& c, std::string_view v) { c.model = train::parse_model_kind(v); }},
      number("hidden", "mlp: hidden units", &RunConfig::hidden),
      text("out", "output path for metrics or tables", &RunConfig::out),
      text("run_id", "run label written to metrics", &RunConfig::run_id),
      number("timeout_ms", "per-operation timeout", &RunConfig::timeout_ms),
      {"sizes", "bench: comma-separated message sizes in bytes",
       [](const RunConfig& c) { return format_sizes(c.sizes); },
       [](RunConfig& c, std::string_view v) { c.sizes = parse_sizes(v); }},
      number("reps", "bench: timed repetitions per row", &RunConfig::reps),
  };
  return fields;
}

inline void set_key(RunConfig& c, std::string_view key, std::string_view value) {
  for (const auto& f : config_fields()) {
    if (f.name == key) {
      f.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Applies every key=value line of `text` on top of `base`.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  std::stringstream ss{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    auto t = trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    set_key(base, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline std::string format_config(const RunConfig& c) {
  std::string out;
  for (const auto& f : config_fields()) out += f.name + "=" + f.get(c) + "\n";
  return out;
}

// Checks everything that can be checked before any node starts.
inline void validate(const RunConfig& c) {
  auto topo = c.topology();
  topo.validate();
  if ((c.servers == 0) != (c.mode == kv::StoreMode::PureMpi))
    throw ConfigError("servers=0 if and only if mode=pure-mpi");
  if (!kv::groups_aggregate(c.mode) && c.clients != c.workers)
    throw ConfigError(kv::to_string(c.mode) + " mode needs clients == workers");
  train::check_algorithm(c.mode, c.algorithm());
  if (c.rings == 0) throw ConfigError("rings must be positive");
  if (c.lanes == 0) throw ConfigError("lanes must be positive");
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.epochs == 0) throw ConfigError("epochs must be positive");
  if (c.interval == 0) throw ConfigError("interval must be positive");
  if (!(c.lr > 0) || !std::isfinite(c.lr)) throw ConfigError("lr must be positive");
  if (!(c.alpha > 0 && c.alpha <= 1)) throw ConfigError("alpha must be in (0, 1]");
  if (c.timeout_ms == 0) throw ConfigError("timeout_ms must be positive");
  if (c.model == train::ModelKind::mlp && c.hidden == 0) throw ConfigError("hidden must be positive");
  if (c.reps == 0) throw ConfigError("reps must be positive");
  if (c.transport != TransportKind::inproc) transport::tcp::Address::parse(c.scheduler_addr);
}

}  // namespace hps::launcher
