// SPDX-License-Identifier: Apache-2.0
#pragma once

// Launching runs: training on in-process or loopback-TCP nodes, training
// with one child process per node, the allreduce benchmark, and the
// six-mode comparison.

#include <algorithm>
#include <filesystem>
#include <iostream>

#include "hybridps/collectives/cost_model.hpp"
#include "hybridps/collectives/local_group.hpp"
#include "hybridps/launcher/config.hpp"
#include "hybridps/launcher/process.hpp"
#include "hybridps/trainer/run.hpp"
#include "hybridps/transport/inproc.hpp"
#include "hybridps/transport/tcp.hpp"

namespace hps::launcher {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRendezvous = 3;
inline constexpr int kExitDivergence = 4;
inline constexpr int kExitChild = 5;

struct RendezvousError : Error {
  using Error::Error;
};

// A child process exited nonzero.
struct ChildError : Error {
  ChildError(const std::string& what, int code) : Error(what), code(code) {}
  int code;
};

inline int exit_code_for(std::exception_ptr e) {
  try {
    std::rethrow_exception(e);
  } catch (const ConfigError&) {
    return kExitConfig;
  } catch (const RendezvousError&) {
    return kExitRendezvous;
  } catch (const DivergenceError&) {
    return kExitDivergence;
  } catch (const ChildError& c) {
    return c.code == kExitConfig || c.code == kExitRendezvous || c.code == kExitDivergence
               ? c.code
               : kExitChild;
  } catch (...) {
    return kExitChild;
  }
}

inline std::string what_of(std::exception_ptr e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& x) {
    return x.what();
  } catch (...) {
    return "unknown error";
  }
}

struct LaunchOptions {
  // binary re-executed for each node of a multi-process run
  std::string self_exe = "/proc/self/exe";
};

// Label written to the metrics mode column: dist-/mpi- plus the algorithm,
// or pure-mpi.
inline std::string mode_label(const RunConfig& c) {
  if (c.mode == kv::StoreMode::PureMpi) return "pure-mpi";
  std::string prefix = kv::groups_aggregate(c.mode) ? "mpi-" : "dist-";
  return prefix + train::to_string(c.algorithm());
}

inline train::RunSetup make_setup(const RunConfig& c, const train::Dataset& data) {
  train::RunSetup s;
  s.mode = c.mode;
  s.topology = c.topology();
  s.rings = c.rings;
  s.timeout = c.timeout();
  s.model = train::Model{c.model, data.dim, data.classes, c.hidden};
  s.train.algo = c.algorithm();
  s.train.epochs = c.epochs;
  s.train.batch_size = c.batch_size;
  s.train.lanes = c.lanes;
  s.train.lr = c.lr;
  s.train.alpha = c.alpha;
  s.train.interval = c.interval;
  s.train.seed = c.seed;
  return s;
}

inline void write_metrics_file(const RunConfig& c, const std::vector<train::MetricsRecord>& m) {
  std::ofstream f(c.out);
  if (!f) throw ConfigError("cannot write metrics to '" + c.out + "'");
  train::write_metrics_csv(f, c.run_id, mode_label(c), m);
}

inline transport::tcp::Options tcp_options(const RunConfig& c) {
  transport::tcp::Options o;
  o.timeout = c.timeout();
  return o;
}

// Training with every node hosted in this process.
inline train::TrainResult train_in_process(const RunConfig& c) {
  validate(c);
  auto data = train::make_dataset(c.dataset_spec());
  auto setup = make_setup(c, data);
  transport::Registry reg;
  if (c.transport == TransportKind::inproc) {
    reg = transport::connect_all_inproc(c.topology());
  } else {
    try {
      reg = transport::tcp::connect_all_local(c.topology(), tcp_options(c));
    } catch (const Error& e) {
      throw RendezvousError(std::string("rendezvous failed: ") + e.what());
    }
  }
  auto result = train::train_cluster(reg, data, setup);
  reg.close_all();
  return result;
}

// Body of a child process; role and rank come from the environment.
inline int node_main() {
  const char* role = std::getenv(kEnvRole);
  const char* rank_text = std::getenv(kEnvRank);
  std::string who = std::string(role ? role : "?") + " " + (rank_text ? rank_text : "?");
  try {
    const char* cfg_text = std::getenv(kEnvConfig);
    const char* sched = std::getenv(kEnvSchedAddr);
    if (!role || !rank_text || !cfg_text || !sched)
      throw ConfigError("child started without HPS_ROLE, HPS_RANK, HPS_SCHED_ADDR and HPS_CONFIG");
    RunConfig c = parse_config(cfg_text);
    validate(c);
    auto topo = c.topology();
    transport::NodeId id;
    std::string r(role);
    auto rank = detail::parse_number<std::uint32_t>("HPS_RANK", rank_text);
    if (r == "scheduler") id = transport::NodeId::scheduler();
    else if (r == "server") id = transport::NodeId::server(rank);
    else if (r == "worker") id = transport::NodeId::worker(rank);
    else throw ConfigError("unknown role '" + r + "'");

    std::shared_ptr<transport::Endpoint> ep;
    std::optional<train::Dataset> data;
    if (id.role == transport::Role::worker) data = train::make_dataset(c.dataset_spec());
    try {
      if (id.role == transport::Role::scheduler) {
        transport::tcp::Listener listener(transport::tcp::Address::parse(sched));
        if (const char* fd_text = std::getenv(kEnvPortFd)) {
          int fd = detail::parse_number<int>("HPS_PORT_FD", fd_text);
          auto line = std::to_string(listener.address().port) + "\n";
          if (::write(fd, line.data(), line.size()) < 0) throw Error("cannot report port");
          ::close(fd);
        }
        ep = transport::tcp::serve_rendezvous(listener, topo, tcp_options(c));
      } else {
        ep = transport::tcp::join(topo, id, transport::tcp::Address::parse(sched), tcp_options(c));
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw RendezvousError(std::string("rendezvous failed: ") + e.what());
    }

    transport::Registry reg;
    reg.topology = topo;
    reg.endpoints[id] = ep;
    kv::ClusterOptions co;
    co.mode = c.mode;
    co.timeout = c.timeout();
    kv::SchedulerReport report;
    train::RunSetup setup;
    if (data) setup = make_setup(c, *data);
    auto worker_fn = [&](std::shared_ptr<transport::Endpoint> wep) {
      train::train_worker(std::move(wep), *data, setup);
    };
    kv::run_node(reg, id, co, worker_fn, &report);
    if (id.role == transport::Role::scheduler) write_metrics_file(c, train::collect(report).metrics);
    ep->close();
    return kExitOk;
  } catch (...) {
    auto e = std::current_exception();
    std::cerr << "[" << who << "] error: " << what_of(e) << std::endl;
    return exit_code_for(e);
  }
}

// Training with one child process per node, over TCP. The scheduler child
// starts first and reports its port; the rest follow once it listens.
inline std::vector<train::MetricsRecord> train_multi_process(const RunConfig& c,
                                                             const LaunchOptions& lo) {
  validate(c);
  auto text = format_config(c);
  auto sched = transport::tcp::Address::parse(c.scheduler_addr);
  ChildSet kids;
  Pipe port;
  kids.spawn(lo.self_exe, "scheduler",
             {{kEnvRole, "scheduler"},
              {kEnvRank, "0"},
              {kEnvSchedAddr, c.scheduler_addr},
              {kEnvConfig, text},
              {kEnvPortFd, std::to_string(port.write_fd)}},
             {port.write_fd});
  port.close_write();
  auto line = port.read_line();
  if (line.empty()) {
    auto ex = kids.wait_one();
    throw ChildError("scheduler exited with code " + std::to_string(ex ? ex->code : -1) +
                         " before listening",
                     ex ? ex->code : kExitChild);
  }
  std::string addr = sched.host + ":" + line;
  auto spawn_node = [&](const char* role, std::uint32_t rank) {
    kids.spawn(lo.self_exe, std::string(role) + " " + std::to_string(rank),
               {{kEnvRole, role},
                {kEnvRank, std::to_string(rank)},
                {kEnvSchedAddr, addr},
                {kEnvConfig, text}});
  };
  for (std::uint32_t s = 0; s < c.servers; ++s) spawn_node("server", s);
  for (std::uint32_t w = 0; w < c.workers; ++w) spawn_node("worker", w);
  while (auto ex = kids.wait_one()) {
    if (ex->code != 0) {
      kids.kill_all();
      throw ChildError("child " + ex->label + " exited with code " + std::to_string(ex->code),
                       ex->code);
    }
  }
  std::ifstream in(c.out);
  if (!in) throw Error("scheduler wrote no metrics to '" + c.out + "'");
  return train::read_metrics_csv(in);
}

// Runs training per the config and writes the metrics file.
inline std::vector<train::MetricsRecord> run_training(const RunConfig& c,
                                                      const LaunchOptions& lo = {}) {
  if (c.transport == TransportKind::tcp) return train_multi_process(c, lo);
  auto result = train_in_process(c);
  write_metrics_file(c, result.metrics);
  return result.metrics;
}

struct LaunchResult {
  int exit_code = kExitOk;
  std::string error;
};

template <typename Fn>
LaunchResult guarded(Fn&& fn) {
  try {
    fn();
    return {};
  } catch (...) {
    auto e = std::current_exception();
    return {exit_code_for(e), what_of(e)};
  }
}

inline LaunchResult launch(const RunConfig& c, const LaunchOptions& lo = {}) {
  return guarded([&] { run_training(c, lo); });
}

// ---------------------------------------------------------------------------
// Allreduce benchmark

struct BenchRow {
  std::uint64_t size_bytes = 0;
  std::string variant;
  std::size_t p = 0;
  double time_s = 0;
  double modeled_s = 0;
  std::uint64_t bytes_per_rank = 0;  // ring: max sent by a rank; naive: root ingress
  std::uint64_t steps = 0;
};

inline constexpr const char* kBenchHeader = "size_bytes,variant,p,time_s,modeled_s,bytes_per_rank,steps";

// Rough desk calibration of the cost model: per-step latency from a
// one-element two-rank allreduce, per-byte move and reduce costs from
// in-memory copy and add over 8 MiB.
inline CostParams calibrate_cost() {
  using secs = std::chrono::duration<double>;
  CostParams c;
  const std::size_t n = 1u << 20;
  std::vector<double> a(n, 1.0), b(n, 2.0);
  auto t0 = Clock::now();
  for (int r = 0; r < 4; ++r) std::copy(a.begin(), a.end(), b.begin());
  c.beta = secs(Clock::now() - t0).count() / (4.0 * n * sizeof(double));
  t0 = Clock::now();
  for (int r = 0; r < 4; ++r)
    for (std::size_t i = 0; i < n; ++i) b[i] += a[i];
  c.gamma = secs(Clock::now() - t0).count() / (4.0 * n * sizeof(double));
  if (b[0] < 0) c.gamma = 0;  // keeps the loop observable
  const int reps = 50;
  double total = 0;
  run_local_group(2, [&](Communicator& comm) {
    TensorGroup<double> g(0, 1, 1, 1.0);
    allreduce(comm, g, 1);
    auto s = Clock::now();
    for (int r = 0; r < reps; ++r) allreduce(comm, g, 1);
    if (comm.rank() == 0) total = secs(Clock::now() - s).count();
  });
  c.alpha = total / (reps * 2.0);
  return c;
}

inline std::vector<BenchRow> bench_allreduce(const RunConfig& c, std::ostream* progress = nullptr) {
  if (c.mode != kv::StoreMode::PureMpi) throw ConfigError("bench needs mode=pure-mpi");
  if (c.sizes.empty()) throw ConfigError("bench needs at least one size");
  if (c.reps == 0) throw ConfigError("reps must be positive");
  const std::size_t p = c.workers;
  auto cost = calibrate_cost();
  std::vector<BenchRow> rows;
  std::mt19937_64 rng(c.seed);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (auto size : c.sizes) {
    const std::size_t n = std::max<std::size_t>(1, size / sizeof(double));
    std::vector<TensorGroup<double>> inputs;
    for (std::size_t r = 0; r < p; ++r) {
      TensorGroup<double> g(0, c.lanes, n);
      for (auto& lane : g.lanes)
        for (auto& x : lane) x = dist(rng);
      inputs.push_back(std::move(g));
    }
    for (std::string variant : {"ring1", "ring2", "ring4", "naive"}) {
      BenchRow row;
      row.size_bytes = size;
      row.variant = variant;
      row.p = p;
      std::vector<double> times;
      for (std::size_t rep = 0; rep < c.reps; ++rep) {
        auto work = inputs;
        std::vector<double> rank_time(p);
        std::vector<CostLedger> ledgers(p);
        run_local_group(
            p,
            [&](Communicator& comm) {
              auto r = static_cast<std::size_t>(comm.rank());
              auto s = Clock::now();
              if (variant == "naive") ledgers[r] = naive_allreduce(comm, work[r]);
              else ledgers[r] = allreduce(comm, work[r], static_cast<std::size_t>(variant[4] - '0'));
              rank_time[r] = std::chrono::duration<double>(Clock::now() - s).count();
            },
            c.timeout());
        times.push_back(*std::max_element(rank_time.begin(), rank_time.end()));
        row.steps = ledgers[0].comm_steps;
        row.bytes_per_rank = 0;
        if (variant == "naive") {
          row.bytes_per_rank = ledgers[0].elements_received_per_rank * sizeof(double);
        } else {
          for (const auto& l : ledgers)
            row.bytes_per_rank = std::max<std::uint64_t>(row.bytes_per_rank,
                                                         l.elements_sent_per_rank * sizeof(double));
        }
      }
      std::sort(times.begin(), times.end());
      row.time_s = times[times.size() / 2];
      double bytes = static_cast<double>(n * sizeof(double));
      row.modeled_s = variant == "naive" ? predict_naive_cost(p, bytes, cost)
                                         : predict_cost(p, bytes, cost);
      if (progress)
        *progress << "bench " << size << " bytes " << variant << ": " << row.time_s << " s\n";
      rows.push_back(row);
    }
  }
  return rows;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << kBenchHeader << '\n';
  for (const auto& r : rows)
    os << r.size_bytes << ',' << r.variant << ',' << r.p << ',' << r.time_s << ',' << r.modeled_s
       << ',' << r.bytes_per_rank << ',' << r.steps << '\n';
}

// ---------------------------------------------------------------------------
// Six-mode comparison

struct ModeCase {
  std::string name;
  kv::StoreMode mode;
  train::Algorithm algo;
};

inline const std::vector<ModeCase>& six_modes() {
  using kv::StoreMode;
  using train::Algorithm;
  static const std::vector<ModeCase> cases = {
      {"dist-sgd", StoreMode::Sync, Algorithm::sgd},
      {"dist-asgd", StoreMode::Async, Algorithm::asgd},
      {"dist-esgd", StoreMode::Async, Algorithm::esgd},
      {"mpi-sgd", StoreMode::SyncMpi, Algorithm::sgd},
      {"mpi-asgd", StoreMode::AsyncMpi, Algorithm::asgd},
      {"mpi-esgd", StoreMode::AsyncMpi, Algorithm::esgd},
  };
  return cases;
}

// The base config with mode and algorithm replaced; dist- modes use one
// client per worker, mpi- modes keep the base config's clients.
inline RunConfig config_for_case(const RunConfig& base, const ModeCase& mc) {
  RunConfig c = base;
  c.mode = mc.mode;
  c.algo = train::to_string(mc.algo);
  if (!kv::groups_aggregate(mc.mode)) c.clients = c.workers;
  if (c.servers == 0) c.servers = 1;
  c.out = base.out + "." + mc.name + ".csv";
  return c;
}

struct SummaryRow {
  std::string mode;
  double final_val_acc = 0;
  double total_time_s = 0;
  std::uint64_t server_in_bytes = 0;
  std::size_t epochs = 0;
};

inline constexpr const char* kSummaryHeader = "mode,final_val_acc,total_time_s,server_in_bytes,epochs";

struct CompareReport {
  std::vector<SummaryRow> summary;
  std::map<std::string, std::vector<train::MetricsRecord>> metrics;
};

inline CompareReport compare_modes(const RunConfig& base, const LaunchOptions& lo = {},
                                   std::ostream* progress = nullptr) {
  CompareReport report;
  for (const auto& mc : six_modes()) {
    auto c = config_for_case(base, mc);
    auto m = run_training(c, lo);
    SummaryRow row;
    row.mode = mc.name;
    row.epochs = m.size();
    if (!m.empty()) row.final_val_acc = m.back().val_acc;
    for (const auto& r : m) {
      row.total_time_s += r.epoch_time_s;
      row.server_in_bytes += r.server_in_bytes;
    }
    if (progress)
      *progress << mc.name << ": val_acc " << row.final_val_acc << " in " << row.total_time_s
                << " s\n";
    report.summary.push_back(row);
    report.metrics[mc.name] = std::move(m);
  }
  std::ofstream f(base.out + ".summary.csv");
  if (!f) throw ConfigError("cannot write '" + base.out + ".summary.csv'");
  f << kSummaryHeader << '\n';
  for (const auto& r : report.summary)
    f << r.mode << ',' << r.final_val_acc << ',' << r.total_time_s << ',' << r.server_in_bytes << ','
      << r.epochs << '\n';
  return report;
}

}  // namespace hps::launcher
