// SPDX-License-Identifier: Apache-2.0
// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any failed.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "hybridps/kvstore/cluster.hpp"
#include "hybridps/launcher/launcher.hpp"
#include "hybridps/optimizers.hpp"
#include "hybridps/trainer/run.hpp"
#include "hybridps/transport/inproc.hpp"
#include "hybridps/transport/tcp.hpp"
#include "support/collective_oracle.hpp"
#include "support/hb_checker.hpp"
#include "support/serial_oracle.hpp"
#include "support/transport_script.hpp"

using namespace hps;
using namespace std::chrono_literals;
using kv::StoreMode;
using transport::NodeId;
using transport::Topology;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& fn) {
  auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail
            << " (" << std::setprecision(3) << secs << " s)" << std::endl;
}

template <typename... Args>
std::string fmt(Args&&... args) {
  std::ostringstream os;
  os << std::setprecision(4);
  (os << ... << args);
  return os.str();
}

const std::vector<std::size_t> kSizes = {1, 7, 64, 100000};
const std::vector<std::size_t> kLanes = {1, 2, 4};
const std::vector<std::size_t> kRings = {1, 2, 4};
constexpr int kTrials = 50;

// Criteria 1 and 3 share the same inputs: every trial runs all ring counts.
struct CollectiveSweep {
  double worst_vs_oracle = 0;
  double worst_between_rings = 0;
  std::size_t runs = 0;
};

CollectiveSweep sweep_collectives() {
  CollectiveSweep s;
  std::uint64_t seed = 1;
  for (std::size_t p = 1; p <= 8; ++p)
    for (auto lanes : kLanes)
      for (auto n : kSizes)
        for (int trial = 0; trial < kTrials; ++trial) {
          auto inputs = testkit::random_inputs<double>(p, lanes, n, seed++);
          auto oracle = testkit::oracle_sum(inputs);
          std::vector<TensorGroup<double>> first;
          for (auto rings : kRings) {
            auto run = testkit::run_allreduce(inputs, rings);
            ++s.runs;
            s.worst_vs_oracle = std::max(s.worst_vs_oracle, testkit::max_rel_error(run.results, oracle));
            if (first.empty()) {
              first = run.results;
              continue;
            }
            for (std::size_t r = 0; r < p; ++r)
              for (std::size_t l = 0; l < lanes; ++l)
                for (std::size_t i = 0; i < n; ++i) {
                  double a = first[r].lanes[l][i], b = run.results[r].lanes[l][i];
                  double scale = std::max(oracle.magnitude[i], 1e-300);
                  s.worst_between_rings = std::max(s.worst_between_rings, std::abs(a - b) / scale);
                }
          }
        }
  return s;
}

Outcome bandwidth() {
  std::size_t exact_cases = 0, bound_cases = 0;
  for (std::size_t p = 1; p <= 8; ++p)
    for (std::size_t n : {std::size_t{1}, std::size_t{7}, std::size_t{64}, std::size_t{840},
                          std::size_t{1001}, std::size_t{100000}})
      for (auto rings : kRings) {
        std::vector<TensorGroup<double>> inputs;
        for (std::size_t r = 0; r < p; ++r) inputs.emplace_back(0, 1, n, 1.0);
        auto run = testkit::run_allreduce(inputs, rings);
        for (std::size_t r = 0; r < p; ++r) {
          const auto& l = run.ledgers[r];
          if (n % p == 0) {
            ++exact_cases;
            std::uint64_t want = 2 * n * (p - 1) / p;
            if (l.elements_sent_per_rank != want || l.comm_steps != 2 * (p - 1))
              return {false, fmt("p=", p, " n=", n, " rings=", rings, " rank=", r, ": sent ",
                                 l.elements_sent_per_rank, " (want ", want, "), steps ", l.comm_steps,
                                 " (want ", 2 * (p - 1), ")")};
          } else {
            ++bound_cases;
            double bound = 2.0 * static_cast<double>(n) * static_cast<double>(p - 1) /
                           static_cast<double>(p);
            double off = std::abs(static_cast<double>(l.elements_sent_per_rank) - bound);
            if (off > static_cast<double>(p))
              return {false, fmt("p=", p, " n=", n, " rings=", rings, " rank=", r, ": sent ",
                                 l.elements_sent_per_rank, ", bound ", bound)};
          }
        }
      }
  return {true, fmt(exact_cases, " exact rank ledgers, ", bound_cases, " within p of the bound")};
}

std::uint64_t pushes_for_key(StoreMode mode, Topology topo, std::uint32_t key, int iterations) {
  auto reg = transport::connect_all_inproc(topo);
  std::mutex mu;
  std::uint64_t pushes = 0;
  kv::ClusterOptions opts;
  opts.mode = mode;
  opts.timeout = 20000ms;
  opts.on_server_done = [&](const kv::Server& s) {
    std::lock_guard lock(mu);
    auto stats = s.stats();
    auto it = stats.pushes_per_key.find(key);
    if (it != stats.pushes_per_key.end()) pushes += it->second;
  };
  kv::run_cluster(reg, opts, [&](std::shared_ptr<transport::Endpoint> ep) {
    kv::KVStore::Options o;
    o.mode = mode;
    o.topology = topo;
    o.rings = 2;
    o.timeout = 20000ms;
    kv::KVStore store(ep, o);
    TensorGroup<double> w0(0, 2, 32), w1(1, 2, 5);
    store.init(0, w0);
    store.init(1, w1);
    for (int it = 0; it < iterations; ++it) {
      TensorGroup<double> g0(0, 2, 32, 1.0), g1(1, 2, 5, 1.0);
      store.push(0, g0);
      store.push(1, g1);
      store.pull(0, w0);
      store.pull(1, w1);
      store.wait_all();
    }
    store.shutdown();
  });
  return pushes;
}

Outcome contention() {
  const int iterations = 10;
  std::uint64_t grouped = pushes_for_key(StoreMode::SyncMpi, Topology{12, 1, 2}, 0, iterations);
  std::uint64_t flat = pushes_for_key(StoreMode::Sync, Topology{12, 1, 12}, 0, iterations);
  std::uint64_t grouped1 = pushes_for_key(StoreMode::SyncMpi, Topology{12, 2, 2}, 1, iterations);
  std::uint64_t flat1 = pushes_for_key(StoreMode::Sync, Topology{12, 2, 12}, 1, iterations);
  bool ok = grouped == 2u * iterations && flat == 12u * iterations &&
            grouped1 == 2u * iterations && flat1 == 12u * iterations;
  return {ok, fmt("per iteration per key: grouped ", grouped / iterations, "/", grouped1 / iterations,
                  ", singleton ", flat / iterations, "/", flat1 / iterations, " (", iterations,
                  " iterations, 1 and 2 servers)")};
}

Outcome sync_trajectory() {
  auto data = train::gaussian_blobs(2, 16, 6.0, 4096, 512, 5);
  train::Model m{train::ModelKind::logistic, 16, 2};
  const std::size_t epochs = 5, batch = 32;
  const double lr = 0.5;
  double worst = 0;
  for (Topology topo : {Topology{4, 1, 1}, Topology{4, 1, 2}, Topology{4, 2, 2}}) {
    train::RunSetup s;
    s.mode = StoreMode::SyncMpi;
    s.topology = topo;
    s.timeout = 30000ms;
    s.model = m;
    s.train.algo = train::Algorithm::sgd;
    s.train.epochs = epochs;
    s.train.batch_size = batch;
    s.train.lanes = 2;
    s.train.lr = lr;
    s.train.seed = 7;
    std::mutex mu;
    std::map<std::uint32_t, std::vector<train::Params>> got;
    s.train.on_epoch_end = [&](std::uint32_t rank, std::size_t, const train::Params& p) {
      std::lock_guard lock(mu);
      got[rank].push_back(p);
    };
    auto reg = transport::connect_all_inproc(topo);
    train::train_cluster(reg, data, s);
    auto want = testkit::serial_sgd(data, m, 4, batch, lr, epochs, s.train.seed);
    if (got.size() != 4) return {false, fmt(got.size(), " workers reported")};
    for (const auto& [rank, per_epoch] : got) {
      if (per_epoch.size() != epochs) return {false, fmt("rank ", rank, " ran ", per_epoch.size(), " epochs")};
      for (std::size_t e = 0; e < epochs; ++e) worst = std::max(worst, testkit::max_abs_diff(per_epoch[e], want[e]));
    }
  }
  return {worst <= 1e-8, fmt("max |w - w_serial| = ", worst, " over 5 epochs, 3 groupings")};
}

double ulp(double x) { return std::nextafter(std::abs(x), INFINITY) - std::abs(x); }

Outcome elastic_algebra() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> mant(-1.0, 1.0), alpha_dist(0.0, 1.0);
  std::uniform_int_distribution<int> expo(-20, 20);
  double worst_sum_ulps = 0, worst_gap = 0;
  for (int t = 0; t < 10000; ++t) {
    std::vector<double> w(8), c(8);
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] = std::ldexp(mant(rng), expo(rng));
      c[i] = std::ldexp(mant(rng), expo(rng));
    }
    double alpha = alpha_dist(rng);
    if (alpha == 0) alpha = 0.5;
    auto c2 = optim::elastic_center_update(c, w, alpha);
    auto w2 = optim::elastic_local_update(w, c, alpha);
    for (std::size_t i = 0; i < w.size(); ++i) {
      double drift = std::abs((w2[i] + c2[i]) - (w[i] + c[i]));
      double unit = ulp(std::max(std::abs(w[i]), std::abs(c[i])));
      worst_sum_ulps = std::max(worst_sum_ulps, drift / unit);
      // gap error relative to the operands' magnitude, which span 2^-20..2^20
      double gap = std::abs(w2[i] - c2[i]);
      double want = std::abs(1 - 2 * alpha) * std::abs(w[i] - c[i]);
      worst_gap = std::max(worst_gap, std::abs(gap - want) / std::max(std::abs(w[i]), std::abs(c[i])));
    }
  }
  return {worst_sum_ulps <= 2 && worst_gap <= 1e-12,
          fmt("sum drift <= ", worst_sum_ulps, " ulp, relative gap error ", worst_gap, " over 1e4 triples")};
}

Outcome gradient_oracle() {
  std::mt19937_64 rng(99);
  double worst = 0;
  for (int draw = 0; draw < 100; ++draw) {
    std::size_t classes = 2 + rng() % 3, dim = classes + rng() % 8, hidden = 2 + rng() % 6;
    std::size_t batch_n = 1 + rng() % 16;
    train::Model m{draw % 2 ? train::ModelKind::mlp : train::ModelKind::logistic, dim, classes, hidden};
    auto data = train::gaussian_blobs(classes, dim, 1.0 + static_cast<double>(rng() % 40) / 10.0,
                                      batch_n, 0, rng());
    auto p = train::init_params(m, rng());
    std::normal_distribution<double> bias(0.0, 0.3);
    for (std::size_t k = 1; k < p.size(); k += 2)
      for (auto& b : p[k]) b = bias(rng);
    std::vector<const train::Sample*> batch;
    for (const auto& s : data.train) batch.push_back(&s);
    worst = std::max(worst, testkit::gradient_check(m, p, batch));
  }
  return {worst < 1e-5, fmt("worst relative mismatch ", worst, " over 100 draws")};
}

std::filesystem::path scratch_dir() {
  auto dir = std::filesystem::temp_directory_path() / ("hps_acceptance_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

launcher::RunConfig convergence_config() {
  launcher::RunConfig c;
  c.workers = 4;
  c.clients = 2;
  c.servers = 1;
  c.epochs = 20;
  c.batch_size = 32;  // 2500 samples per worker: 78 iterations per epoch
  c.lr = 0.5;
  c.interval = 64;
  c.rings = 2;
  c.lanes = 2;
  c.dataset.kind = train::DatasetKind::blobs;
  c.dataset.classes = 2;
  c.dataset.dim = 16;
  c.dataset.train_size = 10000;
  c.dataset.test_size = 2000;
  c.timeout_ms = 60000;
  c.out = (scratch_dir() / "compare").string();
  return c;
}

Outcome convergence(const launcher::CompareReport& r) {
  if (r.summary.size() != 6) return {false, fmt(r.summary.size(), " modes ran")};
  bool ok = true;
  std::ostringstream os;
  for (const auto& row : r.summary) {
    const auto& m = r.metrics.at(row.mode);
    std::size_t first = 0;
    for (const auto& rec : m)
      if (rec.val_acc >= 0.98) {
        first = rec.epoch;
        break;
      }
    if (first == 0 || first > 20) ok = false;
    os << row.mode << " acc " << std::setprecision(4) << row.final_val_acc << " (>=0.98 at epoch "
       << first << ") ";
  }
  return {ok, os.str()};
}

Outcome esgd_messages(const launcher::CompareReport& r, const launcher::RunConfig& base) {
  const std::size_t keys = 2;
  std::ostringstream os;
  bool ok = true;
  auto total_msgs = [&](const std::string& mode) {
    std::uint64_t n = 0;
    for (const auto& rec : r.metrics.at(mode)) n += rec.server_in_msgs;
    return n;
  };
  for (const auto& [esgd, others] :
       {std::pair<std::string, std::vector<std::string>>{"dist-esgd", {"dist-sgd", "dist-asgd"}},
        std::pair<std::string, std::vector<std::string>>{"mpi-esgd", {"mpi-sgd", "mpi-asgd"}}}) {
    launcher::ModeCase mc{};
    for (const auto& c : launcher::six_modes())
      if (c.name == esgd) mc = c;
    auto cfg = launcher::config_for_case(base, mc);
    std::size_t clients = cfg.clients;
    std::size_t iterations = (cfg.dataset.train_size / cfg.workers) / cfg.batch_size;
    if (iterations < 64) return {false, fmt("only ", iterations, " iterations per epoch")};
    std::uint64_t cap = (iterations / 64 + 1) * keys * 2 * clients;
    for (const auto& rec : r.metrics.at(esgd))
      if (rec.server_in_msgs > cap) {
        ok = false;
        os << esgd << " epoch " << rec.epoch << " sent " << rec.server_in_msgs << " > " << cap << "; ";
      }
    std::uint64_t mine = total_msgs(esgd);
    os << esgd << " " << mine << " msgs (cap " << cap << "/epoch)";
    for (const auto& other : others) {
      std::uint64_t theirs = total_msgs(other);
      double ratio = mine == 0 ? INFINITY : static_cast<double>(theirs) / static_cast<double>(mine);
      if (mine == 0 || ratio < 30) ok = false;
      os << ", " << other << " " << theirs << " (" << std::setprecision(3) << ratio << "x)";
    }
    os << "; ";
  }
  return {ok, os.str()};
}

Outcome engine_safety() {
  auto r = testkit::stress_engine(10000, 32, 4, 31);
  return {r.violations == 0 && r.admission_in_order && r.executed == 10000,
          fmt(r.executed, " executed, ", r.violations, " happens-before violations, admission ",
              r.admission_in_order ? "in order" : "OUT OF ORDER")};
}

std::uint32_t le32(const Bytes& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
         static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

Outcome transport_differential() {
  Bytes header = transport::encode_frame(NodeId::worker(0x01020304), 0x11,
                                         Bytes{std::byte{0xAA}, std::byte{0xBB}, std::byte{0xCC}});
  std::vector<int> want{0x58, 0x4D, 0x11, 0x02, 0x04, 0x03, 0x02, 0x01,
                        0x03, 0x00, 0x00, 0x00, 0x00, 0xAA, 0xBB, 0xCC};
  if (header.size() != want.size()) return {false, "encoded frame has the wrong size"};
  for (std::size_t i = 0; i < want.size(); ++i)
    if (std::to_integer<int>(header[i]) != want[i]) return {false, fmt("header byte ", i, " differs")};

  Topology topo{4, 2, 2};
  auto script = testkit::make_script(topo, 400, 5);
  testkit::TapRecorder rec_a, rec_b;
  transport::InProcNetwork::Options in_opts;
  in_opts.tap = rec_a.tap();
  auto inproc = transport::connect_all_inproc(topo, in_opts);
  auto a = testkit::replay(inproc, rec_a, script, 5000ms);
  transport::tcp::Options tcp_opts;
  tcp_opts.tap = rec_b.tap();
  auto tcp = transport::tcp::connect_all_local(topo, tcp_opts);
  auto b = testkit::replay(tcp, rec_b, script, 5000ms);
  tcp.close_all();
  if (a.wire != b.wire) return {false, "wire bytes differ"};
  if (a.delivered != b.delivered) return {false, "delivered payloads differ"};
  if (a.sent != b.sent || a.received != b.received) return {false, "link counters differ"};

  // Every captured frame, decoded by hand against the documented layout.
  std::map<testkit::LinkKey, std::vector<const testkit::ScriptedSend*>> by_link;
  for (const auto& s : script) by_link[{s.src, s.dst}].push_back(&s);
  std::size_t frames = 0;
  for (const auto& [link, wires] : b.wire) {
    const auto& sends = by_link[link];
    if (wires.size() != sends.size()) return {false, "frame count differs from the script"};
    for (std::size_t i = 0; i < wires.size(); ++i) {
      const auto& w = wires[i];
      const auto& s = *sends[i];
      bool ok = w.size() == 13 + s.payload.size() && w[0] == std::byte{0x58} &&
                w[1] == std::byte{0x4D} && std::to_integer<std::uint8_t>(w[2]) == s.tag &&
                std::to_integer<std::uint8_t>(w[3]) == static_cast<std::uint8_t>(s.src.role) &&
                le32(w, 4) == s.src.rank && le32(w, 8) == s.payload.size() && w[12] == std::byte{0} &&
                std::equal(s.payload.begin(), s.payload.end(), w.begin() + 13);
      if (!ok) return {false, fmt("frame ", i, " on ", transport::to_string(link.first), "->",
                                  transport::to_string(link.second), " breaks the header layout")};
      ++frames;
    }
  }
  return {true, fmt(frames, " frames byte-identical across backends and matching the 13-byte header")};
}

}  // namespace

int main() {
  set_log_level(LogLevel::error);

  CollectiveSweep sweep;
  report(1, "allreduce matches the global-sum oracle", [&] {
    sweep = sweep_collectives();
    return Outcome{sweep.worst_vs_oracle <= 1e-12,
                   fmt("worst relative error ", sweep.worst_vs_oracle, " over ", sweep.runs,
                       " allreduces (p 1..8, L 1/2/4, n 1/7/64/1e5, 50 trials)")};
  });
  report(2, "ring volume meets the bandwidth bound", bandwidth);
  report(3, "ring counts agree", [&] {
    return Outcome{sweep.runs > 0 && sweep.worst_between_rings <= 1e-12,
                   fmt("worst relative difference across rings 1/2/4: ", sweep.worst_between_rings)};
  });
  report(4, "grouped push contention", contention);
  report(5, "grouped sync run follows serial SGD", sync_trajectory);
  report(6, "elastic update algebra", elastic_algebra);
  report(7, "analytic gradients match finite differences", gradient_oracle);

  auto base = convergence_config();
  launcher::CompareReport cmp;
  bool compared = false;
  report(8, "six modes converge on blobs", [&] {
    cmp = launcher::compare_modes(base);
    compared = true;
    return convergence(cmp);
  });
  report(9, "elastic exchanges avoid communication", [&] {
    if (!compared) return Outcome{false, "the six-mode run did not complete"};
    return esgd_messages(cmp, base);
  });
  std::error_code ec;
  std::filesystem::remove_all(std::filesystem::path(base.out).parent_path(), ec);

  report(10, "engine stress keeps tag ordering", engine_safety);
  report(11, "transport backends are byte-identical", transport_differential);

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
