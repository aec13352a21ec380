// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "hybridps/trainer/run.hpp"
#include "hybridps/transport/inproc.hpp"
#include "support/serial_oracle.hpp"

using namespace hps;
using namespace hps::train;
using kv::StoreMode;
using transport::Topology;
using namespace std::chrono_literals;

namespace {

Dataset small_blobs(std::size_t n_train = 2048, std::size_t d = 16, std::uint64_t seed = 3) {
  return gaussian_blobs(2, d, 6.0, n_train, 512, seed);
}

RunSetup setup_for(StoreMode mode, Topology topo, Model model, std::size_t epochs,
                   std::size_t batch, std::size_t lanes, double lr) {
  RunSetup s;
  s.mode = mode;
  s.topology = topo;
  s.timeout = 20000ms;
  s.model = model;
  s.train.algo = default_algorithm(mode);
  s.train.epochs = epochs;
  s.train.batch_size = batch;
  s.train.lanes = lanes;
  s.train.lr = lr;
  s.train.seed = 11;
  return s;
}

// Runs training and returns every worker's parameters after every epoch.
std::map<std::uint32_t, std::vector<Params>> run_and_capture(const Dataset& data, RunSetup setup,
                                                             TrainResult* result = nullptr) {
  std::mutex mu;
  std::map<std::uint32_t, std::vector<Params>> out;
  setup.train.on_epoch_end = [&](std::uint32_t rank, std::size_t, const Params& p) {
    std::lock_guard lock(mu);
    out[rank].push_back(p);
  };
  auto reg = transport::connect_all_inproc(setup.topology);
  auto r = train_cluster(reg, data, setup);
  if (result) *result = r;
  return out;
}

}  // namespace

TEST(Dataset, BlobsAreSeededAndBalanced) {
  auto a = small_blobs(100), b = small_blobs(100);
  ASSERT_EQ(a.train.size(), 100u);
  ASSERT_EQ(a.test.size(), 512u);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].x, b.train[i].x);
    EXPECT_EQ(a.train[i].label, i % 2);
  }
  auto c = small_blobs(100, 16, 4);
  EXPECT_NE(a.train[0].x, c.train[0].x);
  // test samples are later draws from the same stream, never copies
  std::set<std::vector<double>> train_x;
  for (const auto& s : a.train) train_x.insert(s.x);
  for (const auto& s : a.test) EXPECT_FALSE(train_x.count(s.x));
  EXPECT_THROW(gaussian_blobs(3, 2, 6, 10, 10, 1), ConfigError);
}

TEST(Dataset, TwoMoonsShape) {
  auto d = two_moons(200, 50, 0.1, 5);
  EXPECT_EQ(d.dim, 2u);
  EXPECT_EQ(d.classes, 2u);
  EXPECT_EQ(d.train.size(), 200u);
  for (const auto& s : d.train) EXPECT_EQ(s.x.size(), 2u);
}

TEST(Dataset, CsvFile) {
  auto path = std::filesystem::temp_directory_path() / "hps_trainer_data.csv";
  {
    std::ofstream f(path);
    for (int i = 0; i < 50; ++i) f << i % 3 << ',' << i << ',' << -i << '\n';
  }
  auto d = load_csv(path.string(), 10, 1);
  EXPECT_EQ(d.dim, 2u);
  EXPECT_EQ(d.classes, 3u);
  EXPECT_EQ(d.train.size() + d.test.size(), 50u);
  EXPECT_EQ(d.test.size(), 10u);
  std::filesystem::remove(path);
  EXPECT_THROW(load_csv("/nonexistent/file.csv", 1, 1), ConfigError);
}

TEST(Shard, RemainderRule) {
  auto s = shard_data(10, 3, 1);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].size(), 4u);
  EXPECT_EQ(s[1].size(), 3u);
  EXPECT_EQ(s[2].size(), 3u);
}

TEST(Shard, DisjointCoverAndDeterministic) {
  auto s = shard_data(1001, 7, 42);
  std::set<std::size_t> all;
  std::size_t total = 0;
  for (const auto& shard : s) {
    total += shard.size();
    all.insert(shard.begin(), shard.end());
  }
  EXPECT_EQ(total, 1001u);
  EXPECT_EQ(all.size(), 1001u);
  EXPECT_EQ(*all.rbegin(), 1000u);
  EXPECT_EQ(shard_data(1001, 7, 42), s);
  EXPECT_NE(shard_data(1001, 7, 43), s);
  EXPECT_THROW(shard_data(2, 3, 1), ConfigError);
}

TEST(Model, LogisticGradientAtDecisionBoundary) {
  // d=2, zero weights: both classes at probability 1/2, so the gradient of
  // W is (p - onehot) x^T with entries +-x_i/2 and the bias gradient is +-1/2.
  Model m{ModelKind::logistic, 2, 2};
  Params p{std::vector<double>(4, 0.0), std::vector<double>(2, 0.0)};
  Sample s{{3.0, -4.0}, 1};
  const Sample* batch[] = {&s};
  auto lg = forward_backward(m, p, batch);
  EXPECT_NEAR(lg.loss, std::log(2.0), 1e-15);
  EXPECT_EQ(lg.grad[0], (std::vector<double>{1.5, -2.0, -1.5, 2.0}));
  EXPECT_EQ(lg.grad[1], (std::vector<double>{0.5, -0.5}));
  double norm = 0;
  for (double g : lg.grad[0]) norm += g * g;
  EXPECT_NEAR(std::sqrt(norm), 5.0 / std::sqrt(2.0), 1e-15);
}

TEST(Model, SymmetricBalancedBatchHasZeroBiasGradient) {
  Model m{ModelKind::logistic, 4, 2};
  Params p{std::vector<double>(8, 0.0), std::vector<double>(2, 0.0)};
  Sample a{{1, 2, 3, 4}, 0}, b{{-1, -2, -3, -4}, 1};
  const Sample* batch[] = {&a, &b};
  auto lg = forward_backward(m, p, batch);
  EXPECT_NEAR(lg.grad[1][0], 0.0, 1e-15);
  EXPECT_NEAR(lg.grad[1][1], 0.0, 1e-15);
}

TEST(Model, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(17);
  for (int draw = 0; draw < 20; ++draw) {
    Model m{draw % 2 ? ModelKind::mlp : ModelKind::logistic, 5, 3, 4};
    auto data = gaussian_blobs(3, 5, 2.0, 6, 0, rng());
    auto p = init_params(m, rng());
    for (auto& b : p[1]) b = 0.1 * static_cast<double>(rng() % 7);
    std::vector<const Sample*> batch;
    for (const auto& s : data.train) batch.push_back(&s);
    EXPECT_LT(testkit::gradient_check(m, p, batch), 1e-5) << "draw " << draw;
  }
}

TEST(Model, NonFiniteLossDiverges) {
  Model m{ModelKind::logistic, 2, 2};
  Params p{{NAN, 0, 0, 0}, {0, 0}};
  Sample s{{1, 1}, 0};
  const Sample* batch[] = {&s};
  EXPECT_THROW(forward_backward(m, p, batch), DivergenceError);
}

TEST(Model, ShapesAndInit) {
  Model lr{ModelKind::logistic, 16, 2};
  EXPECT_EQ(lr.shapes(), (std::vector<std::size_t>{32, 2}));
  Model mlp{ModelKind::mlp, 16, 2, 8};
  EXPECT_EQ(mlp.shapes(), (std::vector<std::size_t>{128, 8, 16, 2}));
  EXPECT_EQ(init_params(mlp, 3), init_params(mlp, 3));
  EXPECT_THROW(mlp.check(init_params(lr, 3)), ShapeError);
}

TEST(BatchPlanTest, MiniBatchPerAlgorithm) {
  Topology t{8, 1, 2};
  auto sync = make_batch_plan(Algorithm::sgd, t, 32, 10000);
  EXPECT_EQ(sync.mini_batch_size, 8u * 32);
  EXPECT_EQ(sync.iterations, (10000u / 8) / 32);
  auto async = make_batch_plan(Algorithm::asgd, t, 32, 10000);
  EXPECT_EQ(async.mini_batch_size, 4u * 32);
  auto elastic = make_batch_plan(Algorithm::esgd, t, 32, 10000);
  EXPECT_EQ(elastic.mini_batch_size, 4u * 32);
  EXPECT_THROW(make_batch_plan(Algorithm::sgd, t, 2000, 10000), ConfigError);
  EXPECT_THROW(check_algorithm(StoreMode::Async, Algorithm::sgd), ConfigError);
  EXPECT_THROW(check_algorithm(StoreMode::SyncMpi, Algorithm::esgd), ConfigError);
}

TEST(Metrics, EncodeMergeAndCsv) {
  MetricsRecord a{1, 0.5, 0.9, 1.0, 3, 4, 100, 2};
  MetricsRecord b{1, 0.7, 0.1, 3.0, 5, 4, 50, 1};
  EXPECT_EQ(decode_metrics(encode_metrics({a, b})), (std::vector<MetricsRecord>{a, b}));
  auto m = merge_metrics({{0, {a}}, {1, {b}}});
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].epoch_time_s, 0.7);
  EXPECT_EQ(m[0].val_acc, 0.9);
  EXPECT_EQ(m[0].mean_staleness, 2.0);
  EXPECT_EQ(m[0].max_staleness, 5u);
  EXPECT_EQ(m[0].server_in_bytes, 150u);
  std::ostringstream os;
  write_metrics_csv(os, "r1", "sync", m);
  std::string first_line = os.str().substr(0, os.str().find('\n'));
  EXPECT_EQ(first_line, kMetricsHeader);
  EXPECT_NE(os.str().find("\nr1,sync,1,"), std::string::npos);
}

TEST(SyncSgd, SingleWorkerIsBitIdenticalToSerial) {
  auto data = small_blobs(1024);
  Model m{ModelKind::logistic, 16, 2};
  auto setup = setup_for(StoreMode::Sync, Topology{1, 1, 1}, m, 3, 32, 1, 0.5);
  auto got = run_and_capture(data, setup);
  auto want = testkit::serial_sgd(data, m, 1, 32, 0.5, 3, setup.train.seed);
  ASSERT_EQ(got[0].size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(got[0][e], want[e]) << "epoch " << e;
}

TEST(SyncSgd, GroupedRunMatchesSerialOracle) {
  auto data = small_blobs(2048);
  Model m{ModelKind::logistic, 16, 2};
  for (auto [mode, topo] : {std::pair{StoreMode::SyncMpi, Topology{4, 1, 2}},
                            std::pair{StoreMode::Sync, Topology{4, 2, 4}},
                            std::pair{StoreMode::PureMpi, Topology{4, 0, 1}}}) {
    auto setup = setup_for(mode, topo, m, 3, 16, 2, 0.3);
    auto got = run_and_capture(data, setup);
    auto want = testkit::serial_sgd(data, m, 4, 16, 0.3, 3, setup.train.seed);
    for (const auto& [rank, epochs] : got) {
      ASSERT_EQ(epochs.size(), 3u);
      for (std::size_t e = 0; e < 3; ++e)
        EXPECT_LT(testkit::max_abs_diff(epochs[e], want[e]), 1e-8)
            << kv::to_string(mode) << " rank " << rank << " epoch " << e;
    }
  }
}

TEST(SyncSgd, MlpGroupedRunMatchesSerialOracle) {
  auto data = small_blobs(1024, 6);
  Model m{ModelKind::mlp, 6, 2, 5};
  auto setup = setup_for(StoreMode::SyncMpi, Topology{4, 2, 2}, m, 2, 16, 3, 0.2);
  auto got = run_and_capture(data, setup);
  auto want = testkit::serial_sgd(data, m, 4, 16, 0.2, 2, setup.train.seed);
  for (const auto& [rank, epochs] : got)
    for (std::size_t e = 0; e < 2; ++e) EXPECT_LT(testkit::max_abs_diff(epochs[e], want[e]), 1e-8);
}

TEST(SyncSgd, BlobsReachAccuracyBarWithZeroStaleness) {
  auto data = gaussian_blobs(2, 16, 6.0, 4000, 1000, 9);
  Model m{ModelKind::logistic, 16, 2};
  TrainResult r;
  run_and_capture(data, setup_for(StoreMode::SyncMpi, Topology{4, 1, 2}, m, 5, 32, 2, 0.5), &r);
  ASSERT_EQ(r.metrics.size(), 5u);
  EXPECT_GE(r.metrics.back().val_acc, 0.98);
  for (const auto& rec : r.metrics) {
    EXPECT_EQ(rec.max_staleness, 0u);
    EXPECT_GT(rec.epoch_time_s, 0.0);
    EXPECT_GT(rec.server_in_bytes, 0u);
  }
}

TEST(AsyncSgd, SingleClientMatchesSync) {
  auto data = small_blobs(1024);
  Model m{ModelKind::logistic, 16, 2};
  auto sync = run_and_capture(data, setup_for(StoreMode::Sync, Topology{1, 1, 1}, m, 2, 32, 2, 0.4));
  TrainResult r;
  auto async =
      run_and_capture(data, setup_for(StoreMode::Async, Topology{1, 1, 1}, m, 2, 32, 2, 0.4), &r);
  for (std::size_t e = 0; e < 2; ++e) EXPECT_EQ(async[0][e], sync[0][e]);
  for (const auto& rec : r.metrics) EXPECT_EQ(rec.max_staleness, 0u);
}

TEST(AsyncSgd, IndependentWorkersObserveStaleness) {
  auto data = small_blobs(4096);
  Model m{ModelKind::logistic, 16, 2};
  TrainResult r;
  run_and_capture(data, setup_for(StoreMode::Async, Topology{4, 1, 4}, m, 3, 8, 1, 0.2), &r);
  double mean = 0;
  for (const auto& rec : r.metrics) mean += rec.mean_staleness;
  EXPECT_GT(mean, 0.0);
  EXPECT_GE(r.metrics.back().val_acc, 0.95);
}

TEST(ElasticSgd, HalfStrengthClosesGapAtEveryExchange) {
  auto data = small_blobs(512);
  Model m{ModelKind::logistic, 16, 2};
  Topology topo{1, 1, 1};
  auto setup = setup_for(StoreMode::AsyncMpi, topo, m, 2, 32, 1, 0.3);
  setup.train.algo = Algorithm::esgd;
  setup.train.alpha = 0.5;
  setup.train.interval = 1;
  auto reg = transport::connect_all_inproc(topo);
  Params final_params;
  std::vector<std::vector<double>> centers(2);
  kv::ClusterOptions co;
  co.mode = setup.mode;
  co.on_server_done = [&](const kv::Server& s) {
    for (std::uint32_t k = 0; k < 2; ++k) centers[k] = *s.entry(k)->center;
  };
  kv::run_cluster(reg, co, [&](std::shared_ptr<transport::Endpoint> ep) {
    kv::KVStore store(ep, kv::KVStore::Options{setup.mode, topo, 2, 20000ms, 2});
    WorkerTrainer t(store, data, m, setup.train, topo);
    t.run();
    final_params = t.params();
    store.shutdown();
  });
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < centers[k].size(); ++i)
      EXPECT_NEAR(final_params[k][i], centers[k][i], 1e-12);
}

TEST(ElasticSgd, TwoClientsConvergeWithFewServerMessages) {
  auto data = gaussian_blobs(2, 16, 6.0, 8192, 1000, 21);
  Model m{ModelKind::logistic, 16, 2};
  Topology topo{4, 1, 2};
  auto setup = setup_for(StoreMode::AsyncMpi, topo, m, 4, 16, 2, 0.5);
  setup.train.algo = Algorithm::esgd;
  setup.train.interval = 64;
  TrainResult r;
  run_and_capture(data, setup, &r);
  EXPECT_GE(r.metrics.back().val_acc, 0.98);
  std::size_t iterations = (8192 / 4) / 16;  // 128 per epoch
  std::uint64_t total = 0;
  for (const auto& rec : r.metrics) {
    // one push and one pull per key per client per exchange
    EXPECT_LE(rec.server_in_msgs, (iterations / 64 + 1) * 2 * 2 * 2);
    total += rec.server_in_msgs;
  }
  EXPECT_EQ(total, (4 * iterations / 64) * 2 * 2 * 2);
}

TEST(Drivers, WrongAlgorithmForModeRejected) {
  auto data = small_blobs(256);
  Model m{ModelKind::logistic, 16, 2};
  auto setup = setup_for(StoreMode::Sync, Topology{1, 1, 1}, m, 1, 32, 1, 0.1);
  setup.train.algo = Algorithm::asgd;
  auto reg = transport::connect_all_inproc(setup.topology);
  EXPECT_THROW(train_cluster(reg, data, setup), ConfigError);
}
