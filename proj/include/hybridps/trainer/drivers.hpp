// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training drivers for synchronous SGD, asynchronous SGD and elastic
// averaging SGD, each running on one worker against the key-value store.
//
// Every worker holds the full parameter set. A worker's batch is split
// across its lanes; each lane computes the summed gradient of its share.
// Each epoch runs the same number of batches on every worker, set by the
// smallest shard; a trailing partial batch is dropped.

#include <functional>

#include "hybridps/kvstore/client.hpp"
#include "hybridps/trainer/metrics.hpp"
#include "hybridps/trainer/model.hpp"

namespace hps::train {

enum class Algorithm { sgd, asgd, esgd };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::sgd: return "sgd";
    case Algorithm::asgd: return "asgd";
    case Algorithm::esgd: return "esgd";
  }
  return "?";
}

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "sgd") return Algorithm::sgd;
  if (s == "asgd") return Algorithm::asgd;
  if (s == "esgd") return Algorithm::esgd;
  throw ConfigError("unknown algorithm '" + std::string(s) + "'");
}

// The algorithm a mode runs when none is named.
inline Algorithm default_algorithm(kv::StoreMode mode) {
  return kv::is_sync(mode) ? Algorithm::sgd : Algorithm::asgd;
}

inline void check_algorithm(kv::StoreMode mode, Algorithm algo) {
  bool ok = algo == Algorithm::sgd ? kv::is_sync(mode) : !kv::is_sync(mode);
  if (!ok)
    throw ConfigError(to_string(algo) + " cannot run in " + kv::to_string(mode) + " mode");
}

struct TrainOptions {
  Algorithm algo = Algorithm::sgd;
  std::size_t epochs = 20;
  std::size_t batch_size = 128;  // per worker, across its lanes
  std::size_t lanes = 1;
  double lr = 0.1;
  double alpha = 0.5;
  std::size_t interval = 64;  // elastic exchange period, in iterations
  std::uint64_t seed = 1;     // parameter init and sharding
  // called on every worker after each epoch with its current parameters
  std::function<void(std::uint32_t rank, std::size_t epoch, const Params&)> on_epoch_end;
};

struct BatchPlan {
  std::size_t batch_size = 0;
  std::size_t mini_batch_size = 0;  // samples behind one parameter update
  std::size_t iterations = 0;       // per epoch
};

inline BatchPlan make_batch_plan(Algorithm algo,
                                 const transport::Topology& topo, std::size_t batch_size,
                                 std::size_t train_samples) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  BatchPlan plan;
  plan.batch_size = batch_size;
  std::size_t contributors = algo == Algorithm::sgd ? topo.workers : topo.workers_per_client();
  plan.mini_batch_size = contributors * batch_size;
  plan.iterations = (train_samples / topo.workers) / batch_size;
  if (plan.iterations == 0)
    throw ConfigError("shards of " + std::to_string(train_samples / topo.workers) +
                      " samples hold no full batch of " + std::to_string(batch_size));
  return plan;
}

// Batch `it` of a shard: samples [it*B, (it+1)*B).
inline std::vector<const Sample*> batch_samples(const Dataset& data,
                                                const std::vector<std::size_t>& shard,
                                                std::size_t it, std::size_t batch_size) {
  std::vector<const Sample*> out;
  out.reserve(batch_size);
  for (std::size_t i = it * batch_size; i < (it + 1) * batch_size; ++i)
    out.push_back(&data.train[shard[i]]);
  return out;
}

class WorkerTrainer {
 public:
  WorkerTrainer(kv::KVStore& kv, const Dataset& data, Model model, TrainOptions opts,
                const transport::Topology& topo)
      : kv_(kv), data_(data), model_(model), opts_(std::move(opts)), topo_(topo) {
    if (opts_.lanes == 0) throw ConfigError("lanes must be positive");
    check_algorithm(kv_.mode(), opts_.algo);
    plan_ = make_batch_plan(opts_.algo, topo_, opts_.batch_size, data_.train.size());
    shard_ = shard_data(data_.train.size(), topo_.workers, opts_.seed)[kv_.rank()];
    w_ = init_params(model_, opts_.seed);
    auto shapes = model_.shapes();
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      keys_.push_back(static_cast<std::uint32_t>(k));
      params_.emplace_back(static_cast<std::uint32_t>(k), opts_.lanes, shapes[k]);
      grads_.emplace_back(static_cast<std::uint32_t>(k), opts_.lanes, shapes[k]);
      centers_.emplace_back(static_cast<std::uint32_t>(k), opts_.lanes, shapes[k]);
    }
  }

  const BatchPlan& plan() const { return plan_; }
  const Params& params() const { return w_; }

  std::vector<MetricsRecord> run() {
    load_groups(params_);
    kv_.init(keys_, params_);
    store_groups(params_);
    switch (opts_.algo) {
      case Algorithm::sgd: break;
      case Algorithm::asgd:
        kv_.set_optimizer(optim::OptimizerSpec::sgd(opts_.lr, rescale()));
        break;
      case Algorithm::esgd:
        if (opts_.interval == 0) throw ConfigError("interval must be positive");
        kv_.set_optimizer(optim::OptimizerSpec::elastic(opts_.alpha));
        break;
    }
    kv_.take_stats();
    std::vector<MetricsRecord> records;
    for (std::size_t e = 0; e < opts_.epochs; ++e) records.push_back(epoch(e));
    return records;
  }

 private:
  double rescale() const { return 1.0 / static_cast<double>(plan_.mini_batch_size); }

  MetricsRecord epoch(std::size_t e) {
    auto before = kv_.endpoint().counters_for_role(transport::Role::server);
    auto start = Clock::now();
    for (std::size_t it = 0; it < plan_.iterations; ++it) {
      compute_gradients(it);
      switch (opts_.algo) {
        case Algorithm::sgd: sync_step(); break;
        case Algorithm::asgd: async_step(); break;
        case Algorithm::esgd: elastic_step(); break;
      }
    }
    kv_.wait_all();
    MetricsRecord r;
    r.epoch = static_cast<std::uint32_t>(e + 1);
    r.epoch_time_s = std::chrono::duration<double>(Clock::now() - start).count();
    auto after = kv_.endpoint().counters_for_role(transport::Role::server);
    r.server_in_bytes = after.bytes_sent - before.bytes_sent;
    r.server_in_msgs = after.msgs_sent - before.msgs_sent;
    auto stats = kv_.take_stats();
    r.staleness_samples = stats.staleness.size();
    double sum = 0;
    for (auto s : stats.staleness) {
      sum += static_cast<double>(s);
      r.max_staleness = std::max(r.max_staleness, s);
    }
    if (!stats.staleness.empty()) r.mean_staleness = sum / static_cast<double>(stats.staleness.size());
    r.val_acc = accuracy(model_, w_, data_.test);
    if (opts_.on_epoch_end) opts_.on_epoch_end(kv_.rank(), r.epoch, w_);
    return r;
  }

  void compute_gradients(std::size_t it) {
    auto batch = batch_samples(data_, shard_, it, plan_.batch_size);
    auto parts = split_even(batch.size(), opts_.lanes);
    for (std::size_t l = 0; l < opts_.lanes; ++l) {
      std::span<const Sample* const> share(batch.data() + parts[l].begin, parts[l].size());
      auto lg = forward_backward(model_, w_, share);
      for (std::size_t k = 0; k < keys_.size(); ++k) grads_[k].lanes[l] = std::move(lg.grad[k]);
    }
  }

  // Gradients go out last layer first, as a backward pass would produce them.
  void sync_step() {
    for (std::size_t k = keys_.size(); k-- > 0;) {
      if (kv_.mode() == kv::StoreMode::PureMpi) {
        kv_.pushpull(keys_[k], grads_[k], grads_[k]);
      } else {
        kv_.push(keys_[k], grads_[k]);
        kv_.pull(keys_[k], grads_[k]);
      }
    }
    kv_.wait_all();
    for (std::size_t k = 0; k < keys_.size(); ++k)
      optim::sgd_update_inplace(w_[k], grads_[k].lanes[0], opts_.lr, rescale());
  }

  void async_step() {
    for (std::size_t k = keys_.size(); k-- > 0;) kv_.push(keys_[k], grads_[k]);
    for (std::size_t k = 0; k < keys_.size(); ++k) kv_.pull(keys_[k], params_[k]);
    kv_.wait_all();
    store_groups(params_);
  }

  // Group-synchronous local SGD every iteration; every `interval` iterations
  // an exchange with the center held by the servers.
  void elastic_step() {
    for (std::size_t k = keys_.size(); k-- > 0;) kv_.group_allreduce(grads_[k]);
    kv_.wait_all();
    for (std::size_t k = 0; k < keys_.size(); ++k)
      optim::sgd_update_inplace(w_[k], grads_[k].lanes[0], opts_.lr, rescale());
    if (++iteration_ % opts_.interval != 0) return;
    load_groups(params_);
    for (std::size_t k = 0; k < keys_.size(); ++k) {
      kv_.push(keys_[k], params_[k]);
      kv_.pull(keys_[k], centers_[k]);
    }
    kv_.wait_all();
    for (std::size_t k = 0; k < keys_.size(); ++k)
      optim::elastic_local_update_inplace(w_[k], centers_[k].lanes[0], opts_.alpha);
  }

  void load_groups(std::vector<TensorGroup<double>>& groups) const {
    for (std::size_t k = 0; k < groups.size(); ++k)
      for (auto& lane : groups[k].lanes) lane = w_[k];
  }

  void store_groups(const std::vector<TensorGroup<double>>& groups) {
    for (std::size_t k = 0; k < groups.size(); ++k) w_[k] = groups[k].lanes[0];
  }

  kv::KVStore& kv_;
  const Dataset& data_;
  Model model_;
  TrainOptions opts_;
  transport::Topology topo_;
  BatchPlan plan_;
  std::vector<std::size_t> shard_;
  std::vector<std::uint32_t> keys_;
  Params w_;
  std::vector<TensorGroup<double>> params_, grads_, centers_;
  std::uint64_t iteration_ = 0;  // elastic: counts across epochs
};

inline std::vector<MetricsRecord> run_sync_sgd(kv::KVStore& kv, const Dataset& data,
                                               const Model& model, TrainOptions opts,
                                               const transport::Topology& topo) {
  opts.algo = Algorithm::sgd;
  return WorkerTrainer(kv, data, model, std::move(opts), topo).run();
}

inline std::vector<MetricsRecord> run_async_sgd(kv::KVStore& kv, const Dataset& data,
                                                const Model& model, TrainOptions opts,
                                                const transport::Topology& topo) {
  opts.algo = Algorithm::asgd;
  return WorkerTrainer(kv, data, model, std::move(opts), topo).run();
}

inline std::vector<MetricsRecord> run_elastic_sgd(kv::KVStore& kv, const Dataset& data,
                                                  const Model& model, TrainOptions opts,
                                                  const transport::Topology& topo) {
  opts.algo = Algorithm::esgd;
  return WorkerTrainer(kv, data, model, std::move(opts), topo).run();
}

}  // namespace hps::train
