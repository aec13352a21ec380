// SPDX-License-Identifier: Apache-2.0
#pragma once

// Worker-side key-value store.
//
// push/pull/pushpull/group_allreduce are deferred onto the worker's engine:
// a push reads its source buffer, a pull mutates its destination, and every
// one of them also mutates a shared communication tag. That last tag keeps
// the order of collective calls identical on every member of a group, which
// is what stops two ranks from entering different collectives.
//
// In the grouped modes the group allreduces first and only the group's rank
// 0 (the master) talks to servers; the master's pull is broadcast to the
// rest of the group. In pure-mpi mode there are no servers at all.

#include <unordered_map>
#include <unordered_set>

#include "hybridps/collectives/ring.hpp"
#include "hybridps/engine.hpp"
#include "hybridps/kvstore/scheduler.hpp"

namespace hps::kv {

// Per-worker observations gathered by pulls.
struct ClientStats {
  std::vector<std::uint64_t> staleness;  // one sample per pull that saw a new version
  std::uint64_t pushes = 0;
  std::uint64_t pulls = 0;
};

class KVStore {
 public:
  struct Options {
    StoreMode mode = StoreMode::Sync;
    transport::Topology topology;
    std::size_t rings = 2;
    Millis timeout{60000};
    std::size_t engine_threads = 2;
  };

  KVStore(std::shared_ptr<transport::Endpoint> ep, Options opts)
      : ep_(std::move(ep)), opts_(std::move(opts)), engine_(engine_options(opts_.engine_threads)) {
    const auto& topo = opts_.topology;
    topo.validate();
    if (ep_->id().role != transport::Role::worker || ep_->id().rank >= topo.workers)
      throw ConfigError("key-value client must run on a worker of the run");
    if (uses_servers(opts_.mode) && topo.servers == 0)
      throw ConfigError(to_string(opts_.mode) + " mode needs at least one server");
    if (!uses_servers(opts_.mode) && topo.servers != 0)
      throw ConfigError("pure-mpi mode runs without servers");
    if (!groups_aggregate(opts_.mode) && topo.clients != topo.workers)
      throw ConfigError(to_string(opts_.mode) + " mode needs one client per worker");
    group_ = std::make_unique<Communicator>(ep_, topo.group_members(topo.group_of(rank())),
                                            opts_.timeout);
    comm_tag_ = engine_.new_tag();
  }

  ~KVStore() {
    try {
      engine_.wait_all();
    } catch (const std::exception& e) {
      warn(std::string("kvstore: error while draining: ") + e.what());
    }
  }

  KVStore(const KVStore&) = delete;
  KVStore& operator=(const KVStore&) = delete;

  StoreMode mode() const { return opts_.mode; }
  std::uint32_t rank() const { return ep_->id().rank; }
  std::uint32_t group() const { return opts_.topology.group_of(rank()); }
  int group_rank() const { return group_->rank(); }
  bool is_master() const { return group_->rank() == 0; }
  const Communicator& communicator() const { return *group_; }
  transport::Endpoint& endpoint() const { return *ep_; }
  const optim::OptimizerSpec& optimizer() const { return optimizer_; }

  // Collective over all workers. Rank 0's values become the stored values
  // and every worker's groups are overwritten with them.
  void init(const std::vector<std::uint32_t>& keys, std::vector<TensorGroup<double>>& values) {
    std::vector<TensorGroup<double>*> ptrs;
    for (auto& v : values) ptrs.push_back(&v);
    init(keys, ptrs);
  }

  void init(std::uint32_t key, TensorGroup<double>& value) {
    std::vector<TensorGroup<double>*> ptrs{&value};
    init({key}, ptrs);
  }

  void init(const std::vector<std::uint32_t>& keys, const std::vector<TensorGroup<double>*>& values) {
    if (keys.size() != values.size()) throw ShapeError("init: keys and values differ in count");
    std::unordered_set<std::uint32_t> seen;
    for (auto k : keys) {
      if (!seen.insert(k).second || sizes_.contains(k))
        throw KvError("duplicate key " + std::to_string(k));
    }
    for (auto* v : values) v->validate();
    wait_all();

    if (!uses_servers(opts_.mode)) {
      for (std::size_t i = 0; i < keys.size(); ++i) {
        auto& g = *values[i];
        std::vector<double> v = g.lanes[0];
        broadcast(*group_, v, 0);
        lane_broadcast(v, g);
        sizes_[keys[i]] = v.size();
        local_[keys[i]] = {std::move(v), 0};
      }
      return;
    }

    if (rank() == 0) {
      for (std::size_t i = 0; i < keys.size(); ++i)
        ep_->send(owner(keys[i]), transport::tags::kInit,
                  encode_kv(keys[i], 0, values[i]->lanes[0]));
      for (std::size_t i = 0; i < keys.size(); ++i)
        await_reply(owner(keys[i]), keys[i], transport::tags::kInit);
    }
    for (std::size_t i = 0; i < keys.size(); ++i) sizes_[keys[i]] = values[i]->size();
    global_barrier();
    for (std::size_t i = 0; i < keys.size(); ++i) pull(keys[i], *values[i]);
    wait_all();
  }

  // Collective over all workers; must precede the first push.
  void set_optimizer(const optim::OptimizerSpec& spec) {
    spec.validate();
    if (started_) throw RejectedError("optimizer change after training started");
    wait_all();
    std::string refusal;
    if (uses_servers(opts_.mode) && rank() == 0) {
      auto payload = encode_set_optimizer(spec);
      for (std::uint32_t s = 0; s < opts_.topology.servers; ++s)
        ep_->send(transport::NodeId::server(s), transport::tags::kSetOptimizer, payload);
      for (std::uint32_t s = 0; s < opts_.topology.servers; ++s) {
        auto f = ep_->recv_match(
            [s](const transport::Frame& fr) {
              return fr.src == transport::NodeId::server(s) &&
                     (fr.tag == transport::tags::kSetOptimizer || fr.tag == transport::tags::kKvError);
            },
            opts_.timeout);
        if (f.tag == transport::tags::kKvError) {
          refusal = decode_kv_error(f.payload);
          continue;
        }
        ByteReader r(f.payload);
        auto h = decode_kv_header(r);
        if (h.iteration != 0 && refusal.empty()) refusal = r.get_string();
      }
    }
    if (uses_servers(opts_.mode)) global_barrier();
    if (!refusal.empty()) throw KvError("set_optimizer refused: " + refusal);
    optimizer_ = spec;
  }

  void push(std::uint32_t key, const TensorGroup<double>& src) {
    check(key, src);
    started_ = true;
    std::uint32_t iteration = push_count_[key]++;
    engine_.push([this, key, iteration, &src] { do_push(key, iteration, src); }, {tag_of(src)},
                 {comm_tag_});
  }

  void pull(std::uint32_t key, TensorGroup<double>& dst) {
    check(key, dst);
    std::uint32_t iteration = push_count_[key];
    engine_.push([this, key, iteration, &dst] { do_pull(key, iteration, dst); }, {},
                 {tag_of(dst), comm_tag_});
  }

  void pushpull(std::uint32_t key, const TensorGroup<double>& src, TensorGroup<double>& dst) {
    check(key, src);
    check(key, dst);
    started_ = true;
    std::uint32_t iteration = push_count_[key]++;
    std::vector<engine::Tag> reads;
    if (&src != &dst) reads.push_back(tag_of(src));
    engine_.push(
        [this, key, iteration, &src, &dst] {
          if (!uses_servers(opts_.mode)) {
            if (&src != &dst) dst.lanes = src.lanes;
            allreduce(*group_, dst, opts_.rings);
            return;
          }
          do_push(key, iteration, src);
          do_pull(key, iteration + 1, dst);
        },
        reads, {tag_of(dst), comm_tag_});
  }

  // In-place allreduce within the client group, no server traffic.
  void group_allreduce(TensorGroup<double>& group) {
    group.validate();
    engine_.push([this, &group] { allreduce(*group_, group, opts_.rings); }, {},
                 {tag_of(group), comm_tag_});
  }

  // Waits for all deferred ops; rethrows the first failure with its type.
  void wait_all() {
    try {
      engine_.wait_all();
    } catch (const engine::AggregateError& e) {
      e.rethrow_first();
    }
  }

  // Collective over all workers, through the scheduler.
  void global_barrier() {
    wait_all();
    barrier(*ep_, next_barrier_++, opts_.timeout);
  }

  // Masters tell every server they are done and wait for the acks.
  void shutdown() {
    wait_all();
    if (shut_down_) return;
    shut_down_ = true;
    if (!uses_servers(opts_.mode) || !is_master()) return;
    for (std::uint32_t s = 0; s < opts_.topology.servers; ++s)
      ep_->send(transport::NodeId::server(s), transport::tags::kShutdown, Bytes{});
    for (std::uint32_t s = 0; s < opts_.topology.servers; ++s)
      ep_->recv_from(transport::NodeId::server(s), transport::tags::kShutdown, opts_.timeout);
  }

  // Returns and clears the observations made since the last call.
  ClientStats take_stats() {
    std::lock_guard lock(stats_mu_);
    return std::exchange(stats_, ClientStats{});
  }

  // Version of `key` seen by this worker's latest pull.
  std::uint64_t last_version(std::uint32_t key) const {
    std::lock_guard lock(stats_mu_);
    auto it = last_version_.find(key);
    return it == last_version_.end() ? 0 : it->second;
  }

 private:
  static engine::Engine::Options engine_options(std::size_t threads) {
    engine::Engine::Options o;
    o.threads = std::max<std::size_t>(1, threads);
    return o;
  }

  transport::NodeId owner(std::uint32_t key) const {
    return transport::NodeId::server(shard_of(key, opts_.topology.servers));
  }

  void check(std::uint32_t key, const TensorGroup<double>& g) const {
    auto it = sizes_.find(key);
    if (it == sizes_.end()) throw KvError("key " + std::to_string(key) + " is not initialized");
    g.validate();
    if (g.size() != it->second)
      throw ShapeError("key " + std::to_string(key) + " holds " + std::to_string(it->second) +
                       " elements, buffer has " + std::to_string(g.size()));
  }

  engine::Tag tag_of(const TensorGroup<double>& g) {
    auto [it, fresh] = buffer_tags_.try_emplace(&g);
    if (fresh) it->second = engine_.new_tag();
    return it->second;
  }

  transport::Frame await_reply(transport::NodeId server, std::uint32_t key, std::uint8_t tag) {
    auto f = ep_->recv_match(
        [&](const transport::Frame& fr) {
          return fr.src == server && (fr.tag == tag || fr.tag == transport::tags::kKvError) &&
                 fr.payload.size() >= 4 && peek_kv_header(fr.payload).key == key;
        },
        opts_.timeout);
    if (f.tag == transport::tags::kKvError) throw KvError(decode_kv_error(f.payload));
    return f;
  }

  // Contribution this worker's group sends for `src`: the sum over the
  // group's ranks and lanes, or their mean when the store averages
  // parameters (elastic).
  std::vector<double> aggregate(const TensorGroup<double>& src) {
    std::vector<double> out;
    std::size_t contributors = src.lane_count();
    if (groups_aggregate(opts_.mode)) {
      TensorGroup<double> scratch = src;
      allreduce(*group_, scratch, opts_.rings);
      out = std::move(scratch.lanes[0]);
      contributors *= static_cast<std::size_t>(group_->size());
    } else {
      out = lane_reduce(src);
    }
    if (optimizer_.kind == optim::OptimizerKind::Elastic1) {
      const double k = static_cast<double>(contributors);
      for (auto& x : out) x /= k;
    }
    return out;
  }

  void do_push(std::uint32_t key, std::uint32_t iteration, const TensorGroup<double>& src) {
    auto values = aggregate(src);
    {
      std::lock_guard lock(stats_mu_);
      ++stats_.pushes;
    }
    if (!uses_servers(opts_.mode)) {
      auto& [stored, version] = local_[key];
      switch (optimizer_.kind) {
        case optim::OptimizerKind::Assign: stored = std::move(values); break;
        case optim::OptimizerKind::Sgd:
          optim::sgd_update_inplace(stored, values, optimizer_.lr, optimizer_.rescale);
          break;
        case optim::OptimizerKind::Elastic1:
          optim::elastic_center_update_inplace(stored, values, optimizer_.alpha);
          break;
      }
      ++version;
      return;
    }
    if (is_master()) ep_->send(owner(key), transport::tags::kPush, encode_kv(key, iteration, values));
  }

  void do_pull(std::uint32_t key, std::uint32_t iteration, TensorGroup<double>& dst) {
    std::vector<double> values;
    std::uint64_t version = 0;
    if (!uses_servers(opts_.mode)) {
      auto& [stored, v] = local_.at(key);
      values = stored;
      version = v;
    } else {
      if (is_master()) {
        ep_->send(owner(key), transport::tags::kPull, encode_kv(key, iteration));
        auto f = await_reply(owner(key), key, transport::tags::kPullResp);
        auto msg = decode_kv(f.payload);
        values = std::move(msg.values);
        version = msg.header.iteration;
        if (values.size() != dst.size())
          throw ShapeError("pull of key " + std::to_string(key) + " returned " +
                           std::to_string(values.size()) + " elements, buffer has " +
                           std::to_string(dst.size()));
      }
      if (group_->size() > 1) {
        // the version rides along as one extra element
        values.resize(dst.size() + 1);
        if (is_master()) values.back() = static_cast<double>(version);
        broadcast(*group_, values, 0);
        version = static_cast<std::uint64_t>(values.back());
        values.pop_back();
      }
    }
    lane_broadcast(values, dst);
    record_pull(key, version);
  }

  void record_pull(std::uint32_t key, std::uint64_t version) {
    std::lock_guard lock(stats_mu_);
    ++stats_.pulls;
    auto [it, first] = last_version_.try_emplace(key, version);
    if (first) return;
    std::uint64_t previous = it->second;
    if (version < previous)
      throw KvError("non-monotone read of key " + std::to_string(key) + ": version " +
                    std::to_string(version) + " after " + std::to_string(previous));
    it->second = version;
    if (version == previous) return;
    // Updates applied between this worker's two reads, minus its own push.
    // Synchronous modes apply whole iterations, so the gap is zero there.
    std::uint64_t stale = is_sync(opts_.mode) ? 0 : version - previous - 1;
    stats_.staleness.push_back(stale);
  }

  std::shared_ptr<transport::Endpoint> ep_;
  Options opts_;
  std::unique_ptr<Communicator> group_;
  engine::Tag comm_tag_;
  std::unordered_map<const TensorGroup<double>*, engine::Tag> buffer_tags_;
  std::unordered_map<std::uint32_t, std::size_t> sizes_;
  std::unordered_map<std::uint32_t, std::uint32_t> push_count_;
  std::unordered_map<std::uint32_t, std::pair<std::vector<double>, std::uint64_t>> local_;
  optim::OptimizerSpec optimizer_;
  bool started_ = false;
  bool shut_down_ = false;
  std::uint32_t next_barrier_ = 0;
  mutable std::mutex stats_mu_;
  ClientStats stats_;
  std::unordered_map<std::uint32_t, std::uint64_t> last_version_;
  // last, so queued ops finish before the state they touch goes away
  engine::Engine engine_;
};

}  // namespace hps::kv
