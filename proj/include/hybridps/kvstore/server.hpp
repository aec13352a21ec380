// SPDX-License-Identifier: Apache-2.0
#pragma once

// Parameter server node. One dispatcher thread receives frames and hands each
// one to an engine op tagged with its key, so messages for one key are
// handled one at a time in arrival order while different keys proceed in
// parallel. Optimizer installation mutates every key.
//
// Sync modes: pushes for (key, iteration) are buffered until every client
// master has contributed, summed in master order and applied once. A pull
// for iteration i is held back until i iterations of that key are applied.
// Async modes: each push is applied on arrival.

#include <atomic>
#include <map>
#include <optional>

#include "hybridps/engine.hpp"
#include "hybridps/kvstore/messages.hpp"
#include "hybridps/transport/endpoint.hpp"

namespace hps::kv {

struct ServerEntry {
  std::uint32_t key = 0;
  std::vector<double> value;
  std::optional<std::vector<double>> center;
  std::uint64_t version = 0;
  optim::OptimizerSpec optimizer;
};

// Counts of requests handled, by kind.
struct ServerStats {
  std::uint32_t rank = 0;
  std::uint64_t init_msgs = 0;
  std::uint64_t push_msgs = 0;
  std::uint64_t pull_msgs = 0;
  std::uint64_t control_msgs = 0;
  std::map<std::uint32_t, std::uint64_t> pushes_per_key;

  std::uint64_t total_msgs() const { return init_msgs + push_msgs + pull_msgs + control_msgs; }

  Bytes encode() const {
    ByteWriter w;
    w.put<std::uint32_t>(rank);
    w.put<std::uint64_t>(init_msgs);
    w.put<std::uint64_t>(push_msgs);
    w.put<std::uint64_t>(pull_msgs);
    w.put<std::uint64_t>(control_msgs);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(pushes_per_key.size()));
    for (auto [k, n] : pushes_per_key) {
      w.put<std::uint32_t>(k);
      w.put<std::uint64_t>(n);
    }
    return w.take();
  }

  static ServerStats decode(std::span<const std::byte> payload) {
    ByteReader r(payload);
    ServerStats s;
    s.rank = r.get<std::uint32_t>();
    s.init_msgs = r.get<std::uint64_t>();
    s.push_msgs = r.get<std::uint64_t>();
    s.pull_msgs = r.get<std::uint64_t>();
    s.control_msgs = r.get<std::uint64_t>();
    auto n = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      auto k = r.get<std::uint32_t>();
      s.pushes_per_key[k] = r.get<std::uint64_t>();
    }
    return s;
  }
};

class Server {
 public:
  struct Options {
    StoreMode mode = StoreMode::Sync;
    transport::Topology topology;
    // how long the server waits for the next request before giving up
    Millis idle_timeout{120000};
    std::size_t threads = 2;
  };

  Server(std::shared_ptr<transport::Endpoint> ep, Options opts)
      : ep_(std::move(ep)), opts_(std::move(opts)), engine_(engine_options(opts_.threads)) {
    if (!uses_servers(opts_.mode)) throw ConfigError("pure-mpi runs have no servers");
    opts_.topology.validate();
    if (!groups_aggregate(opts_.mode) && opts_.topology.clients != opts_.topology.workers)
      throw ConfigError(to_string(opts_.mode) + " mode needs one client per worker");
    config_tag_ = engine_.new_tag();
    stats_.rank = ep_->id().rank;
  }

  // Serves requests until every client master has sent Shutdown.
  ServerStats run() {
    const std::uint32_t masters = opts_.topology.clients;
    std::uint32_t shutdowns = 0;
    while (shutdowns < masters) {
      transport::Frame f = ep_->recv_match(
          [](const transport::Frame& fr) { return fr.src.role == transport::Role::worker; },
          opts_.idle_timeout);
      if (f.tag == transport::tags::kShutdown) {
        finish_pending_ops();
        ++shutdowns;
        {
          std::lock_guard lock(mu_);
          ++stats_.control_msgs;
        }
        ep_->send(f.src, transport::tags::kShutdown, Bytes{});
        continue;
      }
      dispatch(std::move(f));
    }
    finish_pending_ops();
    engine_.shutdown();
    std::lock_guard lock(mu_);
    return stats_;
  }

  ServerStats stats() const {
    std::lock_guard lock(mu_);
    return stats_;
  }

  // Snapshot of one entry, for inspection after run().
  std::optional<ServerEntry> entry(std::uint32_t key) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end() || !it->second->initialized) return std::nullopt;
    return it->second->entry;
  }

 private:
  struct Slot {
    engine::Tag tag;
    bool initialized = false;
    ServerEntry entry;
    std::uint32_t applied_iterations = 0;
    // sync: iteration -> contribution per master
    std::map<std::uint32_t, std::vector<std::optional<std::vector<double>>>> pending;
    // sync: pulls waiting for an iteration to be applied
    std::vector<std::pair<transport::NodeId, std::uint32_t>> waiting;
    // elastic: center as it was just before each master's latest push
    std::map<std::uint32_t, std::pair<std::vector<double>, std::uint64_t>> pre_push_center;
  };

  static engine::Engine::Options engine_options(std::size_t threads) {
    engine::Engine::Options o;
    o.threads = std::max<std::size_t>(1, threads);
    return o;
  }

  void finish_pending_ops() {
    try {
      engine_.wait_all();
    } catch (const engine::AggregateError& e) {
      e.rethrow_first();
    }
  }

  std::uint32_t master_index(transport::NodeId w) const {
    const auto& topo = opts_.topology;
    if (w.role != transport::Role::worker || w.rank >= topo.workers)
      throw KvError("request from unknown node " + transport::to_string(w));
    if (groups_aggregate(opts_.mode) && topo.group_rank_of(w.rank) != 0)
      throw KvError("request from " + transport::to_string(w) + ", which is not a group master");
    return topo.group_of(w.rank);
  }

  void reply_error(transport::NodeId to, std::uint32_t key, std::uint8_t tag,
                   const std::string& why) {
    log(LogLevel::debug, "server " + std::to_string(stats_.rank) + ": " + why);
    ep_->send(to, transport::tags::kKvError, encode_kv_error(key, tag, why));
  }

  void dispatch(transport::Frame f) {
    using namespace transport::tags;
    if (f.tag == kSetOptimizer) {
      std::vector<engine::Tag> all{config_tag_};
      {
        std::lock_guard lock(mu_);
        ++stats_.control_msgs;
        for (auto& [k, s] : entries_) all.push_back(s->tag);
      }
      auto frame = std::make_shared<transport::Frame>(std::move(f));
      engine_.push([this, frame] { set_optimizer(*frame); }, {}, all);
      return;
    }
    if (f.tag != kInit && f.tag != kPush && f.tag != kPull) {
      reply_error(f.src, 0, f.tag, "unexpected message kind " + std::to_string(f.tag));
      return;
    }

    KvHeader h;
    try {
      h = peek_kv_header(f.payload);
      master_index(f.src);
    } catch (const std::exception& e) {
      reply_error(f.src, 0, f.tag, e.what());
      return;
    }

    Slot* slot = nullptr;
    {
      std::lock_guard lock(mu_);
      if (f.tag == kInit) ++stats_.init_msgs;
      if (f.tag == kPush) {
        ++stats_.push_msgs;
        ++stats_.pushes_per_key[h.key];
      }
      if (f.tag == kPull) ++stats_.pull_msgs;
      auto it = entries_.find(h.key);
      if (it != entries_.end()) {
        slot = it->second.get();
      } else if (f.tag == kInit) {
        auto s = std::make_unique<Slot>();
        s->tag = engine_.new_tag();
        slot = s.get();
        entries_.emplace(h.key, std::move(s));
      }
    }
    if (!slot) {
      reply_error(f.src, h.key, f.tag, "key " + std::to_string(h.key) + " is not initialized");
      return;
    }
    auto frame = std::make_shared<transport::Frame>(std::move(f));
    engine_.push([this, slot, frame] { handle(*slot, *frame); }, {config_tag_}, {slot->tag});
  }

  void handle(Slot& slot, const transport::Frame& f) {
    using namespace transport::tags;
    KvMessage msg;
    try {
      msg = decode_kv(f.payload);
      if (f.tag == kInit)
        init(slot, f, msg);
      else if (!slot.initialized)
        throw KvError("key " + std::to_string(msg.header.key) + " is not initialized");
      else if (f.tag == kPush)
        push(slot, f, msg);
      else
        pull(slot, f.src, msg.header.iteration);
    } catch (const TransportError&) {
      throw;
    } catch (const std::exception& e) {
      reply_error(f.src, msg.header.key, f.tag, e.what());
    }
  }

  void init(Slot& slot, const transport::Frame& f, KvMessage& msg) {
    if (slot.initialized) throw KvError("duplicate key " + std::to_string(msg.header.key));
    slot.entry.key = msg.header.key;
    slot.entry.value = std::move(msg.values);
    {
      std::lock_guard lock(mu_);
      slot.entry.optimizer = optimizer_;
    }
    if (slot.entry.optimizer.kind == optim::OptimizerKind::Elastic1)
      slot.entry.center = slot.entry.value;
    slot.initialized = true;
    ep_->send(f.src, transport::tags::kInit, encode_kv(msg.header.key, 0));
  }

  void push(Slot& slot, const transport::Frame& f, KvMessage& msg) {
    auto& e = slot.entry;
    if (msg.values.size() != e.value.size())
      throw ShapeError("push of " + std::to_string(msg.values.size()) + " elements to key " +
                       std::to_string(e.key) + " of size " + std::to_string(e.value.size()));
    const std::uint32_t master = master_index(f.src);
    if (!is_sync(opts_.mode)) {
      apply(slot, master, msg.values);
      e.version += 1;
      return;
    }
    const std::uint32_t masters = opts_.topology.clients;
    auto& contributions = slot.pending[msg.header.iteration];
    if (contributions.empty()) contributions.resize(masters);
    if (msg.header.iteration < slot.applied_iterations || contributions[master])
      throw KvError("duplicate push for iteration " + std::to_string(msg.header.iteration));
    contributions[master] = std::move(msg.values);

    // Apply every complete iteration in order.
    for (;;) {
      auto it = slot.pending.find(slot.applied_iterations);
      if (it == slot.pending.end()) break;
      auto& parts = it->second;
      if (!std::all_of(parts.begin(), parts.end(), [](const auto& p) { return p.has_value(); }))
        break;
      if (e.optimizer.kind == optim::OptimizerKind::Elastic1) {
        for (std::uint32_t m = 0; m < masters; ++m) apply(slot, m, *parts[m]);
      } else {
        std::vector<double> sum = std::move(*parts[0]);
        for (std::uint32_t m = 1; m < masters; ++m)
          for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += (*parts[m])[i];
        apply(slot, 0, sum);
      }
      e.version += masters;
      slot.pending.erase(it);
      ++slot.applied_iterations;
    }
    auto waiting = std::move(slot.waiting);
    slot.waiting.clear();
    for (auto [who, iter] : waiting) pull(slot, who, iter);
  }

  void apply(Slot& slot, std::uint32_t master, std::vector<double>& values) {
    auto& e = slot.entry;
    switch (e.optimizer.kind) {
      case optim::OptimizerKind::Assign:
        e.value = std::move(values);
        break;
      case optim::OptimizerKind::Sgd:
        optim::sgd_update_inplace(e.value, values, e.optimizer.lr, e.optimizer.rescale);
        break;
      case optim::OptimizerKind::Elastic1: {
        auto& c = *e.center;
        slot.pre_push_center[master] = {c, e.version};
        optim::elastic_center_update_inplace(c, values, e.optimizer.alpha);
        break;
      }
    }
  }

  void pull(Slot& slot, transport::NodeId who, std::uint32_t iteration) {
    auto& e = slot.entry;
    if (is_sync(opts_.mode) && iteration > slot.applied_iterations) {
      slot.waiting.emplace_back(who, iteration);
      return;
    }
    if (e.optimizer.kind == optim::OptimizerKind::Elastic1) {
      // The worker gets the center it was pulled against by its own push, so
      // both sides of the exchange see the same pre-update pair.
      auto it = slot.pre_push_center.find(master_index(who));
      if (it != slot.pre_push_center.end()) {
        auto [center, version] = std::move(it->second);
        slot.pre_push_center.erase(it);
        send_value(who, e.key, version, center);
        return;
      }
      send_value(who, e.key, e.version, *e.center);
      return;
    }
    send_value(who, e.key, e.version, e.value);
  }

  void send_value(transport::NodeId to, std::uint32_t key, std::uint64_t version,
                  std::span<const double> values) {
    ep_->send(to, transport::tags::kPullResp,
              encode_kv(key, static_cast<std::uint32_t>(version), values));
  }

  void set_optimizer(const transport::Frame& f) {
    optim::OptimizerSpec spec;
    std::string why;
    try {
      spec = decode_set_optimizer(f.payload);
      spec.validate();
    } catch (const std::exception& e) {
      why = e.what();
    }
    std::lock_guard lock(mu_);
    if (why.empty())
      for (auto& [k, s] : entries_)
        if (s->initialized && s->entry.version > 0) {
          why = "optimizer change after training started (key " + std::to_string(k) + ")";
          break;
        }
    if (why.empty()) {
      optimizer_ = spec;
      for (auto& [k, s] : entries_) {
        auto& e = s->entry;
        e.optimizer = spec;
        if (spec.kind == optim::OptimizerKind::Elastic1)
          e.center = e.value;
        else
          e.center.reset();
      }
    }
    // Ack: iteration field 0 on success, 1 on refusal.
    ByteWriter w;
    w.put<std::uint32_t>(0);
    w.put<std::uint32_t>(why.empty() ? 0 : 1);
    w.put<std::uint32_t>(0);
    w.put_string(why);
    ep_->send(f.src, transport::tags::kSetOptimizer, w.take());
  }

  std::shared_ptr<transport::Endpoint> ep_;
  Options opts_;
  engine::Tag config_tag_;
  mutable std::mutex mu_;
  std::map<std::uint32_t, std::unique_ptr<Slot>> entries_;
  optim::OptimizerSpec optimizer_;
  ServerStats stats_;
  // last, so queued ops finish before the state they touch goes away
  engine::Engine engine_;
};

}  // namespace hps::kv
