// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dependency-tracking executor. Every deferred operation names the resources
// it reads and the resources it mutates; an operation starts only after every
// earlier conflicting operation has finished. Readers of a tag share it, a
// mutator excludes everybody else. Operations are admitted strictly in push
// order, which is what keeps collective call sequences identical across ranks.

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <exception>
#include <future>
#include <memory>
#include <thread>
#include <unordered_map>
#include <vector>

#include "hybridps/common.hpp"

namespace hps::engine {

struct Tag {
  std::uint64_t id = 0;
  auto operator<=>(const Tag&) const = default;
};

using Ticket = std::shared_future<void>;

// Start/end of one executed op; collected only when tracing is enabled.
struct OpRecord {
  std::uint64_t seq = 0;
  Clock::time_point start;
  Clock::time_point end;
};

class AggregateError : public Error {
 public:
  explicit AggregateError(std::vector<std::exception_ptr> errors)
      : Error(describe(errors)), errors_(std::move(errors)) {}

  const std::vector<std::exception_ptr>& errors() const { return errors_; }

  // Rethrows the first collected failure with its original type.
  [[noreturn]] void rethrow_first() const { std::rethrow_exception(errors_.front()); }

 private:
  static std::string describe(const std::vector<std::exception_ptr>& errors) {
    std::string first = "unknown error";
    try {
      std::rethrow_exception(errors.front());
    } catch (const std::exception& e) {
      first = e.what();
    } catch (...) {
    }
    return std::to_string(errors.size()) + " engine op(s) failed; first: " + first;
  }

  std::vector<std::exception_ptr> errors_;
};

class Engine {
 public:
  struct Options {
    std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
    // keep the admission log and per-op start/end records
    bool record_trace = false;
  };

  Engine() : Engine(Options{}) {}

  explicit Engine(Options opts) : opts_(opts) {
    if (opts_.threads == 0) throw ConfigError("engine needs at least one thread");
    pool_.reserve(opts_.threads);
    for (std::size_t i = 0; i < opts_.threads; ++i)
      pool_.emplace_back([this] { worker_loop(); });
  }

  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  ~Engine() {
    {
      std::unique_lock lock(mu_);
      accepting_ = false;
      idle_cv_.wait(lock, [&] { return outstanding_ == 0; });
      stopping_ = true;
    }
    ready_cv_.notify_all();
    for (auto& t : pool_) t.join();
  }

  Tag new_tag() {
    std::lock_guard lock(mu_);
    Tag tag{++last_tag_};
    tags_.emplace(tag.id, TagState{});
    return tag;
  }

  // Forgets a tag. Ids are never handed out again.
  void release_tag(Tag tag) {
    std::lock_guard lock(mu_);
    tags_.erase(tag.id);
  }

  Ticket push(std::function<void()> body, std::vector<Tag> reads,
              std::vector<Tag> mutates) {
    normalize(reads);
    normalize(mutates);
    auto node = std::make_shared<Node>();
    node->body = std::move(body);
    Ticket ticket = node->promise.get_future().share();

    std::unique_lock lock(mu_);
    if (!accepting_) throw RejectedError("engine: push after shutdown");
    for (const auto& list : {&reads, &mutates})
      for (Tag t : *list)
        if (!tags_.contains(t.id))
          throw RejectedError("engine: unknown tag " + std::to_string(t.id));
    for (Tag t : reads)
      if (std::binary_search(mutates.begin(), mutates.end(), t))
        throw RejectedError("engine: tag " + std::to_string(t.id) +
                            " is both read and mutated");

    node->seq = ++last_seq_;
    if (opts_.record_trace) admission_.push_back(node->seq);

    for (Tag t : reads) {
      auto& st = tags_[t.id];
      depend(node, st.last_writer);
      prune(st.readers);
      st.readers.push_back(node);
    }
    for (Tag t : mutates) {
      auto& st = tags_[t.id];
      depend(node, st.last_writer);
      for (auto& r : st.readers) depend(node, r);
      st.readers.clear();
      st.last_writer = node;
    }
    ++outstanding_;
    if (node->pending == 0) {
      ready_.push_back(node);
      lock.unlock();
      ready_cv_.notify_one();
    }
    return ticket;
  }

  // Blocks until every pushed op finished; throws AggregateError if any failed.
  void wait_all() {
    std::vector<std::exception_ptr> errors;
    {
      std::unique_lock lock(mu_);
      idle_cv_.wait(lock, [&] { return outstanding_ == 0; });
      errors.swap(errors_);
    }
    if (!errors.empty()) throw AggregateError(std::move(errors));
  }

  // Drains outstanding work and refuses further pushes.
  void shutdown() {
    std::unique_lock lock(mu_);
    accepting_ = false;
    idle_cv_.wait(lock, [&] { return outstanding_ == 0; });
  }

  std::size_t threads() const { return opts_.threads; }

  std::vector<std::uint64_t> admission_log() const {
    std::lock_guard lock(mu_);
    return admission_;
  }

  std::vector<OpRecord> trace() const {
    std::lock_guard lock(mu_);
    return trace_;
  }

 private:
  struct Node {
    std::uint64_t seq = 0;
    std::function<void()> body;
    std::size_t pending = 0;
    bool done = false;
    std::vector<std::shared_ptr<Node>> dependents;
    std::promise<void> promise;
  };

  struct TagState {
    std::shared_ptr<Node> last_writer;
    std::vector<std::shared_ptr<Node>> readers;  // since last_writer
  };

  static void normalize(std::vector<Tag>& tags) {
    std::sort(tags.begin(), tags.end());
    tags.erase(std::unique(tags.begin(), tags.end()), tags.end());
  }

  static void prune(std::vector<std::shared_ptr<Node>>& nodes) {
    std::erase_if(nodes, [](const auto& n) { return n->done; });
  }

  static void depend(const std::shared_ptr<Node>& node,
                     const std::shared_ptr<Node>& on) {
    if (!on || on->done || on == node) return;
    // an op may reach the same predecessor through several tags
    if (!on->dependents.empty() && on->dependents.back() == node) return;
    on->dependents.push_back(node);
    ++node->pending;
  }

  void worker_loop() {
    for (;;) {
      std::shared_ptr<Node> node;
      {
        std::unique_lock lock(mu_);
        ready_cv_.wait(lock, [&] { return stopping_ || !ready_.empty(); });
        if (ready_.empty()) return;
        node = std::move(ready_.front());
        ready_.pop_front();
      }
      auto start = Clock::now();
      std::exception_ptr failure;
      try {
        node->body();
      } catch (...) {
        failure = std::current_exception();
      }
      auto end = Clock::now();
      node->body = nullptr;
      if (failure)
        node->promise.set_exception(failure);
      else
        node->promise.set_value();

      std::size_t woken = 0;
      {
        std::lock_guard lock(mu_);
        if (opts_.record_trace) trace_.push_back({node->seq, start, end});
        if (failure) errors_.push_back(failure);
        node->done = true;
        for (auto& dep : node->dependents)
          if (--dep->pending == 0) {
            ready_.push_back(dep);
            ++woken;
          }
        node->dependents.clear();
        --outstanding_;
        if (outstanding_ == 0) idle_cv_.notify_all();
      }
      for (std::size_t i = 0; i < woken; ++i) ready_cv_.notify_one();
    }
  }

  Options opts_;
  mutable std::mutex mu_;
  std::condition_variable ready_cv_;
  std::condition_variable idle_cv_;
  std::deque<std::shared_ptr<Node>> ready_;
  std::unordered_map<std::uint64_t, TagState> tags_;
  std::vector<std::uint64_t> admission_;
  std::vector<OpRecord> trace_;
  std::vector<std::exception_ptr> errors_;
  std::uint64_t last_tag_ = 0;
  std::uint64_t last_seq_ = 0;
  std::size_t outstanding_ = 0;
  bool accepting_ = true;
  bool stopping_ = false;
  std::vector<std::thread> pool_;
};

}  // namespace hps::engine
