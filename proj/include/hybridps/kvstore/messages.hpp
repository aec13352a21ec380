// SPDX-License-Identifier: Apache-2.0
#pragma once

// Key-value store wire messages. Every payload starts with
//   key (u32), iteration (u32), element count (u32)
// followed by `count` little-endian doubles. SetOptimizer appends the 25-byte
// optimizer spec after a header with count 0. In a PullResp the iteration
// field carries the entry's version.

#include <algorithm>
#include <cctype>

#include "hybridps/optimizers.hpp"
#include "hybridps/transport/frame.hpp"

namespace hps::kv {

enum class StoreMode : std::uint8_t { Sync, Async, SyncMpi, AsyncMpi, PureMpi };

inline std::string to_string(StoreMode m) {
  switch (m) {
    case StoreMode::Sync: return "sync";
    case StoreMode::Async: return "async";
    case StoreMode::SyncMpi: return "sync-mpi";
    case StoreMode::AsyncMpi: return "async-mpi";
    case StoreMode::PureMpi: return "pure-mpi";
  }
  return "unknown";
}

inline StoreMode parse_mode(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) {
    return c == '_' ? '-' : static_cast<char>(std::tolower(c));
  });
  for (auto m : {StoreMode::Sync, StoreMode::Async, StoreMode::SyncMpi, StoreMode::AsyncMpi,
                 StoreMode::PureMpi})
    if (s == to_string(m)) return m;
  if (s == "syncmpi") return StoreMode::SyncMpi;
  if (s == "asyncmpi") return StoreMode::AsyncMpi;
  if (s == "purempi") return StoreMode::PureMpi;
  throw ConfigError("unknown store mode '" + std::string(text) + "'");
}

inline bool is_sync(StoreMode m) {
  return m == StoreMode::Sync || m == StoreMode::SyncMpi || m == StoreMode::PureMpi;
}
inline bool uses_servers(StoreMode m) { return m != StoreMode::PureMpi; }
inline bool groups_aggregate(StoreMode m) {
  return m == StoreMode::SyncMpi || m == StoreMode::AsyncMpi || m == StoreMode::PureMpi;
}

// Owning server of a key.
inline std::uint32_t shard_of(std::uint32_t key, std::uint32_t servers) {
  if (servers == 0) throw ConfigError("no servers to shard keys over");
  return key % servers;
}

struct KvError : Error {
  using Error::Error;
};

struct KvHeader {
  std::uint32_t key = 0;
  std::uint32_t iteration = 0;
  std::uint32_t count = 0;
};

inline constexpr std::size_t kKvHeaderBytes = 12;

inline Bytes encode_kv(std::uint32_t key, std::uint32_t iteration,
                       std::span<const double> values = {}) {
  ByteWriter w(kKvHeaderBytes + values.size_bytes());
  w.put<std::uint32_t>(key);
  w.put<std::uint32_t>(iteration);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(values.size()));
  w.put_span(values);
  return w.take();
}

inline KvHeader decode_kv_header(ByteReader& r) {
  KvHeader h;
  h.key = r.get<std::uint32_t>();
  h.iteration = r.get<std::uint32_t>();
  h.count = r.get<std::uint32_t>();
  return h;
}

inline KvHeader peek_kv_header(std::span<const std::byte> payload) {
  ByteReader r(payload);
  return decode_kv_header(r);
}

struct KvMessage {
  KvHeader header;
  std::vector<double> values;
};

inline KvMessage decode_kv(std::span<const std::byte> payload) {
  ByteReader r(payload);
  KvMessage m;
  m.header = decode_kv_header(r);
  if (r.remaining() != std::size_t{m.header.count} * sizeof(double))
    throw TransportError("kv payload length does not match element count");
  m.values.resize(m.header.count);
  r.get_into(std::span<double>(m.values));
  return m;
}

inline Bytes encode_set_optimizer(const optim::OptimizerSpec& spec) {
  ByteWriter w(kKvHeaderBytes + optim::kOptimizerSpecBytes);
  w.put<std::uint32_t>(0);
  w.put<std::uint32_t>(0);
  w.put<std::uint32_t>(0);
  optim::encode(w, spec);
  return w.take();
}

inline optim::OptimizerSpec decode_set_optimizer(std::span<const std::byte> payload) {
  ByteReader r(payload);
  decode_kv_header(r);
  auto spec = optim::decode_optimizer(r);
  if (r.remaining() != 0) throw TransportError("trailing bytes after optimizer spec");
  return spec;
}

// KvError payload: header of the offending request, then a message.
inline Bytes encode_kv_error(std::uint32_t key, std::uint8_t request_tag, std::string_view why) {
  ByteWriter w;
  w.put<std::uint32_t>(key);
  w.put<std::uint32_t>(request_tag);
  w.put<std::uint32_t>(0);
  w.put_string(why);
  return w.take();
}

inline std::string decode_kv_error(std::span<const std::byte> payload) {
  ByteReader r(payload);
  auto h = decode_kv_header(r);
  return "key " + std::to_string(h.key) + ": " + r.get_string();
}

}  // namespace hps::kv
