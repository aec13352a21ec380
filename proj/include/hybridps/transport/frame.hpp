// SPDX-License-Identifier: Apache-2.0
#pragma once

// Wire format shared by every backend. All integers little-endian.
//
//   offset size field
//   0      2    magic 0x4D58
//   2      1    tag (message kind)
//   3      1    source role
//   4      4    source rank
//   8      4    payload length
//   12     1    nonce (reserved, 0)
//   13     ...  payload

#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <string>

#include "hybridps/common.hpp"

namespace hps::transport {

enum class Role : std::uint8_t { scheduler = 0, server = 1, worker = 2 };

inline std::string to_string(Role role) {
  switch (role) {
    case Role::scheduler: return "scheduler";
    case Role::server: return "server";
    case Role::worker: return "worker";
  }
  return "role?";
}

struct NodeId {
  Role role = Role::worker;
  std::uint32_t rank = 0;

  auto operator<=>(const NodeId&) const = default;

  static constexpr NodeId scheduler() { return {Role::scheduler, 0}; }
  static constexpr NodeId server(std::uint32_t r) { return {Role::server, r}; }
  static constexpr NodeId worker(std::uint32_t r) { return {Role::worker, r}; }
};

inline std::string to_string(NodeId id) {
  return to_string(id.role) + "#" + std::to_string(id.rank);
}

struct NodeIdHash {
  std::size_t operator()(NodeId id) const noexcept {
    return (static_cast<std::size_t>(id.role) << 32) ^ id.rank;
  }
};

inline constexpr std::uint16_t kFrameMagic = 0x4D58;
inline constexpr std::size_t kHeaderSize = 13;
inline constexpr std::size_t kDefaultMaxFrame = 64u << 20;

// Message kinds. 0x0* rendezvous/control, 0x1* key-value store,
// 0x2* collectives, 0x3* run reports.
namespace tags {
inline constexpr std::uint8_t kRegister = 0x01;
inline constexpr std::uint8_t kAddressBook = 0x02;
inline constexpr std::uint8_t kHello = 0x03;
inline constexpr std::uint8_t kReady = 0x04;
inline constexpr std::uint8_t kGo = 0x05;
inline constexpr std::uint8_t kReject = 0x06;
inline constexpr std::uint8_t kBarrier = 0x07;
inline constexpr std::uint8_t kAbort = 0x08;

inline constexpr std::uint8_t kInit = 0x10;
inline constexpr std::uint8_t kPush = 0x11;
inline constexpr std::uint8_t kPull = 0x12;
inline constexpr std::uint8_t kPullResp = 0x13;
inline constexpr std::uint8_t kSetOptimizer = 0x14;
inline constexpr std::uint8_t kShutdown = 0x15;
inline constexpr std::uint8_t kKvError = 0x16;

inline constexpr std::uint8_t kReduceScatterChunk = 0x20;
inline constexpr std::uint8_t kAllgatherChunk = 0x21;
inline constexpr std::uint8_t kBroadcastChunk = 0x22;
inline constexpr std::uint8_t kGatherChunk = 0x23;

inline constexpr std::uint8_t kWorkerMetrics = 0x30;
inline constexpr std::uint8_t kServerStats = 0x31;
}  // namespace tags

// A decoded message as seen by the receiving node.
struct Frame {
  NodeId src;
  NodeId dest;
  std::uint8_t tag = 0;
  Bytes payload;
};

struct FrameHeader {
  std::uint8_t tag = 0;
  NodeId src;
  std::uint32_t length = 0;
};

using HeaderBytes = std::array<std::byte, kHeaderSize>;

inline HeaderBytes encode_header(NodeId src, std::uint8_t tag,
                                 std::uint32_t length) {
  HeaderBytes h{};
  auto put = [&](std::size_t off, auto v) { std::memcpy(h.data() + off, &v, sizeof v); };
  put(0, kFrameMagic);
  put(2, tag);
  put(3, static_cast<std::uint8_t>(src.role));
  put(4, src.rank);
  put(8, length);
  put(12, std::uint8_t{0});
  return h;
}

inline FrameHeader decode_header(std::span<const std::byte> bytes) {
  if (bytes.size() < kHeaderSize) throw TransportError("short frame header");
  ByteReader r(bytes.first(kHeaderSize));
  if (r.get<std::uint16_t>() != kFrameMagic) throw TransportError("bad frame magic");
  FrameHeader h;
  h.tag = r.get<std::uint8_t>();
  auto role = r.get<std::uint8_t>();
  if (role > static_cast<std::uint8_t>(Role::worker))
    throw TransportError("bad role byte " + std::to_string(role));
  h.src.role = static_cast<Role>(role);
  h.src.rank = r.get<std::uint32_t>();
  h.length = r.get<std::uint32_t>();
  if (r.get<std::uint8_t>() != 0) throw TransportError("nonzero reserved nonce");
  return h;
}

// Full wire image of one frame.
inline Bytes encode_frame(NodeId src, std::uint8_t tag,
                          std::span<const std::byte> payload) {
  Bytes out(kHeaderSize + payload.size());
  auto h = encode_header(src, tag, static_cast<std::uint32_t>(payload.size()));
  std::memcpy(out.data(), h.data(), kHeaderSize);
  if (!payload.empty())
    std::memcpy(out.data() + kHeaderSize, payload.data(), payload.size());
  return out;
}

inline Frame decode_frame(std::span<const std::byte> wire, NodeId dest) {
  auto h = decode_header(wire);
  if (wire.size() != kHeaderSize + h.length)
    throw TransportError("frame length mismatch");
  Frame f;
  f.src = h.src;
  f.dest = dest;
  f.tag = h.tag;
  f.payload.assign(wire.begin() + kHeaderSize, wire.end());
  return f;
}

}  // namespace hps::transport
