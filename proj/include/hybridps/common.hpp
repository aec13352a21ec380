// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <iostream>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace hps {

static_assert(std::endian::native == std::endian::little,
              "wire codecs assume a little-endian host");

using Clock = std::chrono::steady_clock;
using Millis = std::chrono::milliseconds;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user configuration; maps to exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

// A blocking receive or rendezvous ran out of time.
struct TimeoutError : Error {
  using Error::Error;
};

// Peer unknown, connection closed, malformed frame.
struct TransportError : Error {
  using Error::Error;
};

struct ClosedError : TransportError {
  using TransportError::TransportError;
};

// Operation refused by a component (unknown tag, push after shutdown, ...).
struct RejectedError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

// Non-finite loss or parameters during training; maps to exit code 4.
struct DivergenceError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

namespace detail {
inline LogLevel& log_threshold() {
  static LogLevel level = LogLevel::warn;
  return level;
}
inline std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

inline void set_log_level(LogLevel level) { detail::log_threshold() = level; }
inline LogLevel log_level() { return detail::log_threshold(); }

inline void log(LogLevel level, std::string_view msg) {
  if (level < detail::log_threshold()) return;
  static constexpr const char* names[] = {"debug", "info", "warn", "error"};
  std::lock_guard lock(detail::log_mutex());
  std::clog << "[hybridps " << names[static_cast<int>(level)] << "] " << msg
            << '\n';
}

inline void warn(std::string_view msg) { log(LogLevel::warn, msg); }

// ---------------------------------------------------------------------------
// Little-endian byte codec
// ---------------------------------------------------------------------------

using Bytes = std::vector<std::byte>;

class ByteWriter {
 public:
  ByteWriter() = default;
  explicit ByteWriter(std::size_t reserve) { buf_.reserve(reserve); }

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  ByteWriter& put(T value) {
    auto old = buf_.size();
    buf_.resize(old + sizeof(T));
    std::memcpy(buf_.data() + old, &value, sizeof(T));
    return *this;
  }

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  ByteWriter& put_span(std::span<const T> values) {
    auto old = buf_.size();
    buf_.resize(old + values.size_bytes());
    if (!values.empty())
      std::memcpy(buf_.data() + old, values.data(), values.size_bytes());
    return *this;
  }

  ByteWriter& put_string(std::string_view s) {
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    auto old = buf_.size();
    buf_.resize(old + s.size());
    std::memcpy(buf_.data() + old, s.data(), s.size());
    return *this;
  }

  std::size_t size() const { return buf_.size(); }
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> data) : data_(data) {}

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  // Copies `count` elements of T into `out`.
  template <typename T>
    requires std::is_trivially_copyable_v<T>
  void get_into(std::span<T> out) {
    need(out.size_bytes());
    if (!out.empty())
      std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }

  std::string get_string() {
    auto len = get<std::uint16_t>();
    need(len);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), len);
    pos_ += len;
    return s;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::span<const std::byte> rest() const { return data_.subspan(pos_); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size())
      throw TransportError("truncated payload: need " + std::to_string(n) +
                           " bytes, have " + std::to_string(data_.size() - pos_));
  }

  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

// Splits [0, n) into `parts` contiguous ranges; the first n % parts ranges get
// one extra element.
struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const Range&) const = default;
};

inline std::vector<Range> split_even(std::size_t n, std::size_t parts) {
  if (parts == 0) throw std::invalid_argument("split_even: zero parts");
  std::vector<Range> out(parts);
  std::size_t base = n / parts, extra = n % parts, pos = 0;
  for (std::size_t i = 0; i < parts; ++i) {
    std::size_t len = base + (i < extra ? 1 : 0);
    out[i] = {pos, pos + len};
    pos += len;
  }
  return out;
}

}  // namespace hps
