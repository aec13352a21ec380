// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "hybridps/common.hpp"

namespace hps::train {

// One epoch as seen by one worker, or merged over all workers.
struct MetricsRecord {
  std::uint32_t epoch = 0;
  double epoch_time_s = 0;
  double val_acc = 0;
  double mean_staleness = 0;
  std::uint64_t max_staleness = 0;
  std::uint64_t staleness_samples = 0;
  std::uint64_t server_in_bytes = 0;  // bytes this worker sent to servers
  std::uint64_t server_in_msgs = 0;

  bool operator==(const MetricsRecord&) const = default;
};

inline Bytes encode_metrics(const std::vector<MetricsRecord>& records) {
  ByteWriter w;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    w.put(r.epoch).put(r.epoch_time_s).put(r.val_acc).put(r.mean_staleness);
    w.put(r.max_staleness).put(r.staleness_samples).put(r.server_in_bytes).put(r.server_in_msgs);
  }
  return w.take();
}

inline std::vector<MetricsRecord> decode_metrics(std::span<const std::byte> bytes) {
  ByteReader rd(bytes);
  std::vector<MetricsRecord> out(rd.get<std::uint32_t>());
  for (auto& r : out) {
    r.epoch = rd.get<std::uint32_t>();
    r.epoch_time_s = rd.get<double>();
    r.val_acc = rd.get<double>();
    r.mean_staleness = rd.get<double>();
    r.max_staleness = rd.get<std::uint64_t>();
    r.staleness_samples = rd.get<std::uint64_t>();
    r.server_in_bytes = rd.get<std::uint64_t>();
    r.server_in_msgs = rd.get<std::uint64_t>();
  }
  return out;
}

// Per epoch: slowest worker's time, rank 0's accuracy, staleness pooled over
// all samples, traffic summed.
inline std::vector<MetricsRecord> merge_metrics(
    const std::map<std::uint32_t, std::vector<MetricsRecord>>& by_rank) {
  std::map<std::uint32_t, MetricsRecord> merged;
  std::map<std::uint32_t, double> staleness_sum;
  for (const auto& [rank, records] : by_rank) {
    for (const auto& r : records) {
      auto& m = merged[r.epoch];
      m.epoch = r.epoch;
      m.epoch_time_s = std::max(m.epoch_time_s, r.epoch_time_s);
      if (rank == 0) m.val_acc = r.val_acc;
      m.max_staleness = std::max(m.max_staleness, r.max_staleness);
      m.staleness_samples += r.staleness_samples;
      staleness_sum[r.epoch] += r.mean_staleness * static_cast<double>(r.staleness_samples);
      m.server_in_bytes += r.server_in_bytes;
      m.server_in_msgs += r.server_in_msgs;
    }
  }
  std::vector<MetricsRecord> out;
  for (auto& [epoch, m] : merged) {
    if (m.staleness_samples > 0)
      m.mean_staleness = staleness_sum[epoch] / static_cast<double>(m.staleness_samples);
    out.push_back(m);
  }
  return out;
}

inline constexpr const char* kMetricsHeader =
    "run_id,mode,epoch,epoch_time_s,val_acc,mean_staleness,max_staleness,server_in_bytes";

inline void write_metrics_csv(std::ostream& os, std::string_view run_id, std::string_view mode,
                              const std::vector<MetricsRecord>& records, bool header = true) {
  if (header) os << kMetricsHeader << '\n';
  for (const auto& r : records) {
    os << run_id << ',' << mode << ',' << r.epoch << ',' << std::setprecision(9) << r.epoch_time_s
       << ',' << std::setprecision(6) << r.val_acc << ',' << r.mean_staleness << ','
       << r.max_staleness << ',' << r.server_in_bytes << '\n';
  }
}

// Reads rows written by write_metrics_csv. Fields not in the file stay zero.
inline std::vector<MetricsRecord> read_metrics_csv(std::istream& is) {
  std::vector<MetricsRecord> out;
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader)
    throw Error("metrics file lacks the expected header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) throw Error("bad metrics row '" + line + "'");
    MetricsRecord r;
    r.epoch = static_cast<std::uint32_t>(std::stoul(cells[2]));
    r.epoch_time_s = std::stod(cells[3]);
    r.val_acc = std::stod(cells[4]);
    r.mean_staleness = std::stod(cells[5]);
    r.max_staleness = std::stoull(cells[6]);
    r.server_in_bytes = std::stoull(cells[7]);
    out.push_back(r);
  }
  return out;
}

}  // namespace hps::train
