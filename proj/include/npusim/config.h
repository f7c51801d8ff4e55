#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "npusim/common.h"
#include "npusim/isa.h"

namespace npusim {

struct CoreConfig {
  uint32_t array_h = 8;
  uint32_t array_w = 8;
  uint32_t vector_lanes = 8;
  uint32_t alus_per_lane = 16;
  uint64_t spm_bytes = 64 * 1024;
  uint64_t acc_bytes = 16 * 1024;
  uint32_t spm_word_bytes = 64;
  uint32_t acc_elem_bytes = 4;
  uint64_t clock_hz = 1'000'000'000;

  uint64_t spm_partition_bytes() const { return spm_bytes / 2; }
  uint64_t acc_partition_bytes() const { return acc_bytes / 2; }
};

struct DramTiming {
  double tCL = 22;
  double tRCD = 22;
  double tRAS = 56;
  double tWR = 24;
  double tRP = 22;
};

struct DramConfig {
  uint32_t channels = 1;
  uint32_t banks_per_channel = 16;
  uint64_t row_bytes = 8192;
  uint32_t access_bytes = 64;
  DramTiming timing_ns;
  uint64_t dram_clock_hz = 1'000'000'000;
  double peak_bytes_per_cycle = 12.0;  // per channel, DRAM clock domain
  uint32_t queue_capacity = 32;
  uint64_t starvation_age = 4096;  // DRAM cycles before oldest-first override

  // Timing parameters in DRAM cycles (ceil of ns * clock).
  uint64_t cycles(double ns) const;
  uint64_t burst_cycles() const;
};

enum class NocModel { kSimple, kCrossbar };

struct NocConfig {
  NocModel model = NocModel::kCrossbar;
  uint32_t latency_cycles = 10;
  uint32_t bytes_per_cycle = 32;
  uint32_t flit_bytes = 8;
  uint32_t header_flits = 1;
  uint32_t input_ports = 4;
  uint32_t output_ports = 1;
  uint32_t input_buffer_packets = 8;
  uint64_t clock_hz = 1'000'000'000;  // crossbar flit clock
};

enum class SchedulingPolicy { kTimeShare, kSpatial };

struct SchedulerConfig {
  SchedulingPolicy policy = SchedulingPolicy::kTimeShare;
  std::map<std::string, std::vector<uint32_t>> partition;  // request id -> cores
};

struct StatOptions {
  Cycle timeline_window = 0;  // 0 disables CSV timelines
  bool trace = false;
  bool event_jump = true;
  Cycle max_cycles = 0;  // 0 means unbounded
};

struct SimConfig {
  CoreConfig core;
  uint32_t num_cores = 4;
  DramConfig dram;
  NocConfig noc;
  std::map<VectorKind, Cycle> op_latency;
  SchedulerConfig scheduler;
  Addr dram_base = 0;
  StatOptions stats;
};

SimConfig mobile_preset();
SimConfig server_preset();

SimConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const SimConfig& cfg);
// Throws SimError(kConfig) naming the inconsistent fields.
void validate_config(const SimConfig& cfg);

// Applies "a.b.c=value" to a config document; value is parsed as JSON when
// possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

SimConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

}  // namespace npusim
