#include "npusim/config.h"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace npusim {

using nlohmann::json;

uint64_t DramConfig::cycles(double ns) const {
  const double c = ns * static_cast<double>(dram_clock_hz) / 1e9;
  return static_cast<uint64_t>(std::ceil(c - 1e-9));
}

uint64_t DramConfig::burst_cycles() const {
  return std::max<uint64_t>(1, static_cast<uint64_t>(std::ceil(access_bytes / peak_bytes_per_cycle - 1e-9)));
}

namespace {

std::map<VectorKind, Cycle> default_op_latency() {
  return {{VectorKind::kAdd, 1},     {VectorKind::kMul, 1},       {VectorKind::kGelu, 4},
          {VectorKind::kRelu, 1},    {VectorKind::kSoftmax, 8},   {VectorKind::kLayerNorm, 8},
          {VectorKind::kAccReduce, 1}};
}

}  // namespace

SimConfig mobile_preset() {
  SimConfig cfg;
  cfg.num_cores = 4;
  cfg.core = CoreConfig{.array_h = 8,
                        .array_w = 8,
                        .vector_lanes = 8,
                        .alus_per_lane = 16,
                        .spm_bytes = 64 * 1024,
                        .acc_bytes = 16 * 1024,
                        .spm_word_bytes = 64,
                        .acc_elem_bytes = 4,
                        .clock_hz = 1'000'000'000};
  // DDR4, 12 GB/s split over the two channels a 4x2 crossbar implies.
  cfg.dram.channels = 2;
  cfg.dram.banks_per_channel = 16;
  cfg.dram.row_bytes = 8192;
  cfg.dram.access_bytes = 64;
  cfg.dram.timing_ns = {22, 22, 56, 24, 22};
  cfg.dram.dram_clock_hz = 1'000'000'000;
  cfg.dram.peak_bytes_per_cycle = 6.0;
  cfg.noc.model = NocModel::kCrossbar;
  cfg.noc.input_ports = 4;
  cfg.noc.output_ports = 2;
  cfg.noc.clock_hz = 2'000'000'000;
  cfg.op_latency = default_op_latency();
  return cfg;
}

SimConfig server_preset() {
  SimConfig cfg;
  cfg.num_cores = 4;
  cfg.core = CoreConfig{.array_h = 128,
                        .array_w = 128,
                        .vector_lanes = 128,
                        .alus_per_lane = 16,
                        .spm_bytes = 32ull * 1024 * 1024,
                        .acc_bytes = 4ull * 1024 * 1024,
                        .spm_word_bytes = 256,
                        .acc_elem_bytes = 4,
                        .clock_hz = 1'000'000'000};
  // HBM2, two stacks of eight channels, 614 GB/s aggregate.
  cfg.dram.channels = 16;
  cfg.dram.banks_per_channel = 16;
  cfg.dram.row_bytes = 2048;
  cfg.dram.access_bytes = 64;
  cfg.dram.timing_ns = {7, 7, 17, 8, 7};
  cfg.dram.dram_clock_hz = 1'000'000'000;
  cfg.dram.peak_bytes_per_cycle = 614.0 / 16.0;
  cfg.noc.model = NocModel::kCrossbar;
  cfg.noc.input_ports = 4;
  cfg.noc.output_ports = 16;
  // 64-bit flits need a fast link clock to carry a 4-way share of 614 GB/s.
  cfg.noc.clock_hz = 24'000'000'000;
  cfg.op_latency = default_op_latency();
  return cfg;
}

namespace {

const json& section(const json& doc, const char* key) {
  if (!doc.contains(key) || !doc.at(key).is_object()) {
    throw SimError(ErrorCode::kConfig, std::string("missing config section '") + key + "'");
  }
  return doc.at(key);
}

template <typename T>
T required(const json& obj, const std::string& prefix, const char* key) {
  const std::string name = prefix.empty() ? key : prefix + "." + key;
  if (!obj.contains(key)) throw SimError(ErrorCode::kConfig, "missing config field '" + name + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw SimError(ErrorCode::kConfig, "config field '" + name + "' has the wrong type");
  }
}

template <typename T>
T optional_field(const json& obj, const std::string& prefix, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  return required<T>(obj, prefix, key);
}

const char* policy_name(SchedulingPolicy p) {
  return p == SchedulingPolicy::kSpatial ? "spatial" : "time_share";
}

}  // namespace

SimConfig config_from_json(const json& doc) {
  SimConfig cfg;
  cfg.num_cores = required<uint32_t>(doc, "", "num_cores");

  const json& core = section(doc, "core");
  cfg.core.array_h = required<uint32_t>(core, "core", "array_h");
  cfg.core.array_w = required<uint32_t>(core, "core", "array_w");
  cfg.core.vector_lanes = required<uint32_t>(core, "core", "vector_lanes");
  cfg.core.alus_per_lane = optional_field<uint32_t>(core, "core", "alus_per_lane", 16);
  cfg.core.spm_bytes = required<uint64_t>(core, "core", "spm_bytes");
  cfg.core.acc_bytes = required<uint64_t>(core, "core", "acc_bytes");
  cfg.core.spm_word_bytes = optional_field<uint32_t>(core, "core", "spm_word_bytes", 64);
  cfg.core.acc_elem_bytes = optional_field<uint32_t>(core, "core", "acc_elem_bytes", 4);
  cfg.core.clock_hz = required<uint64_t>(core, "core", "clock_hz");

  const json& dram = section(doc, "dram");
  cfg.dram.channels = required<uint32_t>(dram, "dram", "channels");
  cfg.dram.banks_per_channel = required<uint32_t>(dram, "dram", "banks_per_channel");
  cfg.dram.row_bytes = required<uint64_t>(dram, "dram", "row_bytes");
  cfg.dram.access_bytes = optional_field<uint32_t>(dram, "dram", "access_bytes", 64);
  const json& timing = section(dram, "timing_ns");
  cfg.dram.timing_ns.tCL = required<double>(timing, "dram.timing_ns", "tCL");
  cfg.dram.timing_ns.tRCD = required<double>(timing, "dram.timing_ns", "tRCD");
  cfg.dram.timing_ns.tRAS = required<double>(timing, "dram.timing_ns", "tRAS");
  cfg.dram.timing_ns.tWR = required<double>(timing, "dram.timing_ns", "tWR");
  cfg.dram.timing_ns.tRP = required<double>(timing, "dram.timing_ns", "tRP");
  cfg.dram.dram_clock_hz = required<uint64_t>(dram, "dram", "dram_clock_hz");
  cfg.dram.peak_bytes_per_cycle = required<double>(dram, "dram", "peak_bytes_per_cycle");
  cfg.dram.queue_capacity = optional_field<uint32_t>(dram, "dram", "queue_capacity", 32);
  cfg.dram.starvation_age = optional_field<uint64_t>(dram, "dram", "starvation_age", 4096);

  const json& noc = section(doc, "noc");
  const auto model = required<std::string>(noc, "noc", "model");
  if (model == "simple") {
    cfg.noc.model = NocModel::kSimple;
  } else if (model == "crossbar") {
    cfg.noc.model = NocModel::kCrossbar;
  } else {
    throw SimError(ErrorCode::kConfig, "noc.model must be 'simple' or 'crossbar', got '" + model + "'");
  }
  cfg.noc.latency_cycles = optional_field<uint32_t>(noc, "noc", "latency_cycles", 10);
  cfg.noc.bytes_per_cycle = optional_field<uint32_t>(noc, "noc", "bytes_per_cycle", 32);
  cfg.noc.flit_bytes = optional_field<uint32_t>(noc, "noc", "flit_bytes", 8);
  cfg.noc.header_flits = optional_field<uint32_t>(noc, "noc", "header_flits", 1);
  cfg.noc.input_ports = optional_field<uint32_t>(noc, "noc", "input_ports", cfg.num_cores);
  cfg.noc.output_ports = optional_field<uint32_t>(noc, "noc", "output_ports", cfg.dram.channels);
  cfg.noc.input_buffer_packets = optional_field<uint32_t>(noc, "noc", "input_buffer_packets", 8);
  cfg.noc.clock_hz = optional_field<uint64_t>(noc, "noc", "clock_hz", cfg.core.clock_hz);

  cfg.op_latency = default_op_latency();
  if (doc.contains("op_latency")) {
    for (const auto& [key, value] : doc.at("op_latency").items()) {
      auto kind = parse_vector_kind(key);
      if (!kind) throw SimError(ErrorCode::kConfig, "unknown vector kind 'op_latency." + key + "'");
      cfg.op_latency[*kind] = value.get<Cycle>();
    }
  }

  if (doc.contains("scheduler")) {
    const json& sched = doc.at("scheduler");
    const auto policy = optional_field<std::string>(sched, "scheduler", "policy", "time_share");
    if (policy == "time_share") {
      cfg.scheduler.policy = SchedulingPolicy::kTimeShare;
    } else if (policy == "spatial") {
      cfg.scheduler.policy = SchedulingPolicy::kSpatial;
    } else {
      throw SimError(ErrorCode::kConfig, "scheduler.policy must be 'time_share' or 'spatial'");
    }
    if (sched.contains("partition")) {
      for (const auto& [req, cores] : sched.at("partition").items()) {
        cfg.scheduler.partition[req] = cores.get<std::vector<uint32_t>>();
      }
    }
  }

  cfg.dram_base = optional_field<Addr>(doc, "", "dram_base", 0);
  if (doc.contains("stats")) {
    const json& st = doc.at("stats");
    cfg.stats.timeline_window = optional_field<Cycle>(st, "stats", "timeline_window", 0);
    cfg.stats.trace = optional_field<bool>(st, "stats", "trace", false);
    cfg.stats.event_jump = optional_field<bool>(st, "stats", "event_jump", true);
    cfg.stats.max_cycles = optional_field<Cycle>(st, "stats", "max_cycles", 0);
  }
  return cfg;
}

json config_to_json(const SimConfig& cfg) {
  json doc;
  doc["num_cores"] = cfg.num_cores;
  doc["core"] = {{"array_h", cfg.core.array_h},
                 {"array_w", cfg.core.array_w},
                 {"vector_lanes", cfg.core.vector_lanes},
                 {"alus_per_lane", cfg.core.alus_per_lane},
                 {"spm_bytes", cfg.core.spm_bytes},
                 {"acc_bytes", cfg.core.acc_bytes},
                 {"spm_word_bytes", cfg.core.spm_word_bytes},
                 {"acc_elem_bytes", cfg.core.acc_elem_bytes},
                 {"clock_hz", cfg.core.clock_hz}};
  doc["dram"] = {{"channels", cfg.dram.channels},
                 {"banks_per_channel", cfg.dram.banks_per_channel},
                 {"row_bytes", cfg.dram.row_bytes},
                 {"access_bytes", cfg.dram.access_bytes},
                 {"timing_ns",
                  {{"tCL", cfg.dram.timing_ns.tCL},
                   {"tRCD", cfg.dram.timing_ns.tRCD},
                   {"tRAS", cfg.dram.timing_ns.tRAS},
                   {"tWR", cfg.dram.timing_ns.tWR},
                   {"tRP", cfg.dram.timing_ns.tRP}}},
                 {"dram_clock_hz", cfg.dram.dram_clock_hz},
                 {"peak_bytes_per_cycle", cfg.dram.peak_bytes_per_cycle},
                 {"queue_capacity", cfg.dram.queue_capacity},
                 {"starvation_age", cfg.dram.starvation_age}};
  doc["noc"] = {{"model", cfg.noc.model == NocModel::kSimple ? "simple" : "crossbar"},
                {"latency_cycles", cfg.noc.latency_cycles},
                {"bytes_per_cycle", cfg.noc.bytes_per_cycle},
                {"flit_bytes", cfg.noc.flit_bytes},
                {"header_flits", cfg.noc.header_flits},
                {"input_ports", cfg.noc.input_ports},
                {"output_ports", cfg.noc.output_ports},
                {"input_buffer_packets", cfg.noc.input_buffer_packets},
                {"clock_hz", cfg.noc.clock_hz}};
  json lat = json::object();
  for (const auto& [kind, cycles] : cfg.op_latency) lat[vector_kind_name(kind)] = cycles;
  doc["op_latency"] = lat;
  json part = json::object();
  for (const auto& [req, cores] : cfg.scheduler.partition) part[req] = cores;
  doc["scheduler"] = {{"policy", policy_name(cfg.scheduler.policy)}, {"partition", part}};
  doc["dram_base"] = cfg.dram_base;
  doc["stats"] = {{"timeline_window", cfg.stats.timeline_window},
                  {"trace", cfg.stats.trace},
                  {"event_jump", cfg.stats.event_jump},
                  {"max_cycles", cfg.stats.max_cycles}};
  return doc;
}

void validate_config(const SimConfig& cfg) {
  auto fail = [](const std::string& msg) { throw SimError(ErrorCode::kConfig, msg); };
  auto positive = [&](uint64_t v, const char* name) {
    if (v == 0) fail(std::string(name) + " must be positive");
  };
  positive(cfg.num_cores, "num_cores");
  positive(cfg.core.array_h, "core.array_h");
  positive(cfg.core.array_w, "core.array_w");
  positive(cfg.core.vector_lanes, "core.vector_lanes");
  positive(cfg.core.alus_per_lane, "core.alus_per_lane");
  positive(cfg.core.spm_bytes, "core.spm_bytes");
  positive(cfg.core.acc_bytes, "core.acc_bytes");
  positive(cfg.core.spm_word_bytes, "core.spm_word_bytes");
  positive(cfg.core.acc_elem_bytes, "core.acc_elem_bytes");
  positive(cfg.core.clock_hz, "core.clock_hz");
  if (cfg.core.spm_bytes % 2 || cfg.core.acc_bytes % 2) {
    fail("core.spm_bytes and core.acc_bytes must be even (two partitions each)");
  }
  positive(cfg.dram.channels, "dram.channels");
  positive(cfg.dram.banks_per_channel, "dram.banks_per_channel");
  positive(cfg.dram.row_bytes, "dram.row_bytes");
  positive(cfg.dram.access_bytes, "dram.access_bytes");
  positive(cfg.dram.dram_clock_hz, "dram.dram_clock_hz");
  positive(cfg.dram.queue_capacity, "dram.queue_capacity");
  if (!(cfg.dram.peak_bytes_per_cycle > 0)) fail("dram.peak_bytes_per_cycle must be positive");
  const auto& t = cfg.dram.timing_ns;
  for (double v : {t.tCL, t.tRCD, t.tRAS, t.tWR, t.tRP}) {
    if (!(v > 0)) fail("dram.timing_ns values must be positive");
  }
  if (t.tRAS < t.tRCD) fail("dram.timing_ns.tRAS must be >= dram.timing_ns.tRCD");
  if (cfg.dram.row_bytes % cfg.dram.access_bytes) {
    fail("dram.access_bytes (" + std::to_string(cfg.dram.access_bytes) + ") must divide dram.row_bytes (" +
         std::to_string(cfg.dram.row_bytes) + ")");
  }
  if (!is_power_of_two(cfg.dram.channels)) {
    fail("dram.channels (" + std::to_string(cfg.dram.channels) + ") must be a power of two for IPOLY hashing");
  }
  positive(cfg.noc.latency_cycles, "noc.latency_cycles");
  positive(cfg.noc.bytes_per_cycle, "noc.bytes_per_cycle");
  positive(cfg.noc.flit_bytes, "noc.flit_bytes");
  positive(cfg.noc.input_buffer_packets, "noc.input_buffer_packets");
  positive(cfg.noc.clock_hz, "noc.clock_hz");
  if (cfg.noc.model == NocModel::kCrossbar) {
    if (cfg.noc.input_ports != cfg.num_cores) {
      fail("noc.input_ports (" + std::to_string(cfg.noc.input_ports) + ") does not match num_cores (" +
           std::to_string(cfg.num_cores) + ")");
    }
    if (cfg.noc.output_ports != cfg.dram.channels) {
      fail("noc.output_ports (" + std::to_string(cfg.noc.output_ports) + ") does not match dram.channels (" +
           std::to_string(cfg.dram.channels) + ")");
    }
  }
  std::map<uint32_t, std::string> owner;
  for (const auto& [req, cores] : cfg.scheduler.partition) {
    for (uint32_t c : cores) {
      if (c >= cfg.num_cores) {
        fail("scheduler.partition." + req + " names core " + std::to_string(c) + " but num_cores is " +
             std::to_string(cfg.num_cores));
      }
      auto [it, inserted] = owner.emplace(c, req);
      if (!inserted && it->second != req) {
        fail("scheduler.partition assigns core " + std::to_string(c) + " to both '" + it->second + "' and '" +
             req + "'");
      }
    }
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw SimError(ErrorCode::kConfig, "override must look like key.path=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
}

SimConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw SimError(ErrorCode::kIo, "cannot open config file '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw SimError(ErrorCode::kConfig, "malformed config '" + path + "': " + e.what());
  }
  for (const auto& o : overrides) apply_override(doc, o);
  SimConfig cfg = config_from_json(doc);
  validate_config(cfg);
  return cfg;
}

}  // namespace npusim
