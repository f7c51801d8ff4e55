#include "npusim/simulator.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace npusim {

using nlohmann::json;

uint64_t percentile_nearest_rank(std::vector<uint64_t> samples, double p) {
  if (samples.empty()) throw SimError(ErrorCode::kConsistency, "percentile of an empty sample set");
  std::sort(samples.begin(), samples.end());
  const double rank = std::ceil(p / 100.0 * static_cast<double>(samples.size()));
  const size_t idx = static_cast<size_t>(std::clamp(rank, 1.0, static_cast<double>(samples.size()))) - 1;
  return samples[idx];
}

Percentiles summarize(const std::vector<uint64_t>& samples) {
  Percentiles s;
  s.count = samples.size();
  if (samples.empty()) return s;
  double sum = 0;
  for (uint64_t v : samples) sum += static_cast<double>(v);
  s.mean = sum / static_cast<double>(samples.size());
  s.p50 = percentile_nearest_rank(samples, 50);
  s.p95 = percentile_nearest_rank(samples, 95);
  s.p99 = percentile_nearest_rank(samples, 99);
  return s;
}

namespace {

constexpr uint64_t kLatencyBucket = 16;

bool is_attention_node(const std::string& node) { return node.rfind("attn_", 0) == 0; }

double fraction(Cycle busy, Cycle total) {
  return total == 0 ? 0.0 : std::min(1.0, static_cast<double>(busy) / static_cast<double>(total));
}

json percentiles_json(const Percentiles& p) {
  return {{"count", p.count}, {"mean", p.mean}, {"p50", p.p50}, {"p95", p.p95}, {"p99", p.p99}};
}

}  // namespace

// ---------------------------------------------------------------------------

Simulator::Simulator(const SimConfig& cfg, std::vector<InferenceRequest> requests) : cfg_(cfg) {
  validate_config(cfg_);
  mem_ = std::make_unique<MemorySystem>(cfg_.dram);
  noc_ = make_noc(cfg_, *mem_);
  for (uint32_t c = 0; c < cfg_.num_cores; ++c) {
    cores_.push_back(std::make_unique<Core>(c, cfg_));
    cores_.back()->set_observer(this);
  }
  sched_ = std::make_unique<Scheduler>(cfg_, std::move(requests));
  sched_->set_dispatch_hook([this](const TileProgram& t, uint32_t core, Cycle now) { on_dispatch(t, core, now); });
  mem_->set_completion_hook([this](const MemoryRequest& r) { on_dram_done(r); });
}

Simulator::~Simulator() = default;

TimelineRow& Simulator::window(Cycle c) {
  const size_t idx = c / cfg_.stats.timeline_window;
  while (timeline_.size() <= idx) {
    TimelineRow row;
    row.start = timeline_.size() * cfg_.stats.timeline_window;
    row.end = row.start + cfg_.stats.timeline_window;
    row.core_busy.assign(cfg_.num_cores, {});
    timeline_.push_back(std::move(row));
  }
  return timeline_[idx];
}

void Simulator::on_issue(uint32_t core, const TileProgram& tile, uint32_t instr, Cycle now) {
  const Instruction& in = tile.instrs[instr];
  if (trace_) {
    *trace_ << now << " core=" << core << " tile=" << tile.id << " instr=" << instr << ' ' << opcode_name(in.opcode)
            << " issue\n";
  }
  if (in.opcode == Opcode::kGemm) {
    for (uint32_t d : in.deps) {
      const Instruction& pre = tile.instrs[d];
      if (pre.opcode == Opcode::kGemmPreload && pre.weight_tag == in.weight_tag) {
        spans_[{tile.request_id, tile.owner_node, tile.iteration}].macs += uint64_t{in.rows} * in.cols * pre.rows;
      }
    }
  }
  if (is_dma(in.opcode)) {
    spans_[{tile.request_id, tile.owner_node, tile.iteration}].dram_bytes +=
        dma_split(in, cfg_.dram.access_bytes).size() * cfg_.dram.access_bytes;
  }
}

void Simulator::on_retire(uint32_t core, const TileProgram& tile, uint32_t instr, Cycle now) {
  if (trace_) {
    *trace_ << now << " core=" << core << " tile=" << tile.id << " instr=" << instr << ' '
            << opcode_name(tile.instrs[instr].opcode) << " retire\n";
  }
}

void Simulator::on_busy(uint32_t core, ExecUnit unit, const TileProgram& tile, Cycle start, Cycle end) {
  if (unit != ExecUnit::kDma) {
    spans_[{tile.request_id, tile.owner_node, tile.iteration}].compute_busy += end - start;
  }
  if (cfg_.stats.timeline_window == 0) return;
  for (Cycle c = start; c < end;) {
    TimelineRow& row = window(c);
    const Cycle stop = std::min(end, row.end);
    row.core_busy[core][static_cast<int>(unit)] += stop - c;
    c = stop;
  }
}

void Simulator::on_dispatch(const TileProgram& tile, uint32_t core, Cycle now) {
  Span& s = spans_[{tile.request_id, tile.owner_node, tile.iteration}];
  s.first = std::min(s.first, now);
  ++s.tiles;
  if (dispatch_hook_) dispatch_hook_(tile, core, now);
}

void Simulator::on_tile_done(const TileProgram& tile, Cycle now) {
  Span& s = spans_[{tile.request_id, tile.owner_node, tile.iteration}];
  s.last = std::max(s.last, now);
}

void Simulator::on_dram_done(const MemoryRequest& req) {
  const uint64_t latency = req.dram_done - req.dram_arrival;
  ++latency_hist_[latency / kLatencyBucket * kLatencyBucket];
  if (latency < analytic_min_latency(req.row_outcome, cfg_.dram)) ++floor_violations_;
  if (cfg_.stats.timeline_window) window(now_).dram_bytes += req.bytes;
  if (request_hook_) request_hook_(req);
}

StatReport Simulator::run() {
  const uint64_t core_hz = cfg_.core.clock_hz;
  const uint64_t dram_hz = cfg_.dram.dram_clock_hz;
  std::vector<std::shared_ptr<const TileProgram>> finished;
  Cycle now = 0;
  while (true) {
    now_ = now;
    // Skipped cycles were quiet for memory too; catching up first stamps new
    // requests with the current DRAM cycle.
    const uint64_t dram_now = convert_cycles_floor(now, core_hz, dram_hz);
    if (dram_now > 0) mem_->advance_to(dram_now - 1);
    for (auto& core : cores_) {
      core->cycle(now);
      for (const auto& req : core->take_requests()) noc_->inject_request(req, now);
      for (auto& t : core->take_completed()) finished.push_back(std::move(t));
    }
    noc_->forward(now);
    mem_->advance_to(dram_now);
    for (const auto& ack : mem_->take_write_acks()) cores_[ack.core_id]->deliver(ack);
    for (const auto& resp : mem_->take_read_responses()) noc_->inject_response(resp, now);
    for (const auto& resp : noc_->deliver_responses(now)) cores_[resp.core_id]->deliver(resp);
    for (const auto& t : finished) {
      on_tile_done(*t, now);
      sched_->on_tile_complete(*t, now);
    }
    finished.clear();
    sched_->dispatch(cores_, now);
    if (cycle_hook_) cycle_hook_(*this, now);

    const bool cores_idle = std::all_of(cores_.begin(), cores_.end(), [](const auto& c) { return c->idle(); });
    if (sched_->done() && cores_idle && noc_->idle() && mem_->idle()) break;

    Cycle next = std::min(sched_->next_event(now), noc_->next_event(now));
    for (const auto& core : cores_) next = std::min(next, core->next_event(now));
    const uint64_t dram_next = mem_->next_event();
    if (dram_next != kNever) next = std::min(next, std::max(now + 1, convert_cycles_ceil(dram_next, core_hz, dram_hz)));
    if (next == kNever) {
      throw SimError(ErrorCode::kStarvation,
                     "cycle " + std::to_string(now) + ": no component can make progress; " + sched_->describe_stall());
    }
    if (!cfg_.stats.event_jump) next = now + 1;
    if (cfg_.stats.max_cycles && next > cfg_.stats.max_cycles) {
      throw SimError(ErrorCode::kStarvation, "cycle " + std::to_string(now) + ": exceeded stats.max_cycles (" +
                                                 std::to_string(cfg_.stats.max_cycles) + ")");
    }
    now = next;
  }
  return build_report(sched_->last_completion());
}

StatReport Simulator::build_report(Cycle total) const {
  StatReport r;
  r.total_cycles = total;
  r.dram_cycles = convert_cycles_floor(total, cfg_.core.clock_hz, cfg_.dram.dram_clock_hz);
  for (const auto& core : cores_) {
    const CoreStats& s = core->stats();
    CoreReport c;
    c.core = core->id();
    c.systolic_busy = s.busy_cycles[static_cast<int>(ExecUnit::kSystolic)];
    c.vector_busy = s.busy_cycles[static_cast<int>(ExecUnit::kVector)];
    c.dma_busy = s.busy_cycles[static_cast<int>(ExecUnit::kDma)];
    c.tiles = s.tiles_completed;
    c.instructions = s.instrs_retired;
    c.peak_spm_bytes = s.peak_spm_bytes;
    c.peak_acc_bytes = s.peak_acc_bytes;
    r.cores.push_back(c);
  }
  for (uint32_t ch = 0; ch < mem_->num_channels(); ++ch) {
    const ChannelStats& s = mem_->channel(ch).stats();
    r.dram_bytes += s.bytes;
    r.dram_reads += s.reads;
    r.dram_writes += s.writes;
    r.row_hits += s.row_hits;
    r.row_closed += s.row_closed;
    r.row_conflicts += s.row_conflicts;
  }
  r.dram_utilization = std::min(1.0, bandwidth_stats(r.dram_bytes, r.dram_cycles, cfg_.dram).utilization);
  r.dram_latency_histogram = latency_hist_;
  r.noc = noc_->stats();

  // Per-node totals and attention phase spans.
  std::map<std::pair<std::string, std::string>, NodeReport> nodes;
  std::map<std::pair<std::string, uint64_t>, std::pair<Cycle, Cycle>> attn_span;
  std::map<std::string, PhaseReport> attention;
  for (const auto& [key, span] : spans_) {
    const auto& [req, node, iteration] = key;
    NodeReport& n = nodes[{req, node}];
    n.request_id = req;
    n.node = node;
    if (span.first != kNever && span.last >= span.first) n.cycles += span.last - span.first;
    n.dram_bytes += span.dram_bytes;
    n.compute_busy += span.compute_busy;
    n.tiles += span.tiles;
    if (is_attention_node(node)) {
      auto& a = attention[req];
      a.dram_bytes += span.dram_bytes;
      a.compute_busy += span.compute_busy;
      a.macs += span.macs;
      auto [it, fresh] = attn_span.try_emplace({req, iteration}, span.first, span.last);
      if (!fresh) {
        it->second.first = std::min(it->second.first, span.first);
        it->second.second = std::max(it->second.second, span.last);
      }
    }
  }
  for (const auto& [key, s] : attn_span) {
    if (s.first != kNever && s.second >= s.first) attention[key.first].cycles += s.second - s.first;
  }
  for (auto& [key, n] : nodes) r.nodes.push_back(n);

  for (const auto& rec : sched_->records()) {
    RequestReport q;
    q.request_id = rec.request_id;
    q.kind = rec.kind == RequestKind::kGenerative ? "generative" : "static";
    q.background = rec.background;
    q.arrival = rec.arrival;
    q.finish = rec.finish;
    for (const auto& it : rec.iterations) q.latencies.push_back(it.end - it.start);
    if (auto it = attention.find(rec.request_id); it != attention.end()) {
      q.attention = it->second;
      uint64_t serving = cfg_.num_cores;
      if (cfg_.scheduler.policy == SchedulingPolicy::kSpatial) {
        auto p = cfg_.scheduler.partition.find(rec.request_id);
        if (p != cfg_.scheduler.partition.end()) serving = p->second.size();
      }
      q.attention.core_utilization = fraction(q.attention.compute_busy, q.attention.cycles * serving);
      q.attention.mac_utilization =
          fraction(q.attention.macs, q.attention.cycles * serving * cfg_.core.array_h * cfg_.core.array_w);
    }
    r.requests.push_back(std::move(q));
  }

  r.tiles_lowered = sched_->tiles_lowered();
  r.tiles_dispatched = sched_->tiles_dispatched();
  r.tiles_completed = sched_->tiles_completed();
  r.mem_enqueued = mem_->enqueued();
  r.mem_completed = mem_->completed();
  r.dram_floor_violations = floor_violations_;

  r.timeline_window = cfg_.stats.timeline_window;
  if (r.timeline_window) {
    const size_t rows = ceil_div(total, r.timeline_window);
    r.timeline.assign(timeline_.begin(), timeline_.begin() + std::min(rows, timeline_.size()));
    while (r.timeline.size() < rows) {
      TimelineRow row;
      row.start = r.timeline.size() * r.timeline_window;
      row.end = row.start + r.timeline_window;
      row.core_busy.assign(cfg_.num_cores, {});
      r.timeline.push_back(std::move(row));
    }
    if (!r.timeline.empty()) r.timeline.back().end = total;
  }

  r.config = config_to_json(cfg_);
  // Execution switches that must not change results stay out of the echo.
  if (r.config.contains("stats")) r.config["stats"].erase("event_jump");
  return r;
}

// ---------------------------------------------------------------------------

json report_to_json(const StatReport& r) {
  json doc;
  doc["total_cycles"] = r.total_cycles;
  doc["dram_cycles"] = r.dram_cycles;
  json cores = json::array();
  for (const auto& c : r.cores) {
    cores.push_back({{"core", c.core},
                     {"systolic_busy", c.systolic_busy},
                     {"vector_busy", c.vector_busy},
                     {"dma_busy", c.dma_busy},
                     {"systolic_utilization", fraction(c.systolic_busy, r.total_cycles)},
                     {"vector_utilization", fraction(c.vector_busy, r.total_cycles)},
                     {"dma_utilization", fraction(c.dma_busy, r.total_cycles)},
                     {"tiles", c.tiles},
                     {"instructions", c.instructions},
                     {"peak_spm_bytes", c.peak_spm_bytes},
                     {"peak_acc_bytes", c.peak_acc_bytes}});
  }
  doc["cores"] = cores;
  json hist = json::array();
  for (const auto& [bucket, count] : r.dram_latency_histogram) hist.push_back({bucket, count});
  doc["dram"] = {{"bytes", r.dram_bytes},         {"reads", r.dram_reads},
                 {"writes", r.dram_writes},       {"utilization", r.dram_utilization},
                 {"row_hits", r.row_hits},        {"row_closed", r.row_closed},
                 {"row_conflicts", r.row_conflicts}, {"latency_histogram", hist}};
  doc["noc"] = {{"request_packets", r.noc.request_packets},
                {"response_packets", r.noc.response_packets},
                {"flits", r.noc.flits},
                {"bytes", r.noc.bytes},
                {"bytes_per_cycle", r.total_cycles ? static_cast<double>(r.noc.bytes) / r.total_cycles : 0.0}};
  json reqs = json::array();
  for (const auto& q : r.requests) {
    json j = {{"request_id", q.request_id}, {"kind", q.kind},     {"background", q.background},
              {"arrival", q.arrival},       {"finish", q.finish}, {"executions", q.latencies.size()}};
    if (!q.latencies.empty()) {
      if (q.kind == "generative") {
        j["tbt"] = percentiles_json(summarize(q.latencies));
        j["tbt_samples"] = q.latencies;
      } else {
        j["latency"] = percentiles_json(summarize(q.latencies));
      }
    }
    if (q.attention.cycles) {
      j["attention"] = {{"cycles", q.attention.cycles},
                        {"dram_bytes", q.attention.dram_bytes},
                        {"compute_busy", q.attention.compute_busy},
                        {"core_utilization", q.attention.core_utilization},
                        {"macs", q.attention.macs},
                        {"mac_utilization", q.attention.mac_utilization}};
    }
    reqs.push_back(std::move(j));
  }
  doc["requests"] = reqs;
  json nodes = json::array();
  for (const auto& n : r.nodes) {
    nodes.push_back({{"request_id", n.request_id},
                     {"node", n.node},
                     {"cycles", n.cycles},
                     {"dram_bytes", n.dram_bytes},
                     {"compute_busy", n.compute_busy},
                     {"tiles", n.tiles}});
  }
  doc["nodes"] = nodes;
  doc["audits"] = {{"tiles_lowered", r.tiles_lowered},
                   {"tiles_dispatched", r.tiles_dispatched},
                   {"tiles_completed", r.tiles_completed},
                   {"memory_requests_enqueued", r.mem_enqueued},
                   {"memory_requests_completed", r.mem_completed},
                   {"dram_floor_violations", r.dram_floor_violations}};
  doc["config"] = r.config;
  return doc;
}

std::string timeline_csv(const StatReport& r) {
  std::ostringstream os;
  os << "window_start,window_end";
  const size_t cores = r.cores.size();
  for (size_t c = 0; c < cores; ++c) {
    os << ",core" << c << "_systolic,core" << c << "_vector,core" << c << "_dma";
  }
  os << ",dram_bytes,dram_utilization\n";
  for (const auto& row : r.timeline) {
    const Cycle len = row.end - row.start;
    os << row.start << ',' << row.end;
    for (size_t c = 0; c < cores; ++c) {
      for (int u : {static_cast<int>(ExecUnit::kSystolic), static_cast<int>(ExecUnit::kVector),
                    static_cast<int>(ExecUnit::kDma)}) {
        os << ',' << fraction(c < row.core_busy.size() ? row.core_busy[c][u] : 0, len);
      }
    }
    const auto& dram = r.config.at("dram");
    const double peak = dram.at("peak_bytes_per_cycle").get<double>() * dram.at("channels").get<double>();
    const double ratio = dram.at("dram_clock_hz").get<double>() / r.config.at("core").at("clock_hz").get<double>();
    const double util = len ? static_cast<double>(row.dram_bytes) / (static_cast<double>(len) * ratio * peak) : 0.0;
    os << ',' << row.dram_bytes << ',' << std::min(1.0, util) << '\n';
  }
  return os.str();
}

std::string dram_latency_csv(const StatReport& r) {
  std::ostringstream os;
  os << "latency_bucket,count\n";
  for (const auto& [bucket, count] : r.dram_latency_histogram) os << bucket << ',' << count << '\n';
  return os.str();
}

void emit_report(const StatReport& report, const std::string& json_path) {
  auto write = [](const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw SimError(ErrorCode::kIo, "cannot write '" + path + "'");
    out << text;
    if (!out) throw SimError(ErrorCode::kIo, "failed writing '" + path + "'");
  };
  write(json_path, report_to_json(report).dump(2) + "\n");
  if (report.timeline_window) {
    std::filesystem::path p(json_path);
    p.replace_extension(".timeline.csv");
    write(p.string(), timeline_csv(report));
  }
}

}  // namespace npusim
