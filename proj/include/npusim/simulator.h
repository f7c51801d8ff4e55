#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "npusim/config.h"
#include "npusim/core.h"
#include "npusim/dram.h"
#include "npusim/noc.h"
#include "npusim/scheduler.h"

namespace npusim {

// Nearest-rank percentile; samples need not be sorted. Requires samples.
uint64_t percentile_nearest_rank(std::vector<uint64_t> samples, double p);

struct Percentiles {
  uint64_t count = 0;
  double mean = 0;
  uint64_t p50 = 0, p95 = 0, p99 = 0;
};

Percentiles summarize(const std::vector<uint64_t>& samples);

struct CoreReport {
  uint32_t core = 0;
  Cycle systolic_busy = 0;
  Cycle vector_busy = 0;
  Cycle dma_busy = 0;
  uint64_t tiles = 0;
  uint64_t instructions = 0;
  std::array<uint64_t, 2> peak_spm_bytes{};
  std::array<uint64_t, 2> peak_acc_bytes{};
};

struct NodeReport {
  std::string request_id;
  std::string node;
  Cycle cycles = 0;  // summed over executions, first dispatch to last completion
  uint64_t dram_bytes = 0;
  Cycle compute_busy = 0;  // systolic + vector
  uint64_t tiles = 0;
};

struct PhaseReport {
  Cycle cycles = 0;
  uint64_t dram_bytes = 0;
  Cycle compute_busy = 0;
  uint64_t macs = 0;
  double core_utilization = 0;  // compute_busy / (cycles * cores serving the request)
  double mac_utilization = 0;   // macs / (cycles * cores serving the request * PEs per core)
};

struct RequestReport {
  std::string request_id;
  std::string kind;
  bool background = false;
  Cycle arrival = 0;
  Cycle finish = 0;
  std::vector<Cycle> latencies;  // per execution (static) or per token (generative)
  PhaseReport attention;
};

struct TimelineRow {
  Cycle start = 0;
  Cycle end = 0;
  std::vector<std::array<Cycle, 3>> core_busy;  // per core, indexed by ExecUnit
  uint64_t dram_bytes = 0;
};

struct StatReport {
  Cycle total_cycles = 0;
  uint64_t dram_cycles = 0;
  std::vector<CoreReport> cores;

  uint64_t dram_bytes = 0;
  uint64_t dram_reads = 0;
  uint64_t dram_writes = 0;
  uint64_t row_hits = 0;
  uint64_t row_closed = 0;
  uint64_t row_conflicts = 0;
  double dram_utilization = 0;
  std::map<uint64_t, uint64_t> dram_latency_histogram;  // bucket start (DRAM cycles) -> count

  NocStats noc;

  std::vector<RequestReport> requests;
  std::vector<NodeReport> nodes;

  uint64_t tiles_lowered = 0;
  uint64_t tiles_dispatched = 0;
  uint64_t tiles_completed = 0;
  uint64_t mem_enqueued = 0;
  uint64_t mem_completed = 0;
  uint64_t dram_floor_violations = 0;

  Cycle timeline_window = 0;
  std::vector<TimelineRow> timeline;

  nlohmann::json config;
};

nlohmann::json report_to_json(const StatReport& report);
std::string timeline_csv(const StatReport& report);
std::string dram_latency_csv(const StatReport& report);
// Writes the JSON summary and, when a window is set, `<stem>.timeline.csv`
// next to it. Throws SimError(kIo) on unwritable paths.
void emit_report(const StatReport& report, const std::string& json_path);

class Simulator : private CoreObserver {
 public:
  Simulator(const SimConfig& cfg, std::vector<InferenceRequest> requests);
  ~Simulator() override;

  StatReport run();

  void set_trace(std::ostream* trace) { trace_ = trace; }
  void set_dram_command_log(std::vector<DramCommand>* log) { mem_->set_command_log(log); }
  void set_request_hook(std::function<void(const MemoryRequest&)> hook) { request_hook_ = std::move(hook); }
  void set_dispatch_hook(std::function<void(const TileProgram&, uint32_t, Cycle)> hook) {
    dispatch_hook_ = std::move(hook);
  }
  // Called after every simulated cycle with the current cycle.
  void set_cycle_hook(std::function<void(const Simulator&, Cycle)> hook) { cycle_hook_ = std::move(hook); }

  const Core& core(uint32_t i) const { return *cores_[i]; }
  const MemorySystem& memory() const { return *mem_; }
  const Scheduler& scheduler() const { return *sched_; }

 private:
  void on_issue(uint32_t core, const TileProgram& tile, uint32_t instr, Cycle now) override;
  void on_retire(uint32_t core, const TileProgram& tile, uint32_t instr, Cycle now) override;
  void on_busy(uint32_t core, ExecUnit unit, const TileProgram& tile, Cycle start, Cycle end) override;

  void on_dispatch(const TileProgram& tile, uint32_t core, Cycle now);
  void on_tile_done(const TileProgram& tile, Cycle now);
  void on_dram_done(const MemoryRequest& req);
  TimelineRow& window(Cycle c);
  StatReport build_report(Cycle total) const;

  struct Span {
    Cycle first = kNever;
    Cycle last = 0;
    uint64_t dram_bytes = 0;
    Cycle compute_busy = 0;
    uint64_t macs = 0;
    uint64_t tiles = 0;
  };
  using SpanKey = std::tuple<std::string, std::string, uint64_t>;  // request, node, iteration

  const SimConfig& cfg_;
  std::unique_ptr<MemorySystem> mem_;
  std::unique_ptr<Noc> noc_;
  std::vector<std::unique_ptr<Core>> cores_;
  std::unique_ptr<Scheduler> sched_;

  std::ostream* trace_ = nullptr;
  std::function<void(const MemoryRequest&)> request_hook_;
  std::function<void(const TileProgram&, uint32_t, Cycle)> dispatch_hook_;
  std::function<void(const Simulator&, Cycle)> cycle_hook_;

  Cycle now_ = 0;
  std::map<SpanKey, Span> spans_;
  std::vector<TimelineRow> timeline_;
  std::map<uint64_t, uint64_t> latency_hist_;
  uint64_t floor_violations_ = 0;
};

}  // namespace npusim
