#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "npusim/config.h"
#include "npusim/isa.h"
#include "npusim/memory_request.h"

namespace npusim {

Cycle systolic_compute_latency(uint64_t m_rows, const CoreConfig& cfg);
Cycle preload_latency(uint64_t k_rows, const CoreConfig& cfg);
Cycle vector_latency(uint64_t elements, VectorKind kind, const CoreConfig& cfg,
                     const std::map<VectorKind, Cycle>& op_latency);
Cycle im2col_latency(uint64_t rows, uint64_t cols, uint32_t elem_bytes, const CoreConfig& cfg);

// DRAM-granularity requests for one MVIN/MVOUT: the aligned cover of each
// strided row, with a block shared by adjacent rows emitted once.
std::vector<MemoryRequest> dma_split(const Instruction& instr, uint32_t access_bytes);

enum class InstrStatus : uint8_t { kWaiting, kIssued, kDone };

// Hooks the engine uses for statistics and tracing.
struct CoreObserver {
  virtual ~CoreObserver() = default;
  virtual void on_issue(uint32_t /*core*/, const TileProgram& /*tile*/, uint32_t /*instr*/, Cycle /*now*/) {}
  virtual void on_retire(uint32_t /*core*/, const TileProgram& /*tile*/, uint32_t /*instr*/, Cycle /*now*/) {}
  // A unit was busy over [start, end) on behalf of `tile`.
  virtual void on_busy(uint32_t /*core*/, ExecUnit /*unit*/, const TileProgram& /*tile*/, Cycle /*start*/,
                       Cycle /*end*/) {}
};

struct CoreStats {
  uint64_t tiles_accepted = 0;
  uint64_t tiles_completed = 0;
  uint64_t instrs_issued = 0;
  uint64_t instrs_retired = 0;
  uint64_t read_requests = 0;
  uint64_t write_requests = 0;
  std::array<Cycle, 3> busy_cycles{};  // indexed by ExecUnit
  std::array<uint64_t, 2> peak_spm_bytes{};
  std::array<uint64_t, 2> peak_acc_bytes{};
};

class Core {
 public:
  Core(uint32_t id, const SimConfig& cfg);

  uint32_t id() const { return id_; }

  // Fewer than two live tiles, the next partition in rotation is unbound,
  // and the footprint fits it.
  bool can_accept_tile(const TileProgram& tile) const;
  void accept_tile(std::shared_ptr<const TileProgram> tile, Cycle now);

  // Read response or write acknowledgement for one of this core's requests.
  void deliver(const MemoryRequest& req);

  // One core-clock step: responses, retirement, tile completion, issue.
  void cycle(Cycle now);

  // Requests generated since the last call, in emission order.
  std::vector<MemoryRequest> take_requests();
  // Tiles finished since the last call, in completion order.
  std::vector<std::shared_ptr<const TileProgram>> take_completed();

  // Earliest cycle after `now` at which cycle() can change state without
  // new deliveries or tiles; kNever when the core only waits on memory.
  Cycle next_event(Cycle now) const;

  bool idle() const { return live_.empty(); }
  size_t live_tiles() const { return live_.size(); }
  bool has_issuing_tile() const;
  const CoreStats& stats() const { return stats_; }
  uint64_t spm_in_use(int partition) const { return spm_used_[partition]; }

  void set_observer(CoreObserver* observer) { observer_ = observer; }

 private:
  struct LiveTile {
    std::shared_ptr<const TileProgram> prog;
    int partition = 0;
    uint64_t age = 0;
    std::vector<InstrStatus> status;
    std::vector<Cycle> done_at;
    std::vector<uint32_t> remaining;  // outstanding memory requests per DMA instruction
    size_t issued = 0;
    size_t done = 0;
    size_t next_array = 0;  // program-order cursor over array instructions
    std::array<std::vector<uint32_t>, 3> waiting;  // unissued DMA/vector instructions per unit
  };
  struct Timed {
    Cycle done_at;
    uint64_t age;
    uint32_t idx;
  };

  bool deps_done(const LiveTile& t, const Instruction& in) const;
  LiveTile* find_tile(uint64_t tile_id);
  LiveTile* find_age(uint64_t age);
  void retire(LiveTile& t, uint32_t idx, Cycle now);
  bool try_issue(Cycle now);
  bool issue_array(Cycle now);
  bool issue_unit(ExecUnit unit, Cycle now);
  void start(LiveTile& t, uint32_t idx, Cycle now);
  void pump_dma(Cycle now);

  uint32_t id_;
  const SimConfig& cfg_;
  CoreObserver* observer_ = nullptr;

  std::deque<LiveTile> live_;  // age order
  uint64_t next_age_ = 0;
  int next_partition_ = 0;
  std::array<uint64_t, 2> spm_used_{};
  std::array<uint64_t, 2> acc_used_{};
  std::array<bool, 2> bound_{};

  std::array<Cycle, 3> busy_until_{};
  std::vector<Timed> timed_;  // issued fixed-latency instructions
  std::optional<std::pair<uint64_t, uint32_t>> loaded_weights_;  // (tile, tag)

  std::deque<MemoryRequest> dma_pending_;
  uint64_t next_request_ = 0;

  std::vector<MemoryRequest> arrivals_;
  std::vector<MemoryRequest> outbox_;
  std::vector<std::shared_ptr<const TileProgram>> completed_;
  bool changed_ = false;

  CoreStats stats_;
};

}  // namespace npusim
