#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <vector>

#include "npusim/config.h"
#include "npusim/memory_request.h"

namespace npusim {

// Irreducible polynomial of degree k over GF(2) (bit i = coefficient of x^i).
uint64_t ipoly_polynomial(unsigned degree);
// Block index reduced modulo the degree-k polynomial.
uint32_t ipoly_hash(uint64_t block, unsigned degree);
uint32_t ipoly_channel(Addr addr, const DramConfig& cfg);

struct DramAddress {
  uint32_t channel = 0;
  uint32_t bank = 0;
  uint64_t row = 0;
  uint64_t column = 0;
};

DramAddress map_address(Addr addr, const DramConfig& cfg);

// Lowest latency a request can see for its row-buffer outcome, DRAM cycles.
uint64_t analytic_min_latency(RowOutcome outcome, const DramConfig& cfg);

enum class DramCommandKind { kActivate, kPrecharge, kRead, kWrite };

struct DramCommand {
  DramCommandKind kind;
  uint64_t cycle;
  uint32_t bank;
  uint64_t row;
  uint64_t request_id;
};

struct ChannelStats {
  uint64_t reads = 0;
  uint64_t writes = 0;
  uint64_t bytes = 0;
  uint64_t row_hits = 0;
  uint64_t row_closed = 0;
  uint64_t row_conflicts = 0;
  uint64_t activates = 0;
  uint64_t precharges = 0;
};

class DramChannel {
 public:
  DramChannel(uint32_t index, const DramConfig& cfg);

  bool can_enqueue() const { return queue_.size() < cfg_.queue_capacity; }
  void enqueue(MemoryRequest req, uint64_t now);
  // Issues at most one command at DRAM cycle `now` and finishes data bursts.
  void cycle(uint64_t now);
  // Requests whose data burst ended, in completion order.
  std::vector<MemoryRequest> take_completed();
  uint64_t next_event(uint64_t now) const;

  size_t queued() const { return queue_.size(); }
  size_t in_flight() const { return inflight_.size(); }
  const ChannelStats& stats() const { return stats_; }
  void set_command_log(std::vector<DramCommand>* log) { log_ = log; }

 private:
  struct Bank {
    std::optional<uint64_t> open_row;
    uint64_t next_act = 0;
    uint64_t next_col = 0;
    uint64_t next_pre = 0;
  };
  struct Entry {
    MemoryRequest req;
    DramAddress loc;
    bool precharged = false;
    bool activated = false;
  };

  bool column_legal(const Entry& e, uint64_t now) const;
  bool bank_has_hits(uint32_t bank) const;
  // A request to another row has waited past the starvation age.
  bool bank_starved(uint32_t bank, uint64_t now) const;
  void log(DramCommandKind kind, uint64_t now, const Entry& e);

  uint32_t index_;
  const DramConfig& cfg_;
  uint64_t tCL_, tRCD_, tRAS_, tWR_, tRP_, burst_;
  std::vector<Bank> banks_;
  std::deque<Entry> queue_;  // arrival order
  std::vector<MemoryRequest> inflight_;
  std::vector<MemoryRequest> completed_;
  uint64_t bus_free_ = 0;
  ChannelStats stats_;
  std::vector<DramCommand>* log_ = nullptr;
};

struct BandwidthStats {
  uint64_t bytes = 0;
  double utilization = 0.0;
};

BandwidthStats bandwidth_stats(uint64_t bytes, uint64_t window_dram_cycles, const DramConfig& cfg);

class MemorySystem {
 public:
  explicit MemorySystem(const DramConfig& cfg);

  uint32_t channel_of(Addr addr) const { return ipoly_channel(addr, cfg_); }
  bool can_accept(uint32_t channel) const { return channels_[channel].can_enqueue(); }
  // Writes are acknowledged on acceptance; the ack is returned here.
  void enqueue(MemoryRequest req);

  // Runs every DRAM cycle up to and including `dram_cycle`.
  void advance_to(uint64_t dram_cycle);
  uint64_t now() const { return now_; }
  uint64_t next_event() const;

  std::vector<MemoryRequest> take_read_responses();
  std::vector<MemoryRequest> take_write_acks();

  uint32_t num_channels() const { return static_cast<uint32_t>(channels_.size()); }
  const DramChannel& channel(uint32_t c) const { return channels_[c]; }
  uint64_t enqueued() const { return enqueued_; }
  uint64_t completed() const { return completed_; }
  uint64_t total_bytes() const;
  bool idle() const;

  void set_command_log(std::vector<DramCommand>* log);
  // Called once per finished request (reads and writes) with final timestamps.
  void set_completion_hook(std::function<void(const MemoryRequest&)> hook) { hook_ = std::move(hook); }

 private:
  const DramConfig& cfg_;
  std::vector<DramChannel> channels_;
  uint64_t now_ = 0;
  bool started_ = false;
  uint64_t enqueued_ = 0;
  uint64_t completed_ = 0;
  std::vector<MemoryRequest> reads_;
  std::vector<MemoryRequest> acks_;
  std::function<void(const MemoryRequest&)> hook_;
};

}  // namespace npusim
