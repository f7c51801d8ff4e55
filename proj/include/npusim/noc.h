#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "npusim/config.h"
#include "npusim/dram.h"
#include "npusim/memory_request.h"

namespace npusim {

struct NocStats {
  uint64_t request_packets = 0;
  uint64_t response_packets = 0;
  uint64_t flits = 0;
  uint64_t bytes = 0;
};

// Transport between core DMA engines and memory controllers. Requests go
// core -> channel; read data comes back channel -> core.
class Noc {
 public:
  virtual ~Noc() = default;

  virtual void inject_request(const MemoryRequest& req, Cycle now) = 0;
  virtual void inject_response(const MemoryRequest& resp, Cycle now) = 0;
  // Moves requests that reached their channel into the memory system.
  virtual void forward(Cycle now) = 0;
  // Read responses that reached their core this cycle.
  virtual std::vector<MemoryRequest> deliver_responses(Cycle now) = 0;

  virtual Cycle next_event(Cycle now) const = 0;
  virtual bool idle() const = 0;
  const NocStats& stats() const { return stats_; }

 protected:
  NocStats stats_;
};

std::unique_ptr<Noc> make_noc(const SimConfig& cfg, MemorySystem& mem);

// Fixed latency plus per-link serialization, one link per core and direction.
class SimpleNoc : public Noc {
 public:
  SimpleNoc(const SimConfig& cfg, MemorySystem& mem);

  // Cycle at which a packet of `payload` bytes sent now on a link with the
  // given free time is delivered; advances link_free.
  static Cycle transit(Cycle now, uint32_t payload, Cycle& link_free, const NocConfig& cfg);

  void inject_request(const MemoryRequest& req, Cycle now) override;
  void inject_response(const MemoryRequest& resp, Cycle now) override;
  void forward(Cycle now) override;
  std::vector<MemoryRequest> deliver_responses(Cycle now) override;
  Cycle next_event(Cycle now) const override;
  bool idle() const override;

 private:
  struct InFlight {
    MemoryRequest req;
    Cycle deliver_at;
  };
  const SimConfig& cfg_;
  MemorySystem& mem_;
  std::vector<Cycle> up_free_, down_free_;
  std::vector<std::deque<InFlight>> up_, down_;
};

// Single-stage input-queued crossbar moving one flit per input and output per
// cycle. An output stays with one packet from head to tail; free outputs pick
// among waiting heads round-robin.
class Crossbar {
 public:
  Crossbar(uint32_t inputs, uint32_t outputs);

  void inject(uint32_t input, uint32_t output, const MemoryRequest& pkt, uint32_t flits);
  // One crossbar cycle. `may_grant(output)` gates head grants; `on_grant`
  // fires on each head grant; delivered packets are appended with their output.
  void step(uint64_t cycle, const std::function<bool(uint32_t)>& may_grant,
            const std::function<void(uint32_t)>& on_grant, std::vector<std::pair<uint32_t, MemoryRequest>>& delivered);

  bool idle() const;
  uint64_t flits_moved() const { return flits_moved_; }
  std::vector<uint64_t> grants_per_input() const { return grants_; }

 private:
  struct Packet {
    MemoryRequest req;
    uint32_t output;
    uint32_t flits;
    uint32_t sent = 0;
  };
  struct Pending {
    uint64_t at;
    uint32_t output;
    MemoryRequest req;
  };
  uint32_t inputs_, outputs_;
  std::vector<std::deque<Packet>> queues_;
  std::vector<int> locked_;  // per output: input holding it, -1 when free
  std::vector<uint32_t> rr_;
  std::deque<Pending> pending_;
  uint64_t flits_moved_ = 0;
  std::vector<uint64_t> grants_;
};

uint32_t flits_for(uint32_t payload_bytes, const NocConfig& cfg);

class CrossbarNoc : public Noc {
 public:
  CrossbarNoc(const SimConfig& cfg, MemorySystem& mem);

  void inject_request(const MemoryRequest& req, Cycle now) override;
  void inject_response(const MemoryRequest& resp, Cycle now) override;
  void forward(Cycle now) override;
  std::vector<MemoryRequest> deliver_responses(Cycle now) override;
  Cycle next_event(Cycle now) const override;
  bool idle() const override;

 private:
  uint64_t noc_cycle(Cycle now) const;
  uint64_t first_noc_cycle(Cycle now) const;

  const SimConfig& cfg_;
  MemorySystem& mem_;
  Crossbar up_, down_;
  std::vector<uint32_t> reserved_;
  uint64_t up_next_ = 0, down_next_ = 0;  // next crossbar cycle to simulate
};

}  // namespace npusim
