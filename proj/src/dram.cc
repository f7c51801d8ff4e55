#include "npusim/dram.h"

#include <algorithm>

namespace npusim {

uint64_t ipoly_polynomial(unsigned degree) {
  static const uint64_t kTable[] = {
      0b1,           // degree 0: single channel
      0b11,          // x + 1
      0b111,         // x^2 + x + 1
      0b1011,        // x^3 + x + 1
      0b10011,       // x^4 + x + 1
      0b100101,      // x^5 + x^2 + 1
      0b1000011,     // x^6 + x + 1
      0b10000011,    // x^7 + x + 1
      0b100011101,   // x^8 + x^4 + x^3 + x^2 + 1
      0b1000010001,  // x^9 + x^4 + 1
      0b10000001001  // x^10 + x^3 + 1
  };
  if (degree >= std::size(kTable)) {
    throw SimError(ErrorCode::kConfig, "no interleaving polynomial for 2^" + std::to_string(degree) + " channels");
  }
  return kTable[degree];
}

uint32_t ipoly_hash(uint64_t block, unsigned degree) {
  if (degree == 0) return 0;
  const uint64_t poly = ipoly_polynomial(degree);
  for (int bit = 63; bit >= static_cast<int>(degree); --bit) {
    if (block >> bit & 1) block ^= poly << (bit - degree);
  }
  return static_cast<uint32_t>(block);
}

uint32_t ipoly_channel(Addr addr, const DramConfig& cfg) {
  if (!is_power_of_two(cfg.channels)) {
    throw SimError(ErrorCode::kConfig, "dram.channels must be a power of two for interleaving");
  }
  return ipoly_hash(addr / cfg.access_bytes, log2_exact(cfg.channels));
}

DramAddress map_address(Addr addr, const DramConfig& cfg) {
  DramAddress loc;
  const uint64_t block = addr / cfg.access_bytes;
  const unsigned k = log2_exact(cfg.channels);
  loc.channel = ipoly_hash(block, k);
  const uint64_t local = block >> k;
  const uint64_t row_blocks = cfg.row_bytes / cfg.access_bytes;
  loc.column = local % row_blocks;
  loc.bank = static_cast<uint32_t>(local / row_blocks % cfg.banks_per_channel);
  loc.row = local / (row_blocks * cfg.banks_per_channel);
  return loc;
}

uint64_t analytic_min_latency(RowOutcome outcome, const DramConfig& cfg) {
  const uint64_t base = cfg.cycles(cfg.timing_ns.tCL) + cfg.burst_cycles();
  switch (outcome) {
    case RowOutcome::kConflict: return base + cfg.cycles(cfg.timing_ns.tRCD) + cfg.cycles(cfg.timing_ns.tRP);
    case RowOutcome::kClosed: return base + cfg.cycles(cfg.timing_ns.tRCD);
    default: return base;
  }
}

// ---------------------------------------------------------------------------

DramChannel::DramChannel(uint32_t index, const DramConfig& cfg)
    : index_(index),
      cfg_(cfg),
      tCL_(cfg.cycles(cfg.timing_ns.tCL)),
      tRCD_(cfg.cycles(cfg.timing_ns.tRCD)),
      tRAS_(cfg.cycles(cfg.timing_ns.tRAS)),
      tWR_(cfg.cycles(cfg.timing_ns.tWR)),
      tRP_(cfg.cycles(cfg.timing_ns.tRP)),
      burst_(cfg.burst_cycles()),
      banks_(cfg.banks_per_channel) {}

void DramChannel::enqueue(MemoryRequest req, uint64_t now) {
  if (!can_enqueue()) throw SimError(ErrorCode::kConsistency, "enqueue into a full DRAM queue");
  Entry e;
  e.loc = map_address(req.addr, cfg_);
  if (e.loc.channel != index_) throw SimError(ErrorCode::kConsistency, "request routed to the wrong channel");
  req.channel = index_;
  req.dram_arrival = now;
  e.req = req;
  queue_.push_back(e);
}

bool DramChannel::column_legal(const Entry& e, uint64_t now) const {
  const Bank& b = banks_[e.loc.bank];
  return b.open_row == e.loc.row && now >= b.next_col && now + tCL_ >= bus_free_;
}

bool DramChannel::bank_has_hits(uint32_t bank) const {
  const Bank& b = banks_[bank];
  return std::any_of(queue_.begin(), queue_.end(),
                     [&](const Entry& e) { return e.loc.bank == bank && b.open_row == e.loc.row; });
}

bool DramChannel::bank_starved(uint32_t bank, uint64_t now) const {
  const Bank& b = banks_[bank];
  return std::any_of(queue_.begin(), queue_.end(), [&](const Entry& e) {
    return e.loc.bank == bank && b.open_row && *b.open_row != e.loc.row &&
           now - e.req.dram_arrival >= cfg_.starvation_age;
  });
}

void DramChannel::log(DramCommandKind kind, uint64_t now, const Entry& e) {
  if (log_) log_->push_back({kind, now, e.loc.bank, e.loc.row, e.req.id});
}

void DramChannel::cycle(uint64_t now) {
  for (auto it = inflight_.begin(); it != inflight_.end();) {
    if (it->dram_done <= now) {
      completed_.push_back(*it);
      it = inflight_.erase(it);
    } else {
      ++it;
    }
  }

  // First ready: oldest row hit whose column command may issue now.
  for (auto it = queue_.begin(); it != queue_.end(); ++it) {
    if (!column_legal(*it, now) || bank_starved(it->loc.bank, now)) continue;
    Entry e = *it;
    queue_.erase(it);
    Bank& b = banks_[e.loc.bank];
    const uint64_t data_end = now + tCL_ + burst_;
    bus_free_ = data_end;
    if (e.req.is_write) {
      b.next_pre = std::max(b.next_pre, data_end + tWR_);
      ++stats_.writes;
    } else {
      b.next_pre = std::max(b.next_pre, now + burst_);
      ++stats_.reads;
    }
    stats_.bytes += e.req.bytes;
    e.req.row_outcome = e.precharged ? RowOutcome::kConflict : e.activated ? RowOutcome::kClosed : RowOutcome::kHit;
    switch (e.req.row_outcome) {
      case RowOutcome::kConflict: ++stats_.row_conflicts; break;
      case RowOutcome::kClosed: ++stats_.row_closed; break;
      default: ++stats_.row_hits; break;
    }
    e.req.dram_column_cycle = now;
    e.req.dram_done = data_end;
    log(e.req.is_write ? DramCommandKind::kWrite : DramCommandKind::kRead, now, e);
    inflight_.push_back(e.req);
    return;
  }

  // First come: oldest request whose row command may issue now.
  for (auto& e : queue_) {
    Bank& b = banks_[e.loc.bank];
    if (!b.open_row) {
      if (now < b.next_act) continue;
      b.open_row = e.loc.row;
      b.next_col = now + tRCD_;
      b.next_pre = now + tRAS_;
      e.activated = true;
      ++stats_.activates;
      log(DramCommandKind::kActivate, now, e);
      return;
    }
    if (*b.open_row == e.loc.row) continue;
    const bool starved = now - e.req.dram_arrival >= cfg_.starvation_age;
    if (now < b.next_pre || (!starved && bank_has_hits(e.loc.bank))) continue;
    b.open_row.reset();
    b.next_act = now + tRP_;
    e.precharged = true;
    ++stats_.precharges;
    log(DramCommandKind::kPrecharge, now, e);
    return;
  }
}

std::vector<MemoryRequest> DramChannel::take_completed() {
  std::vector<MemoryRequest> out;
  out.swap(completed_);
  return out;
}

uint64_t DramChannel::next_event(uint64_t now) const {
  uint64_t next = kNever;
  for (const auto& r : inflight_) next = std::min(next, r.dram_done);
  for (const auto& e : queue_) {
    const Bank& b = banks_[e.loc.bank];
    uint64_t t;
    if (!b.open_row) {
      t = b.next_act;
    } else if (*b.open_row == e.loc.row) {
      t = std::max(b.next_col, bus_free_ > tCL_ ? bus_free_ - tCL_ : 0);
    } else if (bank_has_hits(e.loc.bank)) {
      t = std::max(b.next_pre, e.req.dram_arrival + cfg_.starvation_age);
    } else {
      t = b.next_pre;
    }
    next = std::min(next, t);
  }
  return next == kNever ? kNever : std::max(next, now + 1);
}

// ---------------------------------------------------------------------------

BandwidthStats bandwidth_stats(uint64_t bytes, uint64_t window_dram_cycles, const DramConfig& cfg) {
  BandwidthStats s;
  s.bytes = bytes;
  if (window_dram_cycles == 0) return s;
  s.utilization = static_cast<double>(bytes) /
                  (static_cast<double>(window_dram_cycles) * cfg.channels * cfg.peak_bytes_per_cycle);
  return s;
}

MemorySystem::MemorySystem(const DramConfig& cfg) : cfg_(cfg) {
  channels_.reserve(cfg.channels);
  for (uint32_t c = 0; c < cfg.channels; ++c) channels_.emplace_back(c, cfg);
}

void MemorySystem::enqueue(MemoryRequest req) {
  const uint32_t c = channel_of(req.addr);
  channels_[c].enqueue(req, started_ ? now_ + 1 : 0);
  ++enqueued_;
  if (req.is_write) {
    req.channel = c;
    acks_.push_back(req);
  }
}

void MemorySystem::advance_to(uint64_t dram_cycle) {
  uint64_t c = started_ ? now_ + 1 : 0;
  while (c <= dram_cycle) {
    for (auto& ch : channels_) ch.cycle(c);
    for (auto& ch : channels_) {
      for (auto& r : ch.take_completed()) {
        ++completed_;
        if (hook_) hook_(r);
        if (!r.is_write) reads_.push_back(r);
      }
    }
    now_ = c;
    started_ = true;
    // Skip cycles in which no channel can change state.
    uint64_t next = kNever;
    for (const auto& ch : channels_) next = std::min(next, ch.next_event(c));
    c = std::max(c + 1, std::min(next, dram_cycle + 1));
  }
  if (!started_ || now_ < dram_cycle) {
    now_ = dram_cycle;
    started_ = true;
  }
}

uint64_t MemorySystem::next_event() const {
  uint64_t next = kNever;
  for (const auto& ch : channels_) next = std::min(next, ch.next_event(now_));
  return next;
}

std::vector<MemoryRequest> MemorySystem::take_read_responses() {
  std::vector<MemoryRequest> out;
  out.swap(reads_);
  return out;
}

std::vector<MemoryRequest> MemorySystem::take_write_acks() {
  std::vector<MemoryRequest> out;
  out.swap(acks_);
  return out;
}

uint64_t MemorySystem::total_bytes() const {
  uint64_t b = 0;
  for (const auto& ch : channels_) b += ch.stats().bytes;
  return b;
}

bool MemorySystem::idle() const {
  return std::all_of(channels_.begin(), channels_.end(),
                     [](const DramChannel& ch) { return ch.queued() == 0 && ch.in_flight() == 0; });
}

void MemorySystem::set_command_log(std::vector<DramCommand>* log) {
  for (auto& ch : channels_) ch.set_command_log(log);
}

}  // namespace npusim
