#include "npusim/noc.h"

#include <algorithm>

namespace npusim {

namespace {

uint32_t payload_of(const MemoryRequest& req, bool response) {
  // Write commands and read responses carry data; read commands do not.
  return (req.is_write != response) ? req.bytes : 0;
}

}  // namespace

std::unique_ptr<Noc> make_noc(const SimConfig& cfg, MemorySystem& mem) {
  if (cfg.noc.model == NocModel::kSimple) return std::make_unique<SimpleNoc>(cfg, mem);
  return std::make_unique<CrossbarNoc>(cfg, mem);
}

// ---------------------------------------------------------------------------
// Simple model

SimpleNoc::SimpleNoc(const SimConfig& cfg, MemorySystem& mem)
    : cfg_(cfg),
      mem_(mem),
      up_free_(cfg.num_cores, 0),
      down_free_(cfg.num_cores, 0),
      up_(cfg.num_cores),
      down_(cfg.num_cores) {}

Cycle SimpleNoc::transit(Cycle now, uint32_t payload, Cycle& link_free, const NocConfig& cfg) {
  const Cycle start = std::max(now, link_free);
  link_free = start + ceil_div(std::max<uint32_t>(payload, 1), cfg.bytes_per_cycle);
  return start + cfg.latency_cycles;
}

void SimpleNoc::inject_request(const MemoryRequest& req, Cycle now) {
  const uint32_t payload = payload_of(req, false);
  up_[req.core_id].push_back({req, transit(now, payload, up_free_[req.core_id], cfg_.noc)});
  ++stats_.request_packets;
  stats_.bytes += payload;
}

void SimpleNoc::inject_response(const MemoryRequest& resp, Cycle now) {
  const uint32_t payload = payload_of(resp, true);
  down_[resp.core_id].push_back({resp, transit(now, payload, down_free_[resp.core_id], cfg_.noc)});
  ++stats_.response_packets;
  stats_.bytes += payload;
}

void SimpleNoc::forward(Cycle now) {
  for (auto& link : up_) {
    while (!link.empty() && link.front().deliver_at <= now) {
      const uint32_t c = mem_.channel_of(link.front().req.addr);
      if (!mem_.can_accept(c)) break;  // head blocks the link until the queue drains
      mem_.enqueue(link.front().req);
      link.pop_front();
    }
  }
}

std::vector<MemoryRequest> SimpleNoc::deliver_responses(Cycle now) {
  std::vector<MemoryRequest> out;
  for (auto& link : down_) {
    while (!link.empty() && link.front().deliver_at <= now) {
      out.push_back(link.front().req);
      link.pop_front();
    }
  }
  return out;
}

Cycle SimpleNoc::next_event(Cycle now) const {
  Cycle next = kNever;
  for (const auto* dir : {&up_, &down_}) {
    for (const auto& link : *dir) {
      if (!link.empty()) next = std::min(next, std::max(link.front().deliver_at, now + 1));
    }
  }
  return next;
}

bool SimpleNoc::idle() const {
  auto empty = [](const std::deque<InFlight>& q) { return q.empty(); };
  return std::all_of(up_.begin(), up_.end(), empty) && std::all_of(down_.begin(), down_.end(), empty);
}

// ---------------------------------------------------------------------------
// Crossbar

uint32_t flits_for(uint32_t payload_bytes, const NocConfig& cfg) {
  return static_cast<uint32_t>(
      ceil_div(uint64_t{cfg.header_flits} * cfg.flit_bytes + payload_bytes, cfg.flit_bytes));
}

Crossbar::Crossbar(uint32_t inputs, uint32_t outputs)
    : inputs_(inputs), outputs_(outputs), queues_(inputs), locked_(outputs, -1), rr_(outputs, 0), grants_(inputs, 0) {}

void Crossbar::inject(uint32_t input, uint32_t output, const MemoryRequest& pkt, uint32_t flits) {
  queues_.at(input).push_back({pkt, output, std::max<uint32_t>(flits, 1)});
}

bool Crossbar::idle() const {
  return pending_.empty() &&
         std::all_of(queues_.begin(), queues_.end(), [](const std::deque<Packet>& q) { return q.empty(); });
}

void Crossbar::step(uint64_t cycle, const std::function<bool(uint32_t)>& may_grant,
                    const std::function<void(uint32_t)>& on_grant,
                    std::vector<std::pair<uint32_t, MemoryRequest>>& delivered) {
  while (!pending_.empty() && pending_.front().at <= cycle) {
    delivered.emplace_back(pending_.front().output, pending_.front().req);
    pending_.pop_front();
  }
  std::vector<bool> used(inputs_, false);
  auto send = [&](uint32_t o, uint32_t i) {
    Packet& p = queues_[i].front();
    ++p.sent;
    ++flits_moved_;
    used[i] = true;
    if (p.sent == p.flits) {
      // Tail flit crosses this cycle; the packet is usable next cycle.
      pending_.push_back({cycle + 1, o, p.req});
      queues_[i].pop_front();
      locked_[o] = -1;
    }
  };
  for (uint32_t o = 0; o < outputs_; ++o) {
    if (locked_[o] >= 0) {
      send(o, static_cast<uint32_t>(locked_[o]));
      continue;
    }
    for (uint32_t n = 0; n < inputs_; ++n) {
      const uint32_t i = (rr_[o] + n) % inputs_;
      if (used[i] || queues_[i].empty() || queues_[i].front().output != o) continue;
      if (!may_grant(o)) break;
      on_grant(o);
      ++grants_[i];
      rr_[o] = (i + 1) % inputs_;
      locked_[o] = static_cast<int>(i);
      send(o, i);
      break;
    }
  }
}

CrossbarNoc::CrossbarNoc(const SimConfig& cfg, MemorySystem& mem)
    : cfg_(cfg),
      mem_(mem),
      up_(cfg.num_cores, cfg.dram.channels),
      down_(cfg.dram.channels, cfg.num_cores),
      reserved_(cfg.dram.channels, 0) {}

uint64_t CrossbarNoc::noc_cycle(Cycle now) const {
  return convert_cycles_floor(now, cfg_.core.clock_hz, cfg_.noc.clock_hz);
}

uint64_t CrossbarNoc::first_noc_cycle(Cycle now) const { return now == 0 ? 0 : noc_cycle(now - 1) + 1; }

void CrossbarNoc::inject_request(const MemoryRequest& req, Cycle now) {
  const uint32_t payload = payload_of(req, false);
  const uint32_t flits = flits_for(payload, cfg_.noc);
  // An idle crossbar resumes at the first of this core cycle's flit cycles,
  // not at cycles skipped while nothing was in flight.
  if (up_.idle()) up_next_ = std::max(up_next_, first_noc_cycle(now));
  up_.inject(req.core_id, mem_.channel_of(req.addr), req, flits);
  ++stats_.request_packets;
  stats_.flits += flits;
  stats_.bytes += payload;
}

void CrossbarNoc::inject_response(const MemoryRequest& resp, Cycle now) {
  const uint32_t payload = payload_of(resp, true);
  const uint32_t flits = flits_for(payload, cfg_.noc);
  if (down_.idle()) down_next_ = std::max(down_next_, first_noc_cycle(now));
  down_.inject(resp.channel, resp.core_id, resp, flits);
  ++stats_.response_packets;
  stats_.flits += flits;
  stats_.bytes += payload;
}

void CrossbarNoc::forward(Cycle now) {
  const uint64_t target = noc_cycle(now);
  std::vector<std::pair<uint32_t, MemoryRequest>> delivered;
  const uint32_t capacity = cfg_.dram.queue_capacity;
  auto may_grant = [&](uint32_t c) { return mem_.channel(c).queued() + reserved_[c] < capacity; };
  auto on_grant = [&](uint32_t c) { ++reserved_[c]; };
  for (; up_next_ <= target; ++up_next_) {
    if (up_.idle()) {
      up_next_ = target + 1;
      break;
    }
    up_.step(up_next_, may_grant, on_grant, delivered);
    for (auto& [c, req] : delivered) {
      --reserved_[c];
      mem_.enqueue(req);
    }
    delivered.clear();
  }
}

std::vector<MemoryRequest> CrossbarNoc::deliver_responses(Cycle now) {
  const uint64_t target = noc_cycle(now);
  std::vector<std::pair<uint32_t, MemoryRequest>> delivered;
  auto always = [](uint32_t) { return true; };
  auto none = [](uint32_t) {};
  for (; down_next_ <= target; ++down_next_) {
    if (down_.idle()) {
      down_next_ = target + 1;
      break;
    }
    down_.step(down_next_, always, none, delivered);
  }
  std::vector<MemoryRequest> out;
  out.reserve(delivered.size());
  for (auto& d : delivered) out.push_back(d.second);
  return out;
}

Cycle CrossbarNoc::next_event(Cycle now) const { return idle() ? kNever : now + 1; }

bool CrossbarNoc::idle() const { return up_.idle() && down_.idle(); }

}  // namespace npusim
