#include "npusim/core.h"

#include <algorithm>
#include <tuple>

namespace npusim {

Cycle systolic_compute_latency(uint64_t m_rows, const CoreConfig& cfg) {
  return m_rows + cfg.array_w + cfg.array_h - 1;
}

Cycle preload_latency(uint64_t k_rows, const CoreConfig& cfg) {
  if (k_rows > cfg.array_h) {
    throw SimError(ErrorCode::kBlockTooTall, "weight block of " + std::to_string(k_rows) +
                                                 " rows exceeds array height " + std::to_string(cfg.array_h));
  }
  return k_rows;
}

Cycle vector_latency(uint64_t elements, VectorKind kind, const CoreConfig& cfg,
                     const std::map<VectorKind, Cycle>& op_latency) {
  auto it = op_latency.find(kind);
  if (it == op_latency.end()) {
    throw SimError(ErrorCode::kMissingLatencyConfig,
                   std::string("no op_latency entry for vector kind ") + vector_kind_name(kind));
  }
  const uint64_t width = uint64_t{cfg.vector_lanes} * cfg.alus_per_lane;
  Cycle lat = it->second + ceil_div(std::max<uint64_t>(elements, 1), width) - 1;
  if (kind == VectorKind::kLayerNorm || kind == VectorKind::kSoftmax) lat *= 3;
  return std::max<Cycle>(lat, 1);
}

Cycle im2col_latency(uint64_t rows, uint64_t cols, uint32_t elem_bytes, const CoreConfig& cfg) {
  return std::max<Cycle>(1, rows * ceil_div(cols * elem_bytes, cfg.spm_word_bytes));
}

std::vector<MemoryRequest> dma_split(const Instruction& instr, uint32_t access_bytes) {
  std::vector<MemoryRequest> out;
  if (!instr.dram_addr || instr.rows == 0 || instr.cols == 0 || instr.elem_bytes == 0) return out;
  const uint64_t row_bytes = uint64_t{instr.cols} * instr.elem_bytes;
  const bool write = instr.opcode == Opcode::kMvout;
  for (uint32_t r = 0; r < instr.rows; ++r) {
    const Addr start = *instr.dram_addr + r * instr.dram_stride;
    const Addr first = align_down(start, access_bytes);
    const Addr last = align_down(start + row_bytes - 1, access_bytes);
    for (Addr a = first; a <= last; a += access_bytes) {
      if (!out.empty() && out.back().addr == a) continue;
      MemoryRequest req;
      req.addr = a;
      req.is_write = write;
      req.bytes = access_bytes;
      out.push_back(req);
    }
  }
  return out;
}

Core::Core(uint32_t id, const SimConfig& cfg) : id_(id), cfg_(cfg) {}

bool Core::can_accept_tile(const TileProgram& tile) const {
  return live_.size() < 2 && !bound_[next_partition_] && tile.spm_bytes <= cfg_.core.spm_partition_bytes() &&
         tile.acc_bytes <= cfg_.core.acc_partition_bytes();
}

bool Core::has_issuing_tile() const {
  return std::any_of(live_.begin(), live_.end(), [](const LiveTile& t) { return t.issued < t.status.size(); });
}

void Core::accept_tile(std::shared_ptr<const TileProgram> tile, Cycle now) {
  if (!can_accept_tile(*tile)) {
    throw SimError(ErrorCode::kConsistency, "core " + std::to_string(id_) + " cannot accept tile " +
                                                std::to_string(tile->id));
  }
  if (tile->instrs.empty()) {
    throw SimError(ErrorCode::kConsistency, "tile " + std::to_string(tile->id) + " has no instructions");
  }
  const int p = next_partition_;
  next_partition_ ^= 1;
  bound_[p] = true;
  spm_used_[p] = tile->spm_bytes;
  acc_used_[p] = tile->acc_bytes;
  stats_.peak_spm_bytes[p] = std::max(stats_.peak_spm_bytes[p], spm_used_[p]);
  stats_.peak_acc_bytes[p] = std::max(stats_.peak_acc_bytes[p], acc_used_[p]);

  LiveTile t;
  t.prog = std::move(tile);
  t.partition = p;
  t.age = next_age_++;
  const size_t n = t.prog->instrs.size();
  t.status.assign(n, InstrStatus::kWaiting);
  t.done_at.assign(n, kNever);
  t.remaining.assign(n, 0);
  for (uint32_t i = 0; i < n; ++i) {
    const ExecUnit unit = unit_of(t.prog->instrs[i].opcode);
    if (unit != ExecUnit::kSystolic) t.waiting[static_cast<int>(unit)].push_back(i);
  }
  live_.push_back(std::move(t));
  ++stats_.tiles_accepted;
  changed_ = true;
  (void)now;
}

void Core::deliver(const MemoryRequest& req) { arrivals_.push_back(req); }

Core::LiveTile* Core::find_tile(uint64_t tile_id) {
  for (auto& t : live_) {
    if (t.prog->id == tile_id) return &t;
  }
  return nullptr;
}

Core::LiveTile* Core::find_age(uint64_t age) {
  for (auto& t : live_) {
    if (t.age == age) return &t;
  }
  return nullptr;
}

bool Core::deps_done(const LiveTile& t, const Instruction& in) const {
  return std::all_of(in.deps.begin(), in.deps.end(),
                     [&](uint32_t d) { return t.status[d] == InstrStatus::kDone; });
}

void Core::retire(LiveTile& t, uint32_t idx, Cycle now) {
  t.status[idx] = InstrStatus::kDone;
  t.done_at[idx] = now;
  ++t.done;
  ++stats_.instrs_retired;
  changed_ = true;
  if (observer_) observer_->on_retire(id_, *t.prog, idx, now);
}

void Core::cycle(Cycle now) {
  changed_ = false;

  for (const auto& req : arrivals_) {
    LiveTile* t = find_tile(req.tile_id);
    if (!t || req.instr_index >= t->status.size() || t->status[req.instr_index] != InstrStatus::kIssued ||
        t->remaining[req.instr_index] == 0) {
      throw SimError(ErrorCode::kConsistency, "core " + std::to_string(id_) + " received a response for tile " +
                                                  std::to_string(req.tile_id) + " instruction " +
                                                  std::to_string(req.instr_index) + " that is not in flight");
    }
    if (--t->remaining[req.instr_index] == 0) retire(*t, req.instr_index, now);
  }
  arrivals_.clear();

  if (!timed_.empty()) {
    auto due = std::partition(timed_.begin(), timed_.end(), [now](const Timed& e) { return e.done_at > now; });
    std::vector<Timed> retiring(due, timed_.end());
    timed_.erase(due, timed_.end());
    std::sort(retiring.begin(), retiring.end(),
              [](const Timed& a, const Timed& b) { return std::tie(a.age, a.idx) < std::tie(b.age, b.idx); });
    for (const Timed& e : retiring) retire(*find_age(e.age), e.idx, now);
  }

  pump_dma(now);

  for (auto it = live_.begin(); it != live_.end();) {
    if (it->done == it->status.size()) {
      bound_[it->partition] = false;
      spm_used_[it->partition] = 0;
      acc_used_[it->partition] = 0;
      ++stats_.tiles_completed;
      completed_.push_back(it->prog);
      it = live_.erase(it);
      changed_ = true;
    } else {
      ++it;
    }
  }

  while (try_issue(now)) {
  }
}

void Core::pump_dma(Cycle now) {
  const uint32_t rate = std::max<uint32_t>(1, cfg_.core.spm_word_bytes / cfg_.dram.access_bytes);
  for (uint32_t i = 0; i < rate && !dma_pending_.empty(); ++i) {
    MemoryRequest req = dma_pending_.front();
    dma_pending_.pop_front();
    req.issued_cycle = now;
    (req.is_write ? stats_.write_requests : stats_.read_requests)++;
    outbox_.push_back(req);
    changed_ = true;
  }
}

bool Core::try_issue(Cycle now) {
  bool progress = false;
  progress |= issue_array(now);
  progress |= issue_unit(ExecUnit::kDma, now);
  progress |= issue_unit(ExecUnit::kVector, now);
  return progress;
}

bool Core::issue_array(Cycle now) {
  if (busy_until_[static_cast<int>(ExecUnit::kSystolic)] > now) return false;
  for (auto& t : live_) {
    const auto& instrs = t.prog->instrs;
    while (t.next_array < instrs.size() && unit_of(instrs[t.next_array].opcode) != ExecUnit::kSystolic) {
      ++t.next_array;
    }
    if (t.next_array == instrs.size()) continue;
    // Strict program order: the oldest tile with array work blocks younger ones.
    const uint32_t idx = static_cast<uint32_t>(t.next_array);
    const Instruction& in = instrs[idx];
    if (!deps_done(t, in)) return false;
    if (in.opcode == Opcode::kGemm &&
        loaded_weights_ != std::make_optional(std::make_pair(t.prog->id, in.weight_tag))) {
      return false;
    }
    start(t, idx, now);
    ++t.next_array;
    return true;
  }
  return false;
}

bool Core::issue_unit(ExecUnit unit, Cycle now) {
  if (busy_until_[static_cast<int>(unit)] > now) return false;
  if (unit == ExecUnit::kDma && !dma_pending_.empty()) return false;
  for (auto& t : live_) {
    auto& waiting = t.waiting[static_cast<int>(unit)];
    for (auto it = waiting.begin(); it != waiting.end(); ++it) {
      const uint32_t i = *it;
      if (!deps_done(t, t.prog->instrs[i])) continue;
      waiting.erase(it);
      start(t, i, now);
      return true;
    }
  }
  return false;
}

void Core::start(LiveTile& t, uint32_t idx, Cycle now) {
  const Instruction& in = t.prog->instrs[idx];
  t.status[idx] = InstrStatus::kIssued;
  ++t.issued;
  ++stats_.instrs_issued;
  changed_ = true;
  if (observer_) observer_->on_issue(id_, *t.prog, idx, now);

  const CoreConfig& core = cfg_.core;
  const ExecUnit unit = unit_of(in.opcode);
  Cycle latency = 0;
  switch (in.opcode) {
    case Opcode::kMvin:
    case Opcode::kMvout: {
      auto reqs = dma_split(in, cfg_.dram.access_bytes);
      const uint32_t rate = std::max<uint32_t>(1, core.spm_word_bytes / cfg_.dram.access_bytes);
      const Cycle busy = std::max<Cycle>(1, ceil_div(reqs.size(), rate));
      busy_until_[static_cast<int>(unit)] = now + busy;
      stats_.busy_cycles[static_cast<int>(unit)] += busy;
      if (observer_) observer_->on_busy(id_, unit, *t.prog, now, now + busy);
      t.remaining[idx] = static_cast<uint32_t>(reqs.size());
      if (reqs.empty()) {
        retire(t, idx, now);
        return;
      }
      for (auto& r : reqs) {
        r.id = (uint64_t{id_} << 40) | next_request_++;
        r.core_id = id_;
        r.tile_id = t.prog->id;
        r.instr_index = idx;
        dma_pending_.push_back(r);
      }
      pump_dma(now);
      return;
    }
    case Opcode::kIm2col: latency = im2col_latency(in.rows, in.cols, in.elem_bytes, core); break;
    case Opcode::kGemmPreload:
      latency = preload_latency(in.rows, core);
      loaded_weights_ = std::make_pair(t.prog->id, in.weight_tag);
      break;
    case Opcode::kGemm: latency = systolic_compute_latency(in.rows, core); break;
    case Opcode::kVector: latency = vector_latency(in.elements(), in.vector_kind, core, cfg_.op_latency); break;
  }
  busy_until_[static_cast<int>(unit)] = now + latency;
  stats_.busy_cycles[static_cast<int>(unit)] += latency;
  t.done_at[idx] = now + latency;
  timed_.push_back({now + latency, t.age, idx});
  if (observer_) observer_->on_busy(id_, unit, *t.prog, now, now + latency);
}

std::vector<MemoryRequest> Core::take_requests() {
  std::vector<MemoryRequest> out;
  out.swap(outbox_);
  return out;
}

std::vector<std::shared_ptr<const TileProgram>> Core::take_completed() {
  std::vector<std::shared_ptr<const TileProgram>> out;
  out.swap(completed_);
  return out;
}

Cycle Core::next_event(Cycle now) const {
  if (changed_ || !arrivals_.empty() || !dma_pending_.empty()) return now + 1;
  Cycle next = kNever;
  for (Cycle b : busy_until_) {
    if (b > now) next = std::min(next, b);
  }
  for (const Timed& e : timed_) next = std::min(next, e.done_at);
  return next;
}

}  // namespace npusim
