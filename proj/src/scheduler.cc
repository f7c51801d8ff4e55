#include "npusim/scheduler.h"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace npusim {

ShapeBindings iteration_bindings(const InferenceRequest& req, uint64_t iteration) {
  ShapeBindings b = req.bindings;
  b["batch"] = static_cast<int64_t>(req.batch);
  if (req.kind == RequestKind::kGenerative) {
    if (iteration >= req.gen_tokens) {
      throw SimError(ErrorCode::kConsistency, "request '" + req.request_id + "': generation step " +
                                                  std::to_string(iteration) + " is past gen_tokens " +
                                                  std::to_string(req.gen_tokens));
    }
    b["kv_len"] = static_cast<int64_t>(req.prompt_len + iteration);
  }
  return b;
}

ModelGraph generative_step(const InferenceRequest& req, uint64_t token_index) {
  if (req.kind != RequestKind::kGenerative) {
    throw SimError(ErrorCode::kConsistency, "request '" + req.request_id + "' is not generative");
  }
  return bind_shapes(fuse_operators(*req.model), iteration_bindings(req, token_index));
}

namespace {

constexpr Addr kRequestAddressSpan = Addr{1} << 34;

}  // namespace

Scheduler::Scheduler(const SimConfig& cfg, std::vector<InferenceRequest> requests) : cfg_(cfg) {
  for (size_t i = 0; i < requests.size(); ++i) {
    ReqState s;
    s.req = std::move(requests[i]);
    if (!s.req.model) throw SimError(ErrorCode::kConfig, "request '" + s.req.request_id + "' has no model");
    if (s.req.batch < 1) throw SimError(ErrorCode::kConfig, "request '" + s.req.request_id + "': batch must be >= 1");
    if (s.req.kind == RequestKind::kGenerative && (s.req.prompt_len < 1 || s.req.gen_tokens < 1)) {
      throw SimError(ErrorCode::kConfig,
                     "request '" + s.req.request_id + "': generative requests need prompt_len >= 1 and gen_tokens >= 1");
    }
    if (!by_id_.emplace(s.req.request_id, i).second) {
      throw SimError(ErrorCode::kConfig, "duplicate request_id '" + s.req.request_id + "'");
    }
    s.fused = fuse_operators(*s.req.model);
    if (cfg.scheduler.policy == SchedulingPolicy::kSpatial) {
      auto it = cfg.scheduler.partition.find(s.req.request_id);
      if (it == cfg.scheduler.partition.end()) {
        throw SimError(ErrorCode::kConfig,
                       "scheduler.partition has no core set for request '" + s.req.request_id + "'");
      }
      s.cores = it->second;
    }
    RequestRecord rec;
    rec.request_id = s.req.request_id;
    rec.kind = s.req.kind;
    rec.background = s.req.background;
    rec.arrival = s.req.arrival;
    records_.push_back(rec);
    reqs_.push_back(std::move(s));
  }
  arrival_order_.resize(reqs_.size());
  std::iota(arrival_order_.begin(), arrival_order_.end(), 0);
  std::stable_sort(arrival_order_.begin(), arrival_order_.end(),
                   [&](size_t a, size_t b) { return reqs_[a].req.arrival < reqs_[b].req.arrival; });
}

bool Scheduler::foreground_live() const {
  return std::any_of(reqs_.begin(), reqs_.end(),
                     [](const ReqState& s) { return !s.req.background && !s.finished; });
}

uint64_t Scheduler::iterations_wanted(const ReqState& s) const {
  if (s.req.kind == RequestKind::kGenerative) return s.req.gen_tokens;
  return std::max<uint64_t>(s.req.repeat, 1);
}

void Scheduler::start_iteration(size_t r, Cycle now) {
  ReqState& s = reqs_[r];
  auto run = std::make_unique<Run>();
  run->iteration = s.next_iteration++;
  run->start = now;
  run->graph = bind_shapes(s.fused, iteration_bindings(s.req, run->iteration));
  run->addresses =
      AddressMap::build(run->graph, cfg_.dram_base + r * kRequestAddressSpan, cfg_.dram.access_bytes);
  const auto preds = run->graph.node_predecessors();
  run->nodes.resize(run->graph.nodes.size());
  run->successors.resize(run->graph.nodes.size());
  for (size_t v = 0; v < preds.size(); ++v) {
    run->nodes[v].pending_preds = preds[v].size();
    for (int u : preds[v]) run->successors[u].push_back(static_cast<int>(v));
  }
  run->nodes_left = run->graph.nodes.size();
  s.run = std::move(run);
  if (s.run->nodes_left == 0) {
    records_[r].iterations.push_back({s.run->iteration, now, now});
    s.run.reset();
    return;
  }
  for (size_t v = 0; v < s.run->nodes.size(); ++v) {
    if (s.run->nodes[v].pending_preds == 0) lower_node(r, static_cast<int>(v));
  }
}

void Scheduler::lower_node(size_t r, int node) {
  ReqState& s = reqs_[r];
  Run& run = *s.run;
  LoweringContext ctx{run.graph, cfg_, run.addresses, s.req.request_id, next_tile_id_};
  auto tiles = npusim::lower_node(run.graph.nodes[node], ctx);
  next_tile_id_ = ctx.next_tile_id;
  run.nodes[node].lowered = true;
  run.nodes[node].outstanding = tiles.size();
  tiles_lowered_ += tiles.size();
  for (auto& t : tiles) {
    t.iteration = run.iteration;
    ReadyTile rt{std::make_shared<const TileProgram>(std::move(t)), r, node, std::nullopt};
    if (rt.prog->chain_pred) {
      chained_.emplace(*rt.prog->chain_pred, std::move(rt));
    } else {
      ready_.push_back(std::move(rt));
    }
  }
}

bool Scheduler::admissible(const ReadyTile& t, uint32_t core) const {
  if (t.affinity && *t.affinity != core) return false;
  if (cfg_.scheduler.policy == SchedulingPolicy::kSpatial) {
    const auto& cores = reqs_[t.req].cores;
    return std::find(cores.begin(), cores.end(), core) != cores.end();
  }
  return active_ && active_->first == t.req && active_->second == t.node;
}

void Scheduler::pick_active() {
  if (active_ || ready_.empty()) return;
  // Round-robin in arrival order, starting after the last active request.
  size_t start = 0;
  if (last_active_) {
    auto pos = std::find(arrival_order_.begin(), arrival_order_.end(), *last_active_);
    start = static_cast<size_t>(pos - arrival_order_.begin()) + 1;
  }
  for (size_t n = 0; n < arrival_order_.size(); ++n) {
    const size_t r = arrival_order_[(start + n) % arrival_order_.size()];
    for (const auto& t : ready_) {
      if (t.req == r) {
        active_ = std::make_pair(r, t.node);
        last_active_ = r;
        return;
      }
    }
  }
}

void Scheduler::dispatch(std::vector<std::unique_ptr<Core>>& cores, Cycle now) {
  for (size_t r : arrival_order_) {
    ReqState& s = reqs_[r];
    if (!s.arrived && s.req.arrival <= now) {
      s.arrived = true;
      start_iteration(r, now);
    }
  }
  const bool time_share = cfg_.scheduler.policy == SchedulingPolicy::kTimeShare;
  bool progress = true;
  while (progress && !ready_.empty()) {
    progress = false;
    if (time_share) pick_active();
    for (auto& core : cores) {
      if (core->live_tiles() >= 2) continue;
      for (auto it = ready_.begin(); it != ready_.end(); ++it) {
        if (!admissible(*it, core->id()) || !core->can_accept_tile(*it->prog)) continue;
        ReadyTile t = std::move(*it);
        ready_.erase(it);
        core->accept_tile(t.prog, now);
        ++tiles_dispatched_;
        in_flight_.insert(t.prog->id);
        if (dispatch_hook_) dispatch_hook_(*t.prog, core->id(), now);
        // The next tile of a K chain may now follow on the same core.
        auto next = chained_.find(t.prog->id);
        if (next != chained_.end()) {
          next->second.affinity = core->id();
          ready_.push_back(std::move(next->second));
          chained_.erase(next);
        }
        progress = true;
        break;
      }
    }
  }
}

void Scheduler::on_tile_complete(const TileProgram& tile, Cycle now) {
  auto rit = by_id_.find(tile.request_id);
  if (rit == by_id_.end()) {
    throw SimError(ErrorCode::kConsistency, "completion of tile " + std::to_string(tile.id) + " for unknown request");
  }
  if (in_flight_.erase(tile.id) == 0) {
    throw SimError(ErrorCode::kConsistency,
                   "tile " + std::to_string(tile.id) + " completed twice or was never dispatched");
  }
  const size_t r = rit->second;
  ReqState& s = reqs_[r];
  if (!s.run || s.run->iteration != tile.iteration) {
    throw SimError(ErrorCode::kConsistency, "completion of tile " + std::to_string(tile.id) + " outside its run");
  }
  Run& run = *s.run;
  const int node = run.graph.node_index(tile.owner_node);
  NodeState& ns = run.nodes.at(node);
  if (ns.outstanding == 0) {
    throw SimError(ErrorCode::kConsistency, "tile " + std::to_string(tile.id) + " completed after its node");
  }
  ++tiles_completed_;
  last_completion_ = now;
  if (--ns.outstanding > 0) return;

  ns.complete = true;
  --run.nodes_left;
  if (active_ && active_->first == r && active_->second == node) active_.reset();
  for (int succ : run.successors[node]) {
    if (--run.nodes[succ].pending_preds == 0) lower_node(r, succ);
  }
  if (run.nodes_left > 0) return;

  records_[r].iterations.push_back({run.iteration, run.start, now});
  s.run.reset();
  const bool more = s.next_iteration < iterations_wanted(s) ||
                    (s.req.background && s.req.kind == RequestKind::kStatic && foreground_live());
  if (more) {
    start_iteration(r, now);
    return;
  }
  s.finished = true;
  records_[r].finish = now;
}

bool Scheduler::done() const {
  return std::all_of(reqs_.begin(), reqs_.end(), [](const ReqState& s) { return s.finished; });
}

Cycle Scheduler::next_event(Cycle now) const {
  Cycle next = kNever;
  for (const auto& s : reqs_) {
    if (!s.arrived) next = std::min(next, std::max(s.req.arrival, now + 1));
  }
  return next;
}

std::string Scheduler::describe_stall() const {
  std::ostringstream os;
  os << ready_.size() << " ready tile(s), " << chained_.size() << " chained tile(s) waiting";
  for (const auto& t : ready_) {
    os << "; tile " << t.prog->id << " of request '" << t.prog->request_id << "' node '" << t.prog->owner_node
       << "'";
    if (cfg_.scheduler.policy == SchedulingPolicy::kSpatial && reqs_[t.req].cores.empty()) {
      os << " has no cores assigned";
    }
    break;
  }
  return os.str();
}

}  // namespace npusim
