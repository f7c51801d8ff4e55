#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "npusim/config.h"
#include "npusim/core.h"
#include "npusim/graph.h"
#include "npusim/lowering.h"

namespace npusim {

enum class RequestKind { kStatic, kGenerative };

struct InferenceRequest {
  std::string request_id;
  std::shared_ptr<const ModelGraph> model;
  uint64_t batch = 1;
  Cycle arrival = 0;
  RequestKind kind = RequestKind::kStatic;
  uint64_t prompt_len = 0;
  uint64_t gen_tokens = 0;
  ShapeBindings bindings;  // extra symbol values
  uint64_t repeat = 1;     // static requests: back-to-back executions
  bool background = false;  // keeps re-running while foreground requests are live
};

// Symbol values for one execution: batch, kv_len for generation steps, and
// the request's own bindings.
ShapeBindings iteration_bindings(const InferenceRequest& req, uint64_t iteration);

// Fused, fully bound graph for generation step `token_index`.
ModelGraph generative_step(const InferenceRequest& req, uint64_t token_index);

struct IterationRecord {
  uint64_t iteration = 0;
  Cycle start = 0;
  Cycle end = 0;
};

struct RequestRecord {
  std::string request_id;
  RequestKind kind = RequestKind::kStatic;
  bool background = false;
  Cycle arrival = 0;
  Cycle finish = 0;
  std::vector<IterationRecord> iterations;
};

class Scheduler {
 public:
  Scheduler(const SimConfig& cfg, std::vector<InferenceRequest> requests);

  // Starts arrived requests and hands ready tiles to cores that accept them.
  void dispatch(std::vector<std::unique_ptr<Core>>& cores, Cycle now);
  void on_tile_complete(const TileProgram& tile, Cycle now);

  bool done() const;
  Cycle next_event(Cycle now) const;
  std::string describe_stall() const;

  uint64_t tiles_lowered() const { return tiles_lowered_; }
  uint64_t tiles_dispatched() const { return tiles_dispatched_; }
  uint64_t tiles_completed() const { return tiles_completed_; }
  Cycle last_completion() const { return last_completion_; }
  const std::vector<RequestRecord>& records() const { return records_; }

  using DispatchHook = std::function<void(const TileProgram&, uint32_t core, Cycle now)>;
  void set_dispatch_hook(DispatchHook hook) { dispatch_hook_ = std::move(hook); }

 private:
  struct NodeState {
    size_t pending_preds = 0;
    uint64_t outstanding = 0;
    bool lowered = false;
    bool complete = false;
  };
  struct Run {
    uint64_t iteration = 0;
    ModelGraph graph;
    AddressMap addresses;
    std::vector<NodeState> nodes;
    std::vector<std::vector<int>> successors;
    size_t nodes_left = 0;
    Cycle start = 0;
  };
  struct ReqState {
    InferenceRequest req;
    ModelGraph fused;
    bool arrived = false;
    bool finished = false;
    uint64_t next_iteration = 0;
    std::unique_ptr<Run> run;
    std::vector<uint32_t> cores;  // spatial policy placement
  };
  struct ReadyTile {
    std::shared_ptr<const TileProgram> prog;
    size_t req = 0;
    int node = 0;
    std::optional<uint32_t> affinity;
  };

  void start_iteration(size_t r, Cycle now);
  void lower_node(size_t r, int node);
  bool admissible(const ReadyTile& t, uint32_t core) const;
  void pick_active();
  bool foreground_live() const;
  uint64_t iterations_wanted(const ReqState& s) const;

  const SimConfig& cfg_;
  std::vector<ReqState> reqs_;
  std::vector<size_t> arrival_order_;
  std::unordered_map<std::string, size_t> by_id_;
  std::deque<ReadyTile> ready_;
  std::unordered_map<uint64_t, ReadyTile> chained_;  // keyed by the chain predecessor's id
  uint64_t next_tile_id_ = 0;
  std::unordered_set<uint64_t> in_flight_;  // dispatched, not yet complete

  // Time-share: the (request, node) whose tiles may dispatch.
  std::optional<std::pair<size_t, int>> active_;
  std::optional<size_t> last_active_;

  uint64_t tiles_lowered_ = 0;
  uint64_t tiles_dispatched_ = 0;
  uint64_t tiles_completed_ = 0;
  Cycle last_completion_ = 0;
  std::vector<RequestRecord> records_;
  DispatchHook dispatch_hook_;
};

}  // namespace npusim
