#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "npusim/config.h"
#include "npusim/graph.h"
#include "npusim/isa.h"

namespace npusim {

// Contiguous row-major DRAM ranges, one per tensor, bump-allocated in
// declaration order.
class AddressMap {
 public:
  static AddressMap build(const ModelGraph& g, Addr base, uint32_t alignment);

  Addr base_of(const std::string& tensor) const;
  Addr begin() const { return begin_; }
  Addr end() const { return end_; }

 private:
  std::unordered_map<std::string, Addr> bases_;
  Addr begin_ = 0;
  Addr end_ = 0;
};

// A Gemm, MatMul or Conv2D node seen as (batched) C[M,N] = A[M,K] * B[K,N].
struct GemmProblem {
  uint64_t batch = 1;
  uint64_t m = 0;
  uint64_t k = 0;
  uint64_t n = 0;
  uint32_t elem_bytes = 2;
  uint32_t extra_mn_operands = 0;  // fused elementwise operands staged per output tile
  bool has_bias = false;
  // Minimum k and n candidates on top of the array granules, e.g. so weight
  // rows stay at least one DRAM access wide.
  uint64_t k_granule = 0;
  uint64_t n_granule = 0;
};

GemmProblem gemm_problem(const ModelGraph& g, const OpNode& node);

TileShape select_tile_shape(const GemmProblem& problem, const CoreConfig& core);
TileShape select_tile_shape(const ModelGraph& g, const OpNode& node, const SimConfig& cfg);

struct LoweringContext {
  const ModelGraph& graph;
  const SimConfig& cfg;
  const AddressMap& addresses;
  std::string request_id;
  uint64_t next_tile_id = 0;
};

std::vector<TileProgram> lower_gemm(const OpNode& node, const TileShape& tile, LoweringContext& ctx);
std::vector<TileProgram> lower_conv(const OpNode& node, LoweringContext& ctx);
std::vector<TileProgram> lower_vector_node(const OpNode& node, LoweringContext& ctx);
std::vector<TileProgram> lower_node(const OpNode& node, LoweringContext& ctx);

// Tile id -> ids it must wait for. Cross-node edges are recorded at whole
// tensor granularity (every tile that writes a tensor the consumer reads);
// within a node, K-accumulation chains link consecutive tiles. Cross-node
// edges are also written into each tile's `preds`.
using TileDependencies = std::map<uint64_t, std::vector<uint64_t>>;

TileDependencies build_tile_dependencies(std::vector<TileProgram>& tiles, const ModelGraph& g);

// Lowers every node of a concrete graph in topological order and wires the
// dependency DAG.
std::vector<TileProgram> lower_graph(const ModelGraph& g, const SimConfig& cfg, const AddressMap& addresses,
                                     const std::string& request_id = "");

}  // namespace npusim
