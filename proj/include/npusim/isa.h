#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "npusim/common.h"

namespace npusim {

enum class Opcode { kMvin, kMvout, kGemmPreload, kGemm, kIm2col, kVector };

enum class VectorKind { kAdd, kMul, kGelu, kRelu, kSoftmax, kLayerNorm, kAccReduce };

const char* opcode_name(Opcode op);
const char* vector_kind_name(VectorKind kind);
std::optional<VectorKind> parse_vector_kind(const std::string& name);

enum class ExecUnit { kDma, kSystolic, kVector };

ExecUnit unit_of(Opcode op);
inline bool is_dma(Opcode op) { return op == Opcode::kMvin || op == Opcode::kMvout; }

struct Instruction {
  Opcode opcode = Opcode::kMvin;
  VectorKind vector_kind = VectorKind::kAdd;  // VECTOR only
  std::optional<Addr> dram_addr;              // MVIN/MVOUT only
  uint64_t dram_stride = 0;                   // bytes between consecutive rows in DRAM
  uint32_t elem_bytes = 1;
  uint64_t spm_offset = 0;
  uint32_t rows = 0;
  uint32_t cols = 0;
  uint32_t weight_tag = 0;  // GEMM_PRELOAD / GEMM: weight block within the tile
  std::vector<uint32_t> deps;

  uint64_t elements() const { return uint64_t{rows} * cols; }
  uint64_t bytes() const { return elements() * elem_bytes; }

  bool operator==(const Instruction&) const = default;
};

// GEMM-view tile dimensions; vector tiles use `flat` instead.
struct TileShape {
  uint64_t m = 1;
  uint64_t k = 1;
  uint64_t n = 1;

  bool operator==(const TileShape&) const = default;
};

// Iteration-space slice a tile covers. GEMM-like tiles fill batch/m/k/n;
// vector tiles fill the flat element range [m0, m1) with k/n unused.
struct TileRange {
  uint64_t batch = 0;
  uint64_t m0 = 0, m1 = 0;
  uint64_t k0 = 0, k1 = 0;
  uint64_t n0 = 0, n1 = 0;

  bool operator==(const TileRange&) const = default;
};

struct TileProgram {
  uint64_t id = 0;
  std::string owner_node;
  std::string request_id;
  uint64_t iteration = 0;  // repeat or generation step of the owning request
  std::vector<Instruction> instrs;
  uint64_t spm_bytes = 0;
  uint64_t acc_bytes = 0;
  std::vector<uint64_t> preds;
  // Previous tile accumulating into the same output block. It must run on
  // the same core and be dispatched first.
  std::optional<uint64_t> chain_pred;
  TileRange range;

  bool operator==(const TileProgram&) const = default;
};

std::string format_instruction(const Instruction& instr);
std::string format_tile_program(const TileProgram& tile);

}  // namespace npusim
