#include "npusim/isa.h"

#include <sstream>

namespace npusim {

const char* opcode_name(Opcode op) {
  switch (op) {
    case Opcode::kMvin: return "MVIN";
    case Opcode::kMvout: return "MVOUT";
    case Opcode::kGemmPreload: return "GEMM_PRELOAD";
    case Opcode::kGemm: return "GEMM";
    case Opcode::kIm2col: return "IM2COL";
    case Opcode::kVector: return "VECTOR";
  }
  return "?";
}

const char* vector_kind_name(VectorKind kind) {
  switch (kind) {
    case VectorKind::kAdd: return "ADD";
    case VectorKind::kMul: return "MUL";
    case VectorKind::kGelu: return "GELU";
    case VectorKind::kRelu: return "RELU";
    case VectorKind::kSoftmax: return "SOFTMAX";
    case VectorKind::kLayerNorm: return "LAYERNORM";
    case VectorKind::kAccReduce: return "ACC_REDUCE";
  }
  return "?";
}

std::optional<VectorKind> parse_vector_kind(const std::string& name) {
  for (VectorKind k : {VectorKind::kAdd, VectorKind::kMul, VectorKind::kGelu, VectorKind::kRelu,
                       VectorKind::kSoftmax, VectorKind::kLayerNorm, VectorKind::kAccReduce}) {
    if (name == vector_kind_name(k)) return k;
  }
  return std::nullopt;
}

ExecUnit unit_of(Opcode op) {
  switch (op) {
    case Opcode::kGemmPreload:
    case Opcode::kGemm: return ExecUnit::kSystolic;
    case Opcode::kVector: return ExecUnit::kVector;
    // IM2COL rides the DMA-to-scratchpad path.
    case Opcode::kMvin:
    case Opcode::kMvout:
    case Opcode::kIm2col: return ExecUnit::kDma;
  }
  return ExecUnit::kDma;
}

std::string format_instruction(const Instruction& instr) {
  std::ostringstream os;
  os << opcode_name(instr.opcode);
  if (instr.opcode == Opcode::kVector) os << ' ' << vector_kind_name(instr.vector_kind);
  if (instr.dram_addr) os << " dram=0x" << std::hex << *instr.dram_addr << std::dec << " stride=" << instr.dram_stride;
  os << " spm=" << instr.spm_offset << " rows=" << instr.rows << " cols=" << instr.cols << " eb=" << instr.elem_bytes;
  if (instr.opcode == Opcode::kGemmPreload || instr.opcode == Opcode::kGemm) os << " tag=" << instr.weight_tag;
  os << " deps=[";
  for (size_t i = 0; i < instr.deps.size(); ++i) os << (i ? "," : "") << instr.deps[i];
  os << ']';
  return os.str();
}

std::string format_tile_program(const TileProgram& tile) {
  std::ostringstream os;
  os << "tile " << tile.id << " node=" << tile.owner_node << " request=" << tile.request_id
     << " spm=" << tile.spm_bytes << " acc=" << tile.acc_bytes << " preds=[";
  for (size_t i = 0; i < tile.preds.size(); ++i) os << (i ? "," : "") << tile.preds[i];
  os << ']';
  if (tile.chain_pred) os << " chain=" << *tile.chain_pred;
  os << '\n';
  for (size_t i = 0; i < tile.instrs.size(); ++i) {
    os << "  " << i << ' ' << format_instruction(tile.instrs[i]) << '\n';
  }
  return os.str();
}

}  // namespace npusim
