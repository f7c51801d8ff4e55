#include "npusim/lowering.h"

#include <algorithm>
#include <functional>
#include <iterator>
#include <optional>
#include <set>
#include <tuple>

namespace npusim {

// ---------------------------------------------------------------------------
// Address map

AddressMap AddressMap::build(const ModelGraph& g, Addr base, uint32_t alignment) {
  AddressMap map;
  const uint64_t align = std::max<uint32_t>(alignment, 1);
  map.begin_ = align_up(base, align);
  Addr cursor = map.begin_;
  for (const auto& t : g.tensors) {
    cursor = align_up(cursor, align);
    map.bases_[t.name] = cursor;
    cursor += t.byte_size();
  }
  map.end_ = cursor;
  return map;
}

Addr AddressMap::base_of(const std::string& tensor) const {
  auto it = bases_.find(tensor);
  if (it == bases_.end()) throw SimError(ErrorCode::kLinkage, "no address assigned to tensor '" + tensor + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// Problem extraction

namespace {

using Dims = std::vector<int64_t>;

uint64_t product(const Dims& d, size_t begin, size_t end) {
  uint64_t p = 1;
  for (size_t i = begin; i < end; ++i) p *= static_cast<uint64_t>(d[i]);
  return p;
}

size_t fused_operand_count(const OpNode& n) {
  return static_cast<size_t>(std::count_if(n.fused_ops.begin(), n.fused_ops.end(), is_elementwise_binary));
}

size_t base_input_count(const OpNode& n) { return n.inputs.size() - fused_operand_count(n); }

Dims dims_of(const ModelGraph& g, const std::string& tensor) { return concrete_dims(g.tensor(tensor).shape); }

uint32_t width_of(const ModelGraph& g, const std::string& tensor) { return dtype_width(g.tensor(tensor).dtype); }

uint64_t elements_of(const ModelGraph& g, const std::string& tensor) {
  return static_cast<uint64_t>(num_elements(g.tensor(tensor).shape));
}

std::vector<int64_t> int_list(const OpNode& n, const char* key, std::vector<int64_t> fallback) {
  if (!n.attrs.contains(key)) return fallback;
  return n.attrs.at(key).get<std::vector<int64_t>>();
}

struct ConvGeometry {
  uint64_t batch, cin, h, w;
  uint64_t cout, kh, kw;
  uint64_t sh, sw;
  int64_t pad_top, pad_left;
  uint64_t ho, wo;

  bool pointwise() const { return kh == 1 && kw == 1 && sh == 1 && sw == 1 && pad_top == 0 && pad_left == 0; }
  uint64_t out_pixels() const { return ho * wo; }
};

ConvGeometry conv_geometry(const ModelGraph& g, const OpNode& node) {
  const Dims x = dims_of(g, node.inputs[0]);
  const Dims wt = dims_of(g, node.inputs[1]);
  auto dil = int_list(node, "dilations", {1, 1});
  for (int64_t d : dil) {
    if (d != 1) {
      throw SimError(ErrorCode::kUnsupportedAttribute,
                     "node '" + node.id + "': dilation " + std::to_string(d) + " is not supported");
    }
  }
  if (node.attrs.contains("group") && node.attrs.at("group").get<int64_t>() != 1) {
    throw SimError(ErrorCode::kUnsupportedAttribute, "node '" + node.id + "': grouped convolution is not supported");
  }
  auto strides = int_list(node, "strides", {1, 1});
  auto pads = int_list(node, "pads", {0, 0, 0, 0});
  if (pads.size() == 2) pads = {pads[0], pads[1], pads[0], pads[1]};
  ConvGeometry c{};
  c.batch = x[0];
  c.cin = x[1];
  c.h = x[2];
  c.w = x[3];
  c.cout = wt[0];
  c.kh = wt[2];
  c.kw = wt[3];
  c.sh = strides[0];
  c.sw = strides[1];
  c.pad_top = pads[0];
  c.pad_left = pads[1];
  c.ho = (c.h + pads[0] + pads[2] - c.kh) / c.sh + 1;
  c.wo = (c.w + pads[1] + pads[3] - c.kw) / c.sw + 1;
  return c;
}

// Upper bound on raw input elements staged for an m-pixel, k-deep conv tile.
uint64_t conv_patch_bound(const ConvGeometry& c, uint64_t m, uint64_t k) {
  if (c.pointwise()) return m * k;
  const uint64_t per_image = c.out_pixels();
  const uint64_t images = std::min<uint64_t>(c.batch, ceil_div(m, per_image) + 1);
  const uint64_t out_rows = std::min<uint64_t>(c.ho, ceil_div(m, c.wo) + 1);
  const uint64_t in_rows = std::min<uint64_t>(c.h, (out_rows - 1) * c.sh + c.kh);
  const uint64_t chans = std::min<uint64_t>(c.cin, ceil_div(k, c.kh * c.kw) + 1);
  // Raw patch plus the IM2COL destination.
  return images * chans * in_rows * c.w + m * k;
}

void check_dims(const OpNode& node, const GemmProblem& p) {
  if (p.batch < 1 || p.m < 1 || p.k < 1 || p.n < 1) {
    throw SimError(ErrorCode::kDegenerateShape, "node '" + node.id + "' has a degenerate GEMM dimension (M=" +
                                                    std::to_string(p.m) + ", K=" + std::to_string(p.k) +
                                                    ", N=" + std::to_string(p.n) + ")");
  }
}

}  // namespace

GemmProblem gemm_problem(const ModelGraph& g, const OpNode& node) {
  GemmProblem p;
  p.extra_mn_operands = static_cast<uint32_t>(fused_operand_count(node));
  const size_t base = base_input_count(node);
  p.elem_bytes = std::max(width_of(g, node.inputs[0]), width_of(g, node.inputs[1]));
  switch (node.op_type) {
    case OpType::kGemm: {
      const Dims a = dims_of(g, node.inputs[0]);
      const Dims b = dims_of(g, node.inputs[1]);
      p.m = product(a, 0, a.size() - 1);
      p.k = a.back();
      p.n = b[1];
      p.has_bias = base == 3;
      break;
    }
    case OpType::kMatMul: {
      const Dims a = dims_of(g, node.inputs[0]);
      const Dims b = dims_of(g, node.inputs[1]);
      const size_t rank = std::max(a.size(), b.size());
      p.batch = 1;
      for (size_t i = 0; i + 2 < rank; ++i) {
        const int64_t da = i + a.size() < rank ? 1 : a[i + a.size() - rank];
        const int64_t db = i + b.size() < rank ? 1 : b[i + b.size() - rank];
        p.batch *= static_cast<uint64_t>(std::max(da, db));
      }
      p.m = a[a.size() - 2];
      p.k = a.back();
      p.n = b.back();
      break;
    }
    case OpType::kConv2D: {
      const ConvGeometry c = conv_geometry(g, node);
      p.m = c.batch * c.out_pixels();
      p.k = c.cin * c.kh * c.kw;
      p.n = c.cout;
      p.has_bias = base == 3;
      break;
    }
    default:
      throw SimError(ErrorCode::kUnsupportedOperator,
                     "node '" + node.id + "' (" + op_type_name(node.op_type) + ") is not a GEMM-like operator");
  }
  check_dims(node, p);
  return p;
}

// ---------------------------------------------------------------------------
// Tile-shape selection

namespace {

using AElems = std::function<uint64_t(uint64_t m, uint64_t k)>;

std::vector<uint64_t> divisor_candidates(uint64_t dim, uint64_t granule) {
  std::vector<uint64_t> out;
  const uint64_t lo = std::min(dim, granule);
  for (uint64_t d = 1; d * d <= dim; ++d) {
    if (dim % d) continue;
    if (d >= lo) out.push_back(d);
    if (dim / d != d && dim / d >= lo) out.push_back(dim / d);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<uint64_t> multiple_candidates(uint64_t dim, uint64_t granule) {
  std::vector<uint64_t> out;
  if (dim <= granule) return {dim};
  for (uint64_t v = granule; v < dim; v += granule) out.push_back(v);
  out.push_back(dim);
  return out;
}

struct Search {
  const GemmProblem& p;
  const CoreConfig& core;
  const AElems& a_elems;

  bool fits(uint64_t m, uint64_t k, uint64_t n) const {
    const uint64_t spm_elems = a_elems(m, k) + k * n + p.extra_mn_operands * m * n + (p.has_bias ? n : 0);
    return spm_elems * p.elem_bytes <= core.spm_partition_bytes() &&
           m * n * core.acc_elem_bytes <= core.acc_partition_bytes();
  }

  std::optional<TileShape> run(const std::vector<uint64_t>& ms, const std::vector<uint64_t>& ks,
                               const std::vector<uint64_t>& ns) const {
    std::optional<TileShape> best;
    auto key = [](const TileShape& t) { return std::make_tuple(t.m * t.k + t.k * t.n, t.m, t.n, t.k); };
    for (uint64_t k : ks) {
      for (uint64_t n : ns) {
        // Footprint is monotone in m, so the largest fitting m wins for this (k, n).
        auto it = std::partition_point(ms.begin(), ms.end(), [&](uint64_t m) { return fits(m, k, n); });
        if (it == ms.begin()) continue;
        TileShape t{*(it - 1), k, n};
        if (!best || key(t) > key(*best)) best = t;
      }
    }
    return best;
  }
};

TileShape select_with(const GemmProblem& p, const CoreConfig& core, const AElems& a_elems, const std::string& who) {
  Search s{p, core, a_elems};
  const uint64_t gk = core.array_h, gn = core.array_w;
  const uint64_t wide_k = std::max(gk, p.k_granule), wide_n = std::max(gn, p.n_granule);
  // Prefer DRAM-wide rows, then fall back to the array granules alone.
  for (auto [kg, ng] : {std::pair{wide_k, wide_n}, std::pair{gk, gn}}) {
    if (auto t = s.run(divisor_candidates(p.m, 1), divisor_candidates(p.k, kg), divisor_candidates(p.n, ng))) {
      return *t;
    }
  }
  if (auto t = s.run(multiple_candidates(p.m, 1), multiple_candidates(p.k, gk), multiple_candidates(p.n, gn))) {
    return *t;
  }
  throw SimError(ErrorCode::kFootprint, who + ": no tile with k>=" + std::to_string(std::min<uint64_t>(p.k, gk)) +
                                            " and n>=" + std::to_string(std::min<uint64_t>(p.n, gn)) +
                                            " fits the scratchpad/accumulator partitions");
}

}  // namespace

TileShape select_tile_shape(const GemmProblem& problem, const CoreConfig& core) {
  if (problem.batch < 1 || problem.m < 1 || problem.k < 1 || problem.n < 1) {
    throw SimError(ErrorCode::kDegenerateShape, "degenerate GEMM dimension");
  }
  return select_with(problem, core, [](uint64_t m, uint64_t k) { return m * k; }, "GEMM");
}

TileShape select_tile_shape(const ModelGraph& g, const OpNode& node, const SimConfig& cfg) {
  GemmProblem p = gemm_problem(g, node);
  // Weight rows run along n for Gemm/MatMul and along k for Conv2D.
  const uint64_t access_elems = std::max<uint64_t>(1, cfg.dram.access_bytes / p.elem_bytes);
  if (node.op_type == OpType::kConv2D) {
    p.k_granule = access_elems;
    const ConvGeometry c = conv_geometry(g, node);
    return select_with(p, cfg.core, [c](uint64_t m, uint64_t k) { return conv_patch_bound(c, m, k); },
                       "node '" + node.id + "'");
  }
  p.n_granule = access_elems;
  return select_with(p, cfg.core, [](uint64_t m, uint64_t k) { return m * k; }, "node '" + node.id + "'");
}

// ---------------------------------------------------------------------------
// GEMM-like tile template

namespace {

Instruction dma(Opcode op, Addr addr, uint64_t stride, uint32_t elem_bytes, uint64_t spm, uint64_t rows, uint64_t cols,
                std::vector<uint32_t> deps = {}) {
  Instruction in;
  in.opcode = op;
  in.dram_addr = addr;
  in.dram_stride = stride;
  in.elem_bytes = elem_bytes;
  in.spm_offset = spm;
  in.rows = static_cast<uint32_t>(rows);
  in.cols = static_cast<uint32_t>(cols);
  in.deps = std::move(deps);
  return in;
}

Instruction vector_instr(VectorKind kind, uint32_t elem_bytes, uint64_t spm, uint64_t rows, uint64_t cols,
                         std::vector<uint32_t> deps) {
  Instruction in;
  in.opcode = Opcode::kVector;
  in.vector_kind = kind;
  in.elem_bytes = elem_bytes;
  in.spm_offset = spm;
  in.rows = static_cast<uint32_t>(rows);
  in.cols = static_cast<uint32_t>(cols);
  in.deps = std::move(deps);
  return in;
}

VectorKind kind_of(OpType op) {
  switch (op) {
    case OpType::kAdd: return VectorKind::kAdd;
    case OpType::kMul: return VectorKind::kMul;
    case OpType::kGelu: return VectorKind::kGelu;
    case OpType::kRelu: return VectorKind::kRelu;
    case OpType::kSoftmax: return VectorKind::kSoftmax;
    case OpType::kLayerNorm: return VectorKind::kLayerNorm;
    default: break;
  }
  throw SimError(ErrorCode::kUnsupportedOperator, std::string("no vector kind for ") + op_type_name(op));
}

uint32_t push(TileProgram& t, Instruction in) {
  t.instrs.push_back(std::move(in));
  return static_cast<uint32_t>(t.instrs.size() - 1);
}

// Layout hooks that differ between Gemm/MatMul and Conv2D.
struct GemmLayout {
  // Emits the A-side loads (and IM2COL) for a tile; returns the instruction
  // GEMMs must wait on and the scratchpad elements the A side occupies.
  std::function<std::pair<uint32_t, uint64_t>(TileProgram&, const TileRange&, uint64_t spm)> load_a;
  std::function<uint32_t(TileProgram&, const TileRange&, uint64_t spm)> load_b;
  // Moves a tensor laid out like the output (or broadcast into it) between
  // DRAM and scratchpad; returns the last emitted instruction.
  std::function<uint32_t(TileProgram&, Opcode, const std::string& tensor, const TileRange&, uint64_t spm,
                         std::vector<uint32_t> deps)>
      move_like_output;
};

std::vector<TileProgram> lower_gemm_like(const OpNode& node, const GemmProblem& p, const TileShape& tile,
                                         const GemmLayout& layout, LoweringContext& ctx) {
  const ModelGraph& g = ctx.graph;
  const CoreConfig& core = ctx.cfg.core;
  const uint64_t h = core.array_h;
  const uint64_t aw = core.array_w;
  const size_t base = base_input_count(node);
  const std::string& y = node.outputs[0];

  std::vector<std::string> fused_operands(node.inputs.begin() + base, node.inputs.end());

  std::vector<TileProgram> out;
  const uint64_t mt = ceil_div(p.m, tile.m), nt = ceil_div(p.n, tile.n), kt = ceil_div(p.k, tile.k);
  for (uint64_t b = 0; b < p.batch; ++b) {
    for (uint64_t mi = 0; mi < mt; ++mi) {
      for (uint64_t ni = 0; ni < nt; ++ni) {
        std::optional<uint64_t> prev;
        for (uint64_t ki = 0; ki < kt; ++ki) {
          TileRange r{b, mi * tile.m, std::min(p.m, (mi + 1) * tile.m), ki * tile.k, std::min(p.k, (ki + 1) * tile.k),
                      ni * tile.n, std::min(p.n, (ni + 1) * tile.n)};
          const uint64_t m = r.m1 - r.m0, k = r.k1 - r.k0, n = r.n1 - r.n0;
          const bool last_k = ki + 1 == kt;

          TileProgram t;
          t.id = ctx.next_tile_id++;
          t.owner_node = node.id;
          t.request_id = ctx.request_id;
          t.range = r;
          t.chain_pred = prev;

          uint64_t spm = 0;
          auto [a_ready, a_elems] = layout.load_a(t, r, spm);
          spm += a_elems * p.elem_bytes;
          const uint64_t b_off = spm;
          const uint32_t b_idx = layout.load_b(t, r, spm);
          spm += k * n * p.elem_bytes;

          std::optional<uint32_t> bias_idx;
          if (p.has_bias && ki == 0) {
            bias_idx = layout.move_like_output(t, Opcode::kMvin, node.inputs[2], r, spm, {});
          }
          if (p.has_bias) spm += n * p.elem_bytes;

          std::vector<uint32_t> operand_idx;
          std::vector<uint64_t> operand_off;
          if (last_k) {
            for (const auto& operand : fused_operands) {
              operand_off.push_back(spm);
              operand_idx.push_back(layout.move_like_output(t, Opcode::kMvin, operand, r, spm, {}));
              spm += m * n * width_of(g, operand);
            }
          } else {
            spm += fused_operands.size() * m * n * p.elem_bytes;
          }

          std::optional<uint32_t> last_gemm;
          const uint64_t kb_count = ceil_div(k, h), nb_count = ceil_div(n, aw);
          for (uint64_t nb = 0; nb < nb_count; ++nb) {
            for (uint64_t kb = 0; kb < kb_count; ++kb) {
              const uint64_t rows = std::min(h, k - kb * h), cols = std::min(aw, n - nb * aw);
              const uint32_t tag = static_cast<uint32_t>(nb * kb_count + kb);
              Instruction pre;
              pre.opcode = Opcode::kGemmPreload;
              pre.elem_bytes = p.elem_bytes;
              pre.spm_offset = b_off + (kb * h * n + nb * aw) * p.elem_bytes;
              pre.rows = static_cast<uint32_t>(rows);
              pre.cols = static_cast<uint32_t>(cols);
              pre.weight_tag = tag;
              pre.deps = {b_idx};
              if (last_gemm) pre.deps.push_back(*last_gemm);
              const uint32_t pre_idx = push(t, pre);

              Instruction gemm;
              gemm.opcode = Opcode::kGemm;
              gemm.elem_bytes = p.elem_bytes;
              gemm.spm_offset = kb * h * p.elem_bytes;
              gemm.rows = static_cast<uint32_t>(m);
              gemm.cols = static_cast<uint32_t>(cols);
              gemm.weight_tag = tag;
              gemm.deps = {pre_idx, a_ready};
              if (bias_idx) gemm.deps.push_back(*bias_idx);
              std::sort(gemm.deps.begin(), gemm.deps.end());
              last_gemm = push(t, gemm);
            }
          }

          if (last_k) {
            uint32_t tail = *last_gemm;
            size_t operand = 0;
            for (OpType op : node.fused_ops) {
              std::vector<uint32_t> deps{tail};
              uint64_t off = 0;
              if (is_elementwise_binary(op)) {
                deps.push_back(operand_idx[operand]);
                off = operand_off[operand];
                ++operand;
              }
              std::sort(deps.begin(), deps.end());
              tail = push(t, vector_instr(kind_of(op), core.acc_elem_bytes, off, m, n, deps));
            }
            layout.move_like_output(t, Opcode::kMvout, y, r, 0, {tail});
          }

          t.spm_bytes = spm;
          t.acc_bytes = m * n * core.acc_elem_bytes;
          if (t.spm_bytes > core.spm_partition_bytes() || t.acc_bytes > core.acc_partition_bytes()) {
            throw SimError(ErrorCode::kFootprint, "node '" + node.id + "': tile " + std::to_string(t.id) +
                                                      " needs " + std::to_string(t.spm_bytes) + " scratchpad / " +
                                                      std::to_string(t.acc_bytes) + " accumulator bytes");
          }
          prev = t.id;
          out.push_back(std::move(t));
        }
      }
    }
  }
  return out;
}

// Broadcast batch index of an operand with `operand_batch` leading dims.
uint64_t operand_batch_index(uint64_t b, const Dims& out_batch, const Dims& operand_batch) {
  uint64_t idx = 0;
  const size_t off = out_batch.size() - operand_batch.size();
  for (size_t i = 0; i < out_batch.size(); ++i) {
    const uint64_t extent = out_batch[i];
    uint64_t stride = 1;
    for (size_t j = i + 1; j < out_batch.size(); ++j) stride *= out_batch[j];
    const uint64_t coord = (b / stride) % extent;
    if (i >= off) {
      const uint64_t od = operand_batch[i - off];
      uint64_t ostride = 1;
      for (size_t j = i - off + 1; j < operand_batch.size(); ++j) ostride *= operand_batch[j];
      idx += (od == 1 ? 0 : coord) * ostride;
    }
  }
  return idx;
}

}  // namespace

std::vector<TileProgram> lower_gemm(const OpNode& node, const TileShape& tile, LoweringContext& ctx) {
  if (node.op_type != OpType::kGemm && node.op_type != OpType::kMatMul) {
    throw SimError(ErrorCode::kUnsupportedOperator, "lower_gemm called on node '" + node.id + "'");
  }
  const ModelGraph& g = ctx.graph;
  const GemmProblem p = gemm_problem(g, node);
  const Dims a = dims_of(g, node.inputs[0]);
  const Dims b = dims_of(g, node.inputs[1]);
  const Addr a_base = ctx.addresses.base_of(node.inputs[0]);
  const Addr b_base = ctx.addresses.base_of(node.inputs[1]);
  const uint32_t wa = width_of(g, node.inputs[0]);
  const uint32_t wb = width_of(g, node.inputs[1]);

  Dims a_batch, b_batch, out_batch;
  if (node.op_type == OpType::kMatMul) {
    a_batch.assign(a.begin(), a.end() - 2);
    b_batch.assign(b.begin(), b.end() - 2);
    const size_t rank = std::max(a_batch.size(), b_batch.size());
    for (size_t i = 0; i < rank; ++i) {
      const int64_t da = i + a_batch.size() < rank ? 1 : a_batch[i + a_batch.size() - rank];
      const int64_t db = i + b_batch.size() < rank ? 1 : b_batch[i + b_batch.size() - rank];
      out_batch.push_back(std::max(da, db));
    }
  }

  GemmLayout layout;
  layout.load_a = [&](TileProgram& t, const TileRange& r, uint64_t spm) -> std::pair<uint32_t, uint64_t> {
    const uint64_t ab = operand_batch_index(r.batch, out_batch, a_batch);
    const Addr addr = a_base + ((ab * p.m + r.m0) * p.k + r.k0) * wa;
    const uint64_t m = r.m1 - r.m0, k = r.k1 - r.k0;
    return {push(t, dma(Opcode::kMvin, addr, p.k * wa, wa, spm, m, k)), m * k};
  };
  layout.load_b = [&](TileProgram& t, const TileRange& r, uint64_t spm) {
    const uint64_t bb = operand_batch_index(r.batch, out_batch, b_batch);
    const Addr addr = b_base + ((bb * p.k + r.k0) * p.n + r.n0) * wb;
    return push(t, dma(Opcode::kMvin, addr, p.n * wb, wb, spm, r.k1 - r.k0, r.n1 - r.n0));
  };
  const uint64_t out_elems = p.batch * p.m * p.n;
  layout.move_like_output = [&](TileProgram& t, Opcode op, const std::string& tensor, const TileRange& r,
                                uint64_t spm, std::vector<uint32_t> deps) {
    const Addr base = ctx.addresses.base_of(tensor);
    const uint32_t w = width_of(g, tensor);
    const uint64_t e = elements_of(g, tensor);
    const uint64_t m = r.m1 - r.m0, n = r.n1 - r.n0;
    if (e == out_elems) {
      const Addr addr = base + ((r.batch * p.m + r.m0) * p.n + r.n0) * w;
      return push(t, dma(op, addr, p.n * w, w, spm, m, n, std::move(deps)));
    }
    if (e == p.n) return push(t, dma(op, base + r.n0 * w, n * w, w, spm, 1, n, std::move(deps)));
    if (e == p.m * p.n) {
      const Addr addr = base + (r.m0 * p.n + r.n0) * w;
      return push(t, dma(op, addr, p.n * w, w, spm, m, n, std::move(deps)));
    }
    const uint64_t cols = std::min(e, m * n);
    return push(t, dma(op, base, cols * w, w, spm, 1, cols, std::move(deps)));
  };
  return lower_gemm_like(node, p, tile, layout, ctx);
}

std::vector<TileProgram> lower_conv(const OpNode& node, LoweringContext& ctx) {
  if (node.op_type != OpType::kConv2D) {
    throw SimError(ErrorCode::kUnsupportedOperator, "lower_conv called on node '" + node.id + "'");
  }
  const ModelGraph& g = ctx.graph;
  const ConvGeometry c = conv_geometry(g, node);
  const GemmProblem p = gemm_problem(g, node);
  const TileShape tile = select_tile_shape(g, node, ctx.cfg);
  const Addr x_base = ctx.addresses.base_of(node.inputs[0]);
  const Addr w_base = ctx.addresses.base_of(node.inputs[1]);
  const uint32_t wx = width_of(g, node.inputs[0]);
  const uint32_t ww = width_of(g, node.inputs[1]);
  const uint64_t taps = c.kh * c.kw;
  const uint64_t hw = c.h * c.w;
  const uint64_t pixels = c.out_pixels();

  // Calls fn(image, first pixel, end pixel) per image the flat pixel range touches.
  auto for_each_image = [&](const TileRange& r, auto&& fn) {
    for (uint64_t p0 = r.m0; p0 < r.m1;) {
      const uint64_t img = p0 / pixels;
      const uint64_t p1 = std::min(r.m1, (img + 1) * pixels);
      fn(img, p0 - img * pixels, p1 - img * pixels);
      p0 = p1;
    }
  };

  GemmLayout layout;
  layout.load_a = [&](TileProgram& t, const TileRange& r, uint64_t spm) -> std::pair<uint32_t, uint64_t> {
    const uint64_t m = r.m1 - r.m0, k = r.k1 - r.k0;
    const uint64_t c0 = r.k0 / taps, c1 = (r.k1 - 1) / taps + 1;
    std::vector<uint32_t> loads;
    uint64_t raw = 0;
    for_each_image(r, [&](uint64_t img, uint64_t q0, uint64_t q1) {
      if (c.pointwise()) {
        const Addr addr = x_base + ((img * c.cin + c0) * hw + q0) * wx;
        loads.push_back(push(t, dma(Opcode::kMvin, addr, hw * wx, wx, spm + raw * wx, c1 - c0, q1 - q0)));
        raw += (c1 - c0) * (q1 - q0);
        return;
      }
      const int64_t oy0 = q0 / c.wo, oy1 = (q1 - 1) / c.wo;
      const int64_t iy0 = std::max<int64_t>(0, oy0 * static_cast<int64_t>(c.sh) - c.pad_top);
      const int64_t iy1 = std::min<int64_t>(static_cast<int64_t>(c.h) - 1,
                                            oy1 * static_cast<int64_t>(c.sh) - c.pad_top + static_cast<int64_t>(c.kh) - 1);
      if (iy1 < iy0) return;
      const uint64_t cols = static_cast<uint64_t>(iy1 - iy0 + 1) * c.w;
      const Addr addr = x_base + ((img * c.cin + c0) * hw + static_cast<uint64_t>(iy0) * c.w) * wx;
      loads.push_back(push(t, dma(Opcode::kMvin, addr, hw * wx, wx, spm + raw * wx, c1 - c0, cols)));
      raw += (c1 - c0) * cols;
    });
    if (c.pointwise()) return {loads.back(), raw};
    Instruction im2col;
    im2col.opcode = Opcode::kIm2col;
    im2col.elem_bytes = wx;
    im2col.spm_offset = spm + raw * wx;
    im2col.rows = static_cast<uint32_t>(m);
    im2col.cols = static_cast<uint32_t>(k);
    im2col.deps = loads;
    return {push(t, im2col), raw + m * k};
  };
  layout.load_b = [&](TileProgram& t, const TileRange& r, uint64_t spm) {
    const Addr addr = w_base + (r.n0 * p.k + r.k0) * ww;
    return push(t, dma(Opcode::kMvin, addr, p.k * ww, ww, spm, r.n1 - r.n0, r.k1 - r.k0));
  };
  const uint64_t out_elems = p.m * p.n;
  layout.move_like_output = [&](TileProgram& t, Opcode op, const std::string& tensor, const TileRange& r,
                                uint64_t spm, std::vector<uint32_t> deps) {
    const Addr base = ctx.addresses.base_of(tensor);
    const uint32_t w = width_of(g, tensor);
    const uint64_t e = elements_of(g, tensor);
    const uint64_t n = r.n1 - r.n0;
    if (e == out_elems) {
      uint32_t last = 0;
      uint64_t off = spm;
      for_each_image(r, [&](uint64_t img, uint64_t q0, uint64_t q1) {
        const Addr addr = base + ((img * c.cout + r.n0) * pixels + q0) * w;
        last = push(t, dma(op, addr, pixels * w, w, off, n, q1 - q0, deps));
        off += n * (q1 - q0) * w;
      });
      return last;
    }
    if (e == p.n) return push(t, dma(op, base + r.n0 * w, w, w, spm, n, 1, std::move(deps)));
    const uint64_t cols = std::min(e, (r.m1 - r.m0) * n);
    return push(t, dma(op, base, cols * w, w, spm, 1, cols, std::move(deps)));
  };
  return lower_gemm_like(node, p, tile, layout, ctx);
}

// ---------------------------------------------------------------------------
// Vector lowering

std::vector<TileProgram> lower_vector_node(const OpNode& node, LoweringContext& ctx) {
  const ModelGraph& g = ctx.graph;
  const CoreConfig& core = ctx.cfg.core;
  const uint64_t cap = core.spm_partition_bytes();
  const std::string& y = node.outputs[0];
  const uint32_t wy = width_of(g, y);
  const uint64_t total = elements_of(g, y);
  if (total == 0) throw SimError(ErrorCode::kDegenerateShape, "node '" + node.id + "' produces an empty tensor");

  auto new_tile = [&](uint64_t e0, uint64_t e1) {
    TileProgram t;
    t.id = ctx.next_tile_id++;
    t.owner_node = node.id;
    t.request_id = ctx.request_id;
    t.range.m0 = e0;
    t.range.m1 = e1;
    return t;
  };
  // Flat slice [e0, e1) of an operand, wrapping into smaller broadcast operands.
  auto load_flat = [&](TileProgram& t, const std::string& tensor, uint64_t e0, uint64_t e1, uint64_t spm) {
    const uint32_t w = width_of(g, tensor);
    const uint64_t e = elements_of(g, tensor);
    uint64_t start = e == total ? e0 : e0 % e;
    uint64_t len = std::min(e1 - e0, e);
    if (start + len > e) start = 0;
    return push(t, dma(Opcode::kMvin, ctx.addresses.base_of(tensor) + start * w, len * w, w, spm, 1, len));
  };

  std::vector<TileProgram> out;
  if (is_normalization(node.op_type)) {
    const Dims x = dims_of(g, node.inputs[0]);
    const int64_t rank = static_cast<int64_t>(x.size());
    int64_t axis = node.attrs.value("axis", int64_t{-1});
    if (axis < 0) axis += rank;
    if (axis != rank - 1) {
      throw SimError(ErrorCode::kUnsupportedAttribute,
                     "node '" + node.id + "': normalization over a non-trailing axis is not supported");
    }
    const uint64_t len = x.back();
    const uint64_t rows = total / len;
    const size_t base = base_input_count(node);
    const uint32_t wx = width_of(g, node.inputs[0]);
    uint64_t param_bytes = 0;
    for (size_t i = 1; i < base; ++i) param_bytes += elements_of(g, node.inputs[i]) * width_of(g, node.inputs[i]);
    uint64_t row_bytes = (wx + wy) * len;
    for (size_t i = base; i < node.inputs.size(); ++i) row_bytes += width_of(g, node.inputs[i]) * len;
    const uint64_t per_tile = param_bytes < cap ? (cap - param_bytes) / row_bytes : 0;
    if (per_tile == 0) {
      throw SimError(ErrorCode::kAxisTooLarge, "node '" + node.id + "': normalization axis of " + std::to_string(len) +
                                                   " elements does not fit one scratchpad partition (" +
                                                   std::to_string(cap) + " bytes)");
    }
    for (uint64_t r0 = 0; r0 < rows; r0 += per_tile) {
      const uint64_t r1 = std::min(rows, r0 + per_tile);
      const uint64_t n = r1 - r0;
      TileProgram t = new_tile(r0 * len, r1 * len);
      uint64_t spm = 0;
      std::vector<uint32_t> deps{push(t, dma(Opcode::kMvin, ctx.addresses.base_of(node.inputs[0]) + r0 * len * wx,
                                             len * wx, wx, spm, n, len))};
      spm += n * len * wx;
      for (size_t i = 1; i < base; ++i) {
        deps.push_back(load_flat(t, node.inputs[i], 0, elements_of(g, node.inputs[i]), spm));
        spm += elements_of(g, node.inputs[i]) * width_of(g, node.inputs[i]);
      }
      uint32_t tail = push(t, vector_instr(kind_of(node.op_type), wx, 0, n, len, deps));
      size_t operand = base;
      for (OpType op : node.fused_ops) {
        std::vector<uint32_t> d{tail};
        if (is_elementwise_binary(op)) {
          d.push_back(load_flat(t, node.inputs[operand], r0 * len, r1 * len, spm));
          spm += n * len * width_of(g, node.inputs[operand]);
          ++operand;
        }
        tail = push(t, vector_instr(kind_of(op), wy, 0, n, len, d));
      }
      push(t, dma(Opcode::kMvout, ctx.addresses.base_of(y) + r0 * len * wy, len * wy, wy, spm, n, len, {tail}));
      spm += n * len * wy;
      t.spm_bytes = spm;
      out.push_back(std::move(t));
    }
    return out;
  }

  uint64_t per_elem = wy;
  for (const auto& in : node.inputs) per_elem += width_of(g, in);
  uint64_t chunk = cap / per_elem;
  const uint64_t granule = std::max<uint64_t>(1, ctx.cfg.dram.access_bytes / wy);
  if (chunk >= granule) chunk = align_down(chunk, granule);
  chunk = std::min(chunk, total);
  if (chunk == 0) throw SimError(ErrorCode::kFootprint, "node '" + node.id + "': no element fits the partition");
  const VectorKind kind = kind_of(node.op_type);
  for (uint64_t e0 = 0; e0 < total; e0 += chunk) {
    const uint64_t e1 = std::min(total, e0 + chunk);
    const uint64_t len = e1 - e0;
    TileProgram t = new_tile(e0, e1);
    uint64_t spm = 0;
    std::vector<uint32_t> deps;
    for (const auto& in : node.inputs) {
      deps.push_back(load_flat(t, in, e0, e1, spm));
      spm += len * width_of(g, in);
    }
    const uint32_t v = push(t, vector_instr(kind, wy, 0, 1, len, deps));
    push(t, dma(Opcode::kMvout, ctx.addresses.base_of(y) + e0 * wy, len * wy, wy, spm, 1, len, {v}));
    spm += len * wy;
    t.spm_bytes = spm;
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<TileProgram> lower_node(const OpNode& node, LoweringContext& ctx) {
  switch (node.op_type) {
    case OpType::kGemm:
    case OpType::kMatMul: return lower_gemm(node, select_tile_shape(ctx.graph, node, ctx.cfg), ctx);
    case OpType::kConv2D: return lower_conv(node, ctx);
    default: return lower_vector_node(node, ctx);
  }
}

// ---------------------------------------------------------------------------
// Dependencies

TileDependencies build_tile_dependencies(std::vector<TileProgram>& tiles, const ModelGraph& g) {
  std::unordered_map<std::string, std::vector<uint64_t>> writers;  // node id -> tiles that MVOUT
  for (const auto& t : tiles) {
    const bool writes = std::any_of(t.instrs.begin(), t.instrs.end(),
                                    [](const Instruction& in) { return in.opcode == Opcode::kMvout; });
    if (writes) writers[t.owner_node].push_back(t.id);
  }
  const auto producers = g.producers();
  TileDependencies dag;
  for (auto& t : tiles) {
    const OpNode& node = g.nodes.at(g.node_index(t.owner_node));
    std::set<uint64_t> preds;
    for (const auto& in : node.inputs) {
      auto it = producers.find(in);
      if (it == producers.end()) continue;
      const auto& w = writers[g.nodes[it->second].id];
      preds.insert(w.begin(), w.end());
    }
    t.preds.assign(preds.begin(), preds.end());
    if (t.chain_pred) preds.insert(*t.chain_pred);
    dag[t.id].assign(preds.begin(), preds.end());
  }
  return dag;
}

std::vector<TileProgram> lower_graph(const ModelGraph& g, const SimConfig& cfg, const AddressMap& addresses,
                                     const std::string& request_id) {
  LoweringContext ctx{g, cfg, addresses, request_id, 0};
  std::vector<TileProgram> tiles;
  for (const auto& id : topological_order(g)) {
    auto node_tiles = lower_node(g.nodes[g.node_index(id)], ctx);
    std::move(node_tiles.begin(), node_tiles.end(), std::back_inserter(tiles));
  }
  build_tile_dependencies(tiles, g);
  return tiles;
}

}  // namespace npusim
