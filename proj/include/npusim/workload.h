#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "npusim/graph.h"
#include "npusim/scheduler.h"

namespace npusim {

ModelGraph build_gemm_model(int64_t m, int64_t k, int64_t n, DType dtype = DType::kFp16);

// `layers` Gemms of width x width separated by GELU, with a symbolic batch.
ModelGraph build_mlp_model(int64_t layers, int64_t width, DType dtype = DType::kFp16);

// Residual blocks: conv3x3 -> ReLU -> conv3x3 -> Add(skip) -> ReLU, NCHW with
// a symbolic batch.
ModelGraph build_conv_block_model(int64_t channels, int64_t hw, int64_t blocks, DType dtype = DType::kFp16);

struct TransformerSpec {
  int64_t d_model = 512;
  int64_t heads = 8;
  int64_t kv_heads = 8;
  int64_t seq = 1;  // query tokens per step
  int64_t ffn_mult = 4;
  DType dtype = DType::kFp16;
};

// One pre-LN decoder block over symbolic batch and kv_len. Attention nodes are
// attn_score, attn_softmax and attn_context; kv_heads < heads gives grouped
// query attention.
ModelGraph build_transformer_block_model(const TransformerSpec& spec);

// {"kind": "gemm" | "mlp" | "conv_block" | "transformer_block", ...params}
ModelGraph build_synthetic_model(const nlohmann::json& spec);

// Models passed on the command line, looked up by path or graph name.
using ModelLibrary = std::map<std::string, std::shared_ptr<const ModelGraph>>;

// A JSON array of requests, or an object with a "requests" array.
std::vector<InferenceRequest> parse_workload(const nlohmann::json& doc, const std::string& base_dir,
                                             const ModelLibrary& library = {});
std::vector<InferenceRequest> load_workload(const std::string& path, const ModelLibrary& library = {});

}  // namespace npusim
