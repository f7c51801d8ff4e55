#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <optional>

#include "npusim/lowering.h"
#include "npusim/workload.h"

namespace npusim {
namespace {

using nlohmann::json;

std::vector<std::string> op_sequence(const ModelGraph& g) {
  std::vector<std::string> ops;
  for (const auto& id : topological_order(g)) ops.push_back(op_type_name(g.nodes[g.node_index(id)].op_type));
  return ops;
}

TEST(Synthetic, GemmIsOneNode) {
  ModelGraph g = build_synthetic_model({{"kind", "gemm"}, {"M", 64}, {"K", 64}, {"N", 64}});
  ASSERT_EQ(g.nodes.size(), 1u);
  EXPECT_EQ(g.nodes[0].op_type, OpType::kGemm);
  EXPECT_TRUE(validate_graph(g).empty());
}

TEST(Synthetic, MlpIsGemmGeluGemm) {
  ModelGraph g = build_synthetic_model({{"kind", "mlp"}, {"layers", 2}, {"width", 128}});
  EXPECT_EQ(op_sequence(g), (std::vector<std::string>{"Gemm", "GELU", "Gemm"}));
  EXPECT_TRUE(validate_graph(g).empty());
}

uint64_t kv_weight_bytes(int64_t kv_heads) {
  TransformerSpec s;
  s.d_model = 512;
  s.heads = 8;
  s.kv_heads = kv_heads;
  ModelGraph g = build_transformer_block_model(s);
  return g.tensor("wk").byte_size() + g.tensor("wv").byte_size();
}

TEST(Synthetic, GroupedKvShrinksKvWeights) { EXPECT_EQ(kv_weight_bytes(8), 4 * kv_weight_bytes(2)); }

TEST(Synthetic, IndivisibleHeadsRejected) {
  try {
    build_synthetic_model({{"kind", "transformer_block"}, {"d_model", 512}, {"heads", 8}, {"kv_heads", 3}});
    FAIL();
  } catch (const SimError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
}

TEST(Synthetic, NonPositiveDimsRejected) {
  EXPECT_THROW(build_gemm_model(0, 8, 8), SimError);
  EXPECT_THROW(build_synthetic_model({{"kind", "mlp"}, {"layers", 2}}), SimError);
  EXPECT_THROW(build_synthetic_model({{"kind", "lstm"}}), SimError);
}

TEST(Synthetic, TransformerBlockStructure) {
  ModelGraph g = build_synthetic_model({{"kind", "transformer_block"}, {"d_model", 256}, {"heads", 4}});
  EXPECT_TRUE(validate_graph(g).empty());
  auto op_of = [&](const std::string& id) { return g.nodes[g.node_index(id)].op_type; };
  EXPECT_EQ(op_of("q_proj"), OpType::kGemm);
  EXPECT_EQ(op_of("k_proj"), OpType::kGemm);
  EXPECT_EQ(op_of("v_proj"), OpType::kGemm);
  EXPECT_EQ(op_of("attn_score"), OpType::kMatMul);
  EXPECT_EQ(op_of("attn_softmax"), OpType::kSoftmax);
  EXPECT_EQ(op_of("attn_context"), OpType::kMatMul);
  EXPECT_EQ(op_of("o_proj"), OpType::kGemm);
  EXPECT_EQ(op_of("ln1"), OpType::kLayerNorm);
  EXPECT_EQ(op_of("ln2"), OpType::kLayerNorm);
  // kv_len stays symbolic until a generation step binds it.
  EXPECT_FALSE(is_concrete(g.tensor("k_cache").shape));
  ModelGraph bound = bind_shapes(g, {{"batch", 2}, {"kv_len", 100}});
  EXPECT_EQ(concrete_dims(bound.tensor("k_cache").shape), (std::vector<int64_t>{2, 4, 64, 100}));
}

TEST(Synthetic, BuildersAreDeterministic) {
  const json spec = {{"kind", "conv_block"}, {"channels", 16}, {"hw", 8}, {"blocks", 2}};
  EXPECT_EQ(build_synthetic_model(spec), build_synthetic_model(spec));
}

struct AttentionTraffic {
  uint64_t total = 0;     // all attention MVIN bytes
  uint64_t kv_cache = 0;  // MVIN bytes that land in k_cache or v_cache
};

AttentionTraffic attention_mvin_bytes(int64_t kv_len) {
  const SimConfig cfg = mobile_preset();
  TransformerSpec s;
  s.d_model = 512;
  s.heads = 8;
  ModelGraph g = bind_shapes(fuse_operators(build_transformer_block_model(s)), {{"batch", 128}, {"kv_len", kv_len}});
  AddressMap addrs = AddressMap::build(g, 0, cfg.dram.access_bytes);
  LoweringContext ctx{g, cfg, addrs, "r"};
  auto in_tensor = [&](Addr a, const std::string& t) {
    return a >= addrs.base_of(t) && a < addrs.base_of(t) + g.tensor(t).byte_size();
  };
  AttentionTraffic out;
  for (const auto& node : g.nodes) {
    if (node.id != "attn_score" && node.id != "attn_context") continue;
    for (const auto& t : lower_node(node, ctx)) {
      for (const auto& in : t.instrs) {
        if (in.opcode != Opcode::kMvin) continue;
        out.total += in.bytes();
        if (in_tensor(*in.dram_addr, "k_cache") || in_tensor(*in.dram_addr, "v_cache")) out.kv_cache += in.bytes();
      }
    }
  }
  return out;
}

TEST(Synthetic, AttentionTrafficLinearInKvLen) {
  const AttentionTraffic t1 = attention_mvin_bytes(1023);
  const AttentionTraffic t2 = attention_mvin_bytes(2046);
  // Each cache element is read exactly once per step: 2 caches x batch x heads x dh x kv_len x 2 B.
  EXPECT_EQ(t1.kv_cache, 2ull * 128 * 8 * 64 * 1023 * 2);
  EXPECT_EQ(t2.kv_cache, 2ull * 128 * 8 * 64 * 2046 * 2);
  // The cache dominates, so all attention traffic doubles with kv_len.
  EXPECT_GT(static_cast<double>(t1.kv_cache), 0.98 * static_cast<double>(t1.total));
  EXPECT_NEAR(static_cast<double>(t2.total) / static_cast<double>(t1.total), 2.0, 0.02);
}

class WorkloadFile : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("npusim_wl_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    std::filesystem::create_directories(dir_ / "models");
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::string write(const std::string& rel, const std::string& text) {
    const auto p = dir_ / rel;
    std::ofstream(p) << text;
    return p.string();
  }
  std::filesystem::path dir_;
};

TEST_F(WorkloadFile, ArrayWithRelativeModelFile) {
  write("models/g.json", graph_to_json(build_gemm_model(8, 8, 8)).dump());
  const auto path = write("w.json", R"([
    {"request_id": "a", "model_file": "models/g.json", "batch": 2, "arrival_cycle": 10},
    {"request_id": "b", "model": {"kind": "transformer_block", "d_model": 64, "heads": 4},
     "kind": "generative", "prompt_len": 16, "gen_tokens": 4}
  ])");
  auto reqs = load_workload(path);
  ASSERT_EQ(reqs.size(), 2u);
  EXPECT_EQ(reqs[0].request_id, "a");
  EXPECT_EQ(reqs[0].batch, 2u);
  EXPECT_EQ(reqs[0].arrival, 10u);
  EXPECT_EQ(reqs[0].kind, RequestKind::kStatic);
  EXPECT_EQ(reqs[0].model->nodes.size(), 1u);
  EXPECT_EQ(reqs[1].kind, RequestKind::kGenerative);
  EXPECT_EQ(reqs[1].prompt_len, 16u);
  EXPECT_EQ(reqs[1].gen_tokens, 4u);
}

TEST_F(WorkloadFile, ObjectFormAndLibraryLookup) {
  auto lib_model = std::make_shared<const ModelGraph>(build_mlp_model(2, 32));
  ModelLibrary lib{{"my_mlp", lib_model}};
  auto reqs = parse_workload(json::parse(R"({"requests": [{"model_file": "my_mlp", "repeat": 3}]})"), "", lib);
  ASSERT_EQ(reqs.size(), 1u);
  EXPECT_EQ(reqs[0].model, lib_model);
  EXPECT_EQ(reqs[0].repeat, 3u);
  EXPECT_EQ(reqs[0].request_id, "req0");
}

TEST_F(WorkloadFile, Errors) {
  auto code_of = [](auto&& fn) -> std::optional<ErrorCode> {
    try {
      fn();
    } catch (const SimError& e) {
      return e.code();
    }
    return std::nullopt;
  };
  EXPECT_EQ(code_of([&] { load_workload((dir_ / "absent.json").string()); }), ErrorCode::kIo);
  EXPECT_EQ(code_of([&] { load_workload(write("bad.json", "[{")); }), ErrorCode::kParse);
  EXPECT_EQ(code_of([&] { parse_workload(json::parse(R"([{"model": {"kind": "gemm", "M": 8, "K": 8, "N": 8}, "kind": "batch"}])"), "", {}); }),
            ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { parse_workload(json::parse(R"([{"request_id": "r"}])"), "", {}); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { parse_workload(json::parse(R"({"reqs": []})"), "", {}); }), ErrorCode::kConfig);
}

}  // namespace
}  // namespace npusim
