#include "npusim/workload.h"

#include <filesystem>
#include <fstream>

namespace npusim {

using nlohmann::json;

namespace {

class GraphBuilder {
 public:
  explicit GraphBuilder(std::string name, DType dtype) : dtype_(dtype) { g_.name = std::move(name); }

  const std::string& tensor(const std::string& name, Shape shape, TensorKind kind) {
    g_.tensors.push_back({name, dtype_, std::move(shape), kind});
    return g_.tensors.back().name;
  }

  void node(const std::string& id, OpType op, std::vector<std::string> inputs, std::string output,
            json attrs = json::object()) {
    OpNode n;
    n.id = id;
    n.op_type = op;
    n.attrs = std::move(attrs);
    n.inputs = std::move(inputs);
    n.outputs = {std::move(output)};
    g_.nodes.push_back(std::move(n));
  }

  ModelGraph finish() { return std::move(g_); }

 private:
  ModelGraph g_;
  DType dtype_;
};

void require_positive(int64_t v, const char* what) {
  if (v < 1) throw SimError(ErrorCode::kConfig, std::string("synthetic model: ") + what + " must be positive");
}

}  // namespace

ModelGraph build_gemm_model(int64_t m, int64_t k, int64_t n, DType dtype) {
  require_positive(m, "M");
  require_positive(k, "K");
  require_positive(n, "N");
  GraphBuilder b("gemm_" + std::to_string(m) + "x" + std::to_string(k) + "x" + std::to_string(n), dtype);
  b.tensor("A", {m, k}, TensorKind::kInput);
  b.tensor("B", {k, n}, TensorKind::kWeight);
  b.tensor("C", {m, n}, TensorKind::kOutput);
  b.node("gemm", OpType::kGemm, {"A", "B"}, "C");
  return b.finish();
}

ModelGraph build_mlp_model(int64_t layers, int64_t width, DType dtype) {
  require_positive(layers, "layers");
  require_positive(width, "width");
  GraphBuilder b("mlp_" + std::to_string(layers) + "x" + std::to_string(width), dtype);
  const Dim batch = std::string("batch");
  b.tensor("x", {batch, width}, TensorKind::kInput);
  std::string cur = "x";
  for (int64_t l = 0; l < layers; ++l) {
    const std::string w = "w" + std::to_string(l);
    b.tensor(w, {width, width}, TensorKind::kWeight);
    const bool last = l + 1 == layers;
    const std::string h = last ? "y" : "h" + std::to_string(l);
    b.tensor(h, {batch, width}, last ? TensorKind::kOutput : TensorKind::kActivation);
    b.node("fc" + std::to_string(l), OpType::kGemm, {cur, w}, h);
    cur = h;
    if (!last) {
      const std::string a = "a" + std::to_string(l);
      b.tensor(a, {batch, width}, TensorKind::kActivation);
      b.node("gelu" + std::to_string(l), OpType::kGelu, {cur}, a);
      cur = a;
    }
  }
  return b.finish();
}

ModelGraph build_conv_block_model(int64_t channels, int64_t hw, int64_t blocks, DType dtype) {
  require_positive(channels, "channels");
  require_positive(hw, "hw");
  require_positive(blocks, "blocks");
  GraphBuilder b("conv_block_" + std::to_string(channels) + "x" + std::to_string(hw), dtype);
  const Dim batch = std::string("batch");
  const Shape act{batch, channels, hw, hw};
  const json conv_attrs = {{"kernel_shape", {3, 3}}, {"strides", {1, 1}}, {"pads", {1, 1, 1, 1}}};
  b.tensor("x", act, TensorKind::kInput);
  std::string cur = "x";
  for (int64_t i = 0; i < blocks; ++i) {
    const std::string p = "b" + std::to_string(i) + "_";
    const bool last = i + 1 == blocks;
    b.tensor(p + "w1", {channels, channels, 3, 3}, TensorKind::kWeight);
    b.tensor(p + "w2", {channels, channels, 3, 3}, TensorKind::kWeight);
    b.tensor(p + "c1", act, TensorKind::kActivation);
    b.tensor(p + "r1", act, TensorKind::kActivation);
    b.tensor(p + "c2", act, TensorKind::kActivation);
    b.tensor(p + "s", act, TensorKind::kActivation);
    const std::string out = last ? "y" : p + "out";
    b.tensor(out, act, last ? TensorKind::kOutput : TensorKind::kActivation);
    b.node(p + "conv1", OpType::kConv2D, {cur, p + "w1"}, p + "c1", conv_attrs);
    b.node(p + "relu1", OpType::kRelu, {p + "c1"}, p + "r1");
    b.node(p + "conv2", OpType::kConv2D, {p + "r1", p + "w2"}, p + "c2", conv_attrs);
    b.node(p + "add", OpType::kAdd, {p + "c2", cur}, p + "s");
    b.node(p + "relu2", OpType::kRelu, {p + "s"}, out);
    cur = out;
  }
  return b.finish();
}

ModelGraph build_transformer_block_model(const TransformerSpec& s) {
  require_positive(s.d_model, "d_model");
  require_positive(s.heads, "heads");
  require_positive(s.kv_heads, "kv_heads");
  require_positive(s.seq, "seq");
  require_positive(s.ffn_mult, "ffn_mult");
  if (s.heads % s.kv_heads != 0) {
    throw SimError(ErrorCode::kConfig, "transformer_block: heads (" + std::to_string(s.heads) +
                                           ") must be divisible by kv_heads (" + std::to_string(s.kv_heads) + ")");
  }
  if (s.d_model % s.heads != 0) {
    throw SimError(ErrorCode::kConfig, "transformer_block: d_model (" + std::to_string(s.d_model) +
                                           ") must be divisible by heads (" + std::to_string(s.heads) + ")");
  }
  const int64_t d = s.d_model, dh = d / s.heads, kvh = s.kv_heads, group = s.heads / s.kv_heads;
  const int64_t kv_dim = kvh * dh, ffn = s.ffn_mult * d;
  const Dim batch = std::string("batch"), kv_len = std::string("kv_len");
  GraphBuilder b("transformer_block_d" + std::to_string(d) + "_h" + std::to_string(s.heads) + "_kv" +
                     std::to_string(kvh),
                 s.dtype);
  const Shape tok{batch, s.seq, d};
  b.tensor("x", tok, TensorKind::kInput);
  b.tensor("ln1_scale", {d}, TensorKind::kWeight);
  b.tensor("ln1_bias", {d}, TensorKind::kWeight);
  b.tensor("xn", tok, TensorKind::kActivation);
  b.tensor("wq", {d, d}, TensorKind::kWeight);
  b.tensor("wk", {d, kv_dim}, TensorKind::kWeight);
  b.tensor("wv", {d, kv_dim}, TensorKind::kWeight);
  // Query heads sharing a KV head are stacked as rows of one attention GEMM.
  b.tensor("q", {batch, kvh, group * s.seq, dh}, TensorKind::kActivation);
  b.tensor("k_new", {batch, s.seq, kv_dim}, TensorKind::kOutput);
  b.tensor("v_new", {batch, s.seq, kv_dim}, TensorKind::kOutput);
  b.tensor("k_cache", {batch, kvh, dh, kv_len}, TensorKind::kInput);
  b.tensor("v_cache", {batch, kvh, kv_len, dh}, TensorKind::kInput);
  b.tensor("scores", {batch, kvh, group * s.seq, kv_len}, TensorKind::kActivation);
  b.tensor("probs", {batch, kvh, group * s.seq, kv_len}, TensorKind::kActivation);
  b.tensor("ctx", tok, TensorKind::kActivation);
  b.tensor("wo", {d, d}, TensorKind::kWeight);
  b.tensor("attn_out", tok, TensorKind::kActivation);
  b.tensor("h1", tok, TensorKind::kActivation);
  b.tensor("ln2_scale", {d}, TensorKind::kWeight);
  b.tensor("ln2_bias", {d}, TensorKind::kWeight);
  b.tensor("h1n", tok, TensorKind::kActivation);
  b.tensor("w1", {d, ffn}, TensorKind::kWeight);
  b.tensor("f1", {batch, s.seq, ffn}, TensorKind::kActivation);
  b.tensor("f1a", {batch, s.seq, ffn}, TensorKind::kActivation);
  b.tensor("w2", {ffn, d}, TensorKind::kWeight);
  b.tensor("f2", tok, TensorKind::kActivation);
  b.tensor("y", tok, TensorKind::kOutput);

  b.node("ln1", OpType::kLayerNorm, {"x", "ln1_scale", "ln1_bias"}, "xn", {{"axis", -1}});
  b.node("q_proj", OpType::kGemm, {"xn", "wq"}, "q");
  b.node("k_proj", OpType::kGemm, {"xn", "wk"}, "k_new");
  b.node("v_proj", OpType::kGemm, {"xn", "wv"}, "v_new");
  b.node("attn_score", OpType::kMatMul, {"q", "k_cache"}, "scores");
  b.node("attn_softmax", OpType::kSoftmax, {"scores"}, "probs", {{"axis", -1}});
  b.node("attn_context", OpType::kMatMul, {"probs", "v_cache"}, "ctx");
  b.node("o_proj", OpType::kGemm, {"ctx", "wo"}, "attn_out");
  b.node("residual1", OpType::kAdd, {"x", "attn_out"}, "h1");
  b.node("ln2", OpType::kLayerNorm, {"h1", "ln2_scale", "ln2_bias"}, "h1n", {{"axis", -1}});
  b.node("ffn_up", OpType::kGemm, {"h1n", "w1"}, "f1");
  b.node("ffn_gelu", OpType::kGelu, {"f1"}, "f1a");
  b.node("ffn_down", OpType::kGemm, {"f1a", "w2"}, "f2");
  b.node("residual2", OpType::kAdd, {"h1", "f2"}, "y");
  return b.finish();
}

ModelGraph build_synthetic_model(const json& spec) {
  if (!spec.is_object() || !spec.contains("kind")) {
    throw SimError(ErrorCode::kConfig, "synthetic model needs an object with a 'kind' field");
  }
  const std::string kind = spec.at("kind").get<std::string>();
  const DType dtype = parse_dtype(spec.value("dtype", std::string("fp16")));
  auto get = [&](const char* key) -> int64_t {
    if (!spec.contains(key)) throw SimError(ErrorCode::kConfig, "synthetic " + kind + " model needs '" + key + "'");
    return spec.at(key).get<int64_t>();
  };
  if (kind == "gemm") return build_gemm_model(get("M"), get("K"), get("N"), dtype);
  if (kind == "mlp") return build_mlp_model(get("layers"), get("width"), dtype);
  if (kind == "conv_block") {
    return build_conv_block_model(get("channels"), get("hw"), spec.value("blocks", int64_t{1}), dtype);
  }
  if (kind == "transformer_block") {
    TransformerSpec t;
    t.d_model = get("d_model");
    t.heads = get("heads");
    t.kv_heads = spec.value("kv_heads", t.heads);
    t.seq = spec.value("seq", int64_t{1});
    t.ffn_mult = spec.value("ffn_mult", int64_t{4});
    t.dtype = dtype;
    return build_transformer_block_model(t);
  }
  throw SimError(ErrorCode::kConfig, "unknown synthetic model kind '" + kind + "'");
}

// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<const ModelGraph> resolve_model(const json& r, const std::string& base_dir, const ModelLibrary& lib,
                                                std::map<std::string, std::shared_ptr<const ModelGraph>>& cache,
                                                const std::string& where) {
  if (r.contains("model")) {
    return std::make_shared<const ModelGraph>(build_synthetic_model(r.at("model")));
  }
  if (!r.contains("model_file")) throw SimError(ErrorCode::kConfig, where + ": needs 'model_file' or 'model'");
  const std::string file = r.at("model_file").get<std::string>();
  if (auto it = lib.find(file); it != lib.end()) return it->second;
  std::filesystem::path path(file);
  if (path.is_relative() && !base_dir.empty()) path = std::filesystem::path(base_dir) / path;
  const std::string key = path.lexically_normal().string();
  if (auto it = lib.find(key); it != lib.end()) return it->second;
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  auto g = std::make_shared<const ModelGraph>(load_graph_file(key));
  cache[key] = g;
  return g;
}

}  // namespace

std::vector<InferenceRequest> parse_workload(const json& doc, const std::string& base_dir, const ModelLibrary& lib) {
  const json* list = &doc;
  if (doc.is_object()) {
    if (!doc.contains("requests")) throw SimError(ErrorCode::kConfig, "workload object needs a 'requests' array");
    list = &doc.at("requests");
  }
  if (!list->is_array()) throw SimError(ErrorCode::kConfig, "workload must be a JSON array of requests");
  std::map<std::string, std::shared_ptr<const ModelGraph>> cache;
  std::vector<InferenceRequest> out;
  for (size_t i = 0; i < list->size(); ++i) {
    const json& r = (*list)[i];
    const std::string where = "workload request #" + std::to_string(i);
    if (!r.is_object()) throw SimError(ErrorCode::kConfig, where + " is not an object");
    try {
      InferenceRequest req;
      req.request_id = r.value("request_id", "req" + std::to_string(i));
      req.model = resolve_model(r, base_dir, lib, cache, where);
      req.batch = r.value("batch", uint64_t{1});
      req.arrival = r.value("arrival_cycle", uint64_t{0});
      const std::string kind = r.value("kind", std::string("static"));
      if (kind == "generative") {
        req.kind = RequestKind::kGenerative;
        req.prompt_len = r.value("prompt_len", uint64_t{0});
        req.gen_tokens = r.value("gen_tokens", uint64_t{0});
      } else if (kind != "static") {
        throw SimError(ErrorCode::kConfig, where + ": kind must be 'static' or 'generative'");
      }
      if (r.contains("bindings")) req.bindings = r.at("bindings").get<ShapeBindings>();
      req.repeat = r.value("repeat", uint64_t{1});
      req.background = r.value("background", false);
      out.push_back(std::move(req));
    } catch (const json::exception& e) {
      throw SimError(ErrorCode::kConfig, where + ": " + e.what());
    }
  }
  return out;
}

std::vector<InferenceRequest> load_workload(const std::string& path, const ModelLibrary& lib) {
  std::ifstream in(path);
  if (!in) throw SimError(ErrorCode::kIo, "cannot open workload file '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw SimError(ErrorCode::kParse, "workload '" + path + "': " + e.what());
  }
  return parse_workload(doc, std::filesystem::path(path).parent_path().string(), lib);
}

}  // namespace npusim
