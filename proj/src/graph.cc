#include "npusim/graph.h"

#include <algorithm>
#include <fstream>
#include <functional>
#include <queue>
#include <set>
#include <sstream>

namespace npusim {

using nlohmann::json;

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kUnsupportedOperator: return "unsupported-operator";
    case ErrorCode::kLinkage: return "linkage";
    case ErrorCode::kUnboundSymbol: return "unbound-symbol";
    case ErrorCode::kShapeMismatch: return "shape-mismatch";
    case ErrorCode::kCycle: return "cycle";
    case ErrorCode::kDegenerateShape: return "degenerate-shape";
    case ErrorCode::kFootprint: return "footprint";
    case ErrorCode::kUnsupportedAttribute: return "unsupported-attribute";
    case ErrorCode::kAxisTooLarge: return "axis-too-large";
    case ErrorCode::kBlockTooTall: return "block-too-tall";
    case ErrorCode::kMissingLatencyConfig: return "missing-latency-config";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kConsistency: return "consistency";
    case ErrorCode::kStarvation: return "starvation";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

uint32_t dtype_width(DType dtype) {
  switch (dtype) {
    case DType::kInt8: return 1;
    case DType::kFp16: return 2;
    case DType::kFp32: return 4;
  }
  return 0;
}

const char* dtype_name(DType dtype) {
  switch (dtype) {
    case DType::kInt8: return "int8";
    case DType::kFp16: return "fp16";
    case DType::kFp32: return "fp32";
  }
  return "?";
}

DType parse_dtype(const std::string& name) {
  if (name == "int8") return DType::kInt8;
  if (name == "fp16") return DType::kFp16;
  if (name == "fp32") return DType::kFp32;
  throw SimError(ErrorCode::kParse, "unknown dtype '" + name + "'");
}

bool is_concrete(const Shape& shape) {
  return std::all_of(shape.begin(), shape.end(),
                     [](const Dim& d) { return std::holds_alternative<int64_t>(d); });
}

std::vector<int64_t> concrete_dims(const Shape& shape) {
  std::vector<int64_t> dims;
  dims.reserve(shape.size());
  for (const Dim& d : shape) {
    if (!std::holds_alternative<int64_t>(d)) {
      throw SimError(ErrorCode::kUnboundSymbol,
                     "unbound symbol '" + std::get<std::string>(d) + "'");
    }
    dims.push_back(std::get<int64_t>(d));
  }
  return dims;
}

int64_t num_elements(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : concrete_dims(shape)) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    if (std::holds_alternative<int64_t>(shape[i])) {
      os << std::get<int64_t>(shape[i]);
    } else {
      os << '"' << std::get<std::string>(shape[i]) << '"';
    }
  }
  os << ']';
  return os.str();
}

const char* tensor_kind_name(TensorKind kind) {
  switch (kind) {
    case TensorKind::kInput: return "input";
    case TensorKind::kOutput: return "output";
    case TensorKind::kWeight: return "weight";
    case TensorKind::kActivation: return "activation";
  }
  return "?";
}

static TensorKind parse_tensor_kind(const std::string& name) {
  if (name == "input") return TensorKind::kInput;
  if (name == "output") return TensorKind::kOutput;
  if (name == "weight") return TensorKind::kWeight;
  if (name == "activation") return TensorKind::kActivation;
  throw SimError(ErrorCode::kParse, "unknown tensor kind '" + name + "'");
}

uint64_t TensorDesc::byte_size() const {
  return static_cast<uint64_t>(num_elements(shape)) * dtype_width(dtype);
}

const char* op_type_name(OpType op) {
  switch (op) {
    case OpType::kGemm: return "Gemm";
    case OpType::kMatMul: return "MatMul";
    case OpType::kConv2D: return "Conv2D";
    case OpType::kAdd: return "Add";
    case OpType::kMul: return "Mul";
    case OpType::kGelu: return "GELU";
    case OpType::kRelu: return "ReLU";
    case OpType::kSoftmax: return "Softmax";
    case OpType::kLayerNorm: return "LayerNorm";
  }
  return "?";
}

std::optional<OpType> parse_op_type(const std::string& name) {
  static const std::map<std::string, OpType> kNames = {
      {"Gemm", OpType::kGemm},       {"MatMul", OpType::kMatMul},
      {"Conv2D", OpType::kConv2D},   {"Conv", OpType::kConv2D},
      {"Add", OpType::kAdd},         {"Mul", OpType::kMul},
      {"GELU", OpType::kGelu},       {"Gelu", OpType::kGelu},
      {"ReLU", OpType::kRelu},       {"Relu", OpType::kRelu},
      {"Softmax", OpType::kSoftmax}, {"LayerNorm", OpType::kLayerNorm},
      {"LayerNormalization", OpType::kLayerNorm},
  };
  auto it = kNames.find(name);
  if (it == kNames.end()) return std::nullopt;
  return it->second;
}

bool is_elementwise_binary(OpType op) { return op == OpType::kAdd || op == OpType::kMul; }

bool is_normalization(OpType op) { return op == OpType::kSoftmax || op == OpType::kLayerNorm; }

// ---------------------------------------------------------------------------
// ModelGraph accessors

const TensorDesc* ModelGraph::find_tensor(const std::string& tensor_name) const {
  for (const auto& t : tensors) {
    if (t.name == tensor_name) return &t;
  }
  return nullptr;
}

TensorDesc* ModelGraph::find_tensor(const std::string& tensor_name) {
  for (auto& t : tensors) {
    if (t.name == tensor_name) return &t;
  }
  return nullptr;
}

const TensorDesc& ModelGraph::tensor(const std::string& tensor_name) const {
  const TensorDesc* t = find_tensor(tensor_name);
  if (!t) throw SimError(ErrorCode::kLinkage, "undeclared tensor '" + tensor_name + "'");
  return *t;
}

int ModelGraph::node_index(const std::string& node_id) const {
  for (size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].id == node_id) return static_cast<int>(i);
  }
  return -1;
}

std::unordered_map<std::string, int> ModelGraph::producers() const {
  std::unordered_map<std::string, int> result;
  for (size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& out : nodes[i].outputs) result.emplace(out, static_cast<int>(i));
  }
  return result;
}

std::unordered_map<std::string, std::vector<int>> ModelGraph::consumers() const {
  std::unordered_map<std::string, std::vector<int>> result;
  for (size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& in : nodes[i].inputs) {
      auto& list = result[in];
      if (list.empty() || list.back() != static_cast<int>(i)) list.push_back(static_cast<int>(i));
    }
  }
  return result;
}

std::vector<std::vector<int>> ModelGraph::node_predecessors() const {
  std::unordered_map<std::string, std::vector<int>> all_producers;
  for (size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& out : nodes[i].outputs) all_producers[out].push_back(static_cast<int>(i));
  }
  std::vector<std::vector<int>> preds(nodes.size());
  for (size_t i = 0; i < nodes.size(); ++i) {
    std::set<int> uniq;
    for (const auto& in : nodes[i].inputs) {
      auto it = all_producers.find(in);
      if (it == all_producers.end()) continue;
      uniq.insert(it->second.begin(), it->second.end());
    }
    preds[i].assign(uniq.begin(), uniq.end());
  }
  return preds;
}

std::vector<std::string> ModelGraph::graph_inputs() const {
  std::vector<std::string> names;
  for (const auto& t : tensors) {
    if (t.kind == TensorKind::kInput) names.push_back(t.name);
  }
  return names;
}

std::vector<std::string> ModelGraph::graph_outputs() const {
  std::vector<std::string> names;
  for (const auto& t : tensors) {
    if (t.kind == TensorKind::kOutput) names.push_back(t.name);
  }
  return names;
}

// ---------------------------------------------------------------------------
// Parsing and serialization

namespace {

std::string location_of(const std::string& text, size_t byte) {
  size_t line = 1, col = 1;
  for (size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw SimError(ErrorCode::kParse, where + ": missing key '" + key + "'");
  }
  return obj.at(key);
}

Shape parse_shape(const json& j, const std::string& where) {
  if (!j.is_array()) throw SimError(ErrorCode::kParse, where + ": shape must be an array");
  Shape shape;
  for (const auto& d : j) {
    if (d.is_number_integer()) {
      int64_t v = d.get<int64_t>();
      if (v < 0) throw SimError(ErrorCode::kParse, where + ": negative dimension");
      shape.emplace_back(v);
    } else if (d.is_string()) {
      shape.emplace_back(d.get<std::string>());
    } else {
      throw SimError(ErrorCode::kParse, where + ": dimension must be integer or string");
    }
  }
  return shape;
}

std::vector<std::string> parse_names(const json& j, const std::string& where) {
  if (!j.is_array()) throw SimError(ErrorCode::kParse, where + " must be an array");
  std::vector<std::string> names;
  for (const auto& n : j) {
    if (!n.is_string()) throw SimError(ErrorCode::kParse, where + " entries must be strings");
    names.push_back(n.get<std::string>());
  }
  return names;
}

}  // namespace

ModelGraph parse_graph(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SimError(ErrorCode::kParse,
                   "malformed JSON at " + location_of(text, e.byte == 0 ? 0 : e.byte - 1) +
                       ": " + e.what());
  }
  if (!doc.is_object()) throw SimError(ErrorCode::kParse, "graph document must be an object");

  ModelGraph g;
  g.name = require(doc, "name", "graph").get<std::string>();

  std::set<std::string> declared;
  for (const auto& jt : require(doc, "tensors", "graph")) {
    TensorDesc t;
    t.name = require(jt, "name", "tensor").get<std::string>();
    const std::string where = "tensor '" + t.name + "'";
    t.dtype = parse_dtype(require(jt, "dtype", where).get<std::string>());
    t.shape = parse_shape(require(jt, "shape", where), where);
    t.kind = parse_tensor_kind(require(jt, "kind", where).get<std::string>());
    if (!declared.insert(t.name).second) {
      throw SimError(ErrorCode::kParse, "duplicate tensor '" + t.name + "'");
    }
    g.tensors.push_back(std::move(t));
  }

  for (const auto& jn : require(doc, "nodes", "graph")) {
    OpNode n;
    n.id = require(jn, "id", "node").get<std::string>();
    const std::string where = "node '" + n.id + "'";
    const std::string op = require(jn, "op_type", where).get<std::string>();
    auto parsed = parse_op_type(op);
    if (!parsed) {
      throw SimError(ErrorCode::kUnsupportedOperator,
                     "unsupported operator '" + op + "' in node '" + n.id + "'");
    }
    n.op_type = *parsed;
    if (jn.contains("attrs")) {
      if (!jn.at("attrs").is_object()) throw SimError(ErrorCode::kParse, where + ": attrs must be an object");
      n.attrs = jn.at("attrs");
    }
    n.inputs = parse_names(require(jn, "inputs", where), where + " inputs");
    n.outputs = parse_names(require(jn, "outputs", where), where + " outputs");
    if (jn.contains("fused_ops")) {
      for (const auto& f : jn.at("fused_ops")) {
        auto tag = parse_op_type(f.get<std::string>());
        if (!tag) {
          throw SimError(ErrorCode::kUnsupportedOperator,
                         "unsupported fused operator '" + f.get<std::string>() + "' in node '" +
                             n.id + "'");
        }
        n.fused_ops.push_back(*tag);
      }
    }
    for (const auto* list : {&n.inputs, &n.outputs}) {
      for (const auto& ref : *list) {
        if (!declared.count(ref)) {
          throw SimError(ErrorCode::kLinkage,
                         "node '" + n.id + "' references undeclared tensor '" + ref + "'");
        }
      }
    }
    g.nodes.push_back(std::move(n));
  }
  return g;
}

ModelGraph load_graph_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SimError(ErrorCode::kIo, "cannot open graph file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_graph(ss.str());
}

json graph_to_json(const ModelGraph& g) {
  json doc;
  doc["name"] = g.name;
  doc["tensors"] = json::array();
  for (const auto& t : g.tensors) {
    json shape = json::array();
    for (const Dim& d : t.shape) {
      if (std::holds_alternative<int64_t>(d)) {
        shape.push_back(std::get<int64_t>(d));
      } else {
        shape.push_back(std::get<std::string>(d));
      }
    }
    doc["tensors"].push_back({{"name", t.name},
                              {"dtype", dtype_name(t.dtype)},
                              {"shape", shape},
                              {"kind", tensor_kind_name(t.kind)}});
  }
  doc["nodes"] = json::array();
  for (const auto& n : g.nodes) {
    json jn = {{"id", n.id},
               {"op_type", op_type_name(n.op_type)},
               {"attrs", n.attrs},
               {"inputs", n.inputs},
               {"outputs", n.outputs}};
    if (!n.fused_ops.empty()) {
      json tags = json::array();
      for (OpType f : n.fused_ops) tags.push_back(op_type_name(f));
      jn["fused_ops"] = tags;
    }
    doc["nodes"].push_back(std::move(jn));
  }
  return doc;
}

std::string serialize_graph(const ModelGraph& g) { return graph_to_json(g).dump(2); }

// ---------------------------------------------------------------------------
// Validation

const char* violation_kind_name(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::kCycle: return "cycle";
    case ViolationKind::kArity: return "arity";
    case ViolationKind::kMultiProducer: return "multi-producer";
    case ViolationKind::kNoProducer: return "no-producer";
    case ViolationKind::kIllegalFusion: return "illegal-fusion";
    case ViolationKind::kUnknownTensor: return "unknown-tensor";
  }
  return "?";
}

namespace {

struct Arity {
  size_t min_inputs;
  size_t max_inputs;
};

Arity arity_of(OpType op) {
  switch (op) {
    case OpType::kGemm: return {2, 3};
    case OpType::kMatMul: return {2, 2};
    case OpType::kConv2D: return {2, 3};
    case OpType::kAdd:
    case OpType::kMul: return {2, 2};
    case OpType::kGelu:
    case OpType::kRelu:
    case OpType::kSoftmax: return {1, 1};
    case OpType::kLayerNorm: return {1, 3};
  }
  return {0, 0};
}

const std::set<OpType>& fusable_tags(OpType base) {
  static const std::set<OpType> kCompute = {OpType::kAdd, OpType::kRelu, OpType::kGelu};
  static const std::set<OpType> kNorm = {OpType::kAdd};
  static const std::set<OpType> kNone = {};
  switch (base) {
    case OpType::kGemm:
    case OpType::kConv2D: return kCompute;
    case OpType::kLayerNorm: return kNorm;
    default: return kNone;
  }
}

size_t fused_extra_inputs(const OpNode& n) {
  return static_cast<size_t>(std::count_if(n.fused_ops.begin(), n.fused_ops.end(), is_elementwise_binary));
}

}  // namespace

ValidationReport validate_graph(const ModelGraph& g) {
  ValidationReport report;
  std::set<std::string> declared;
  for (const auto& t : g.tensors) declared.insert(t.name);

  std::unordered_map<std::string, std::vector<int>> producers;
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    const OpNode& n = g.nodes[i];
    for (const auto* list : {&n.inputs, &n.outputs}) {
      for (const auto& ref : *list) {
        if (!declared.count(ref)) {
          report.push_back({ViolationKind::kUnknownTensor, {n.id},
                            "node '" + n.id + "' references undeclared tensor '" + ref + "'"});
        }
      }
    }
    Arity a = arity_of(n.op_type);
    const size_t extra = fused_extra_inputs(n);
    const size_t base_inputs = n.inputs.size() >= extra ? n.inputs.size() - extra : 0;
    if (n.inputs.size() < extra || base_inputs < a.min_inputs || base_inputs > a.max_inputs ||
        n.outputs.size() != 1) {
      std::ostringstream os;
      os << op_type_name(n.op_type) << " node '" << n.id << "' has " << n.inputs.size()
         << " inputs and " << n.outputs.size() << " outputs; expected " << a.min_inputs;
      if (a.max_inputs != a.min_inputs) os << ".." << a.max_inputs;
      if (extra) os << " (+" << extra << " fused operands)";
      os << " inputs and 1 output";
      report.push_back({ViolationKind::kArity, {n.id}, os.str()});
    }
    const auto& allowed = fusable_tags(n.op_type);
    for (OpType tag : n.fused_ops) {
      if (!allowed.count(tag)) {
        report.push_back({ViolationKind::kIllegalFusion, {n.id},
                          std::string("node '") + n.id + "' cannot absorb " + op_type_name(tag)});
      }
    }
    for (const auto& out : n.outputs) producers[out].push_back(static_cast<int>(i));
  }

  for (const auto& t : g.tensors) {
    auto it = producers.find(t.name);
    const size_t count = it == producers.end() ? 0 : it->second.size();
    if (count > 1) {
      std::vector<std::string> ids;
      for (int idx : it->second) ids.push_back(g.nodes[idx].id);
      report.push_back({ViolationKind::kMultiProducer, ids,
                        "tensor '" + t.name + "' has " + std::to_string(count) + " producers"});
    } else if (count == 0 && t.kind != TensorKind::kWeight && t.kind != TensorKind::kInput) {
      report.push_back({ViolationKind::kNoProducer, {}, "tensor '" + t.name + "' has no producer"});
    }
  }

  // Tarjan SCC over the node dependency graph; one entry per cyclic component.
  const auto preds = g.node_predecessors();
  const int n = static_cast<int>(g.nodes.size());
  std::vector<std::vector<int>> succs(n);
  for (int v = 0; v < n; ++v) {
    for (int p : preds[v]) succs[p].push_back(v);
  }
  std::vector<int> index(n, -1), low(n, 0);
  std::vector<bool> on_stack(n, false);
  std::vector<int> stack;
  int counter = 0;
  std::vector<std::vector<int>> components;
  std::function<void(int)> strongconnect = [&](int v) {
    index[v] = low[v] = counter++;
    stack.push_back(v);
    on_stack[v] = true;
    for (int w : succs[v]) {
      if (index[w] < 0) {
        strongconnect(w);
        low[v] = std::min(low[v], low[w]);
      } else if (on_stack[w]) {
        low[v] = std::min(low[v], index[w]);
      }
    }
    if (low[v] == index[v]) {
      std::vector<int> comp;
      int w;
      do {
        w = stack.back();
        stack.pop_back();
        on_stack[w] = false;
        comp.push_back(w);
      } while (w != v);
      components.push_back(std::move(comp));
    }
  };
  for (int v = 0; v < n; ++v) {
    if (index[v] < 0) strongconnect(v);
  }
  std::sort(components.begin(), components.end(), [](const auto& a, const auto& b) {
    return *std::min_element(a.begin(), a.end()) < *std::min_element(b.begin(), b.end());
  });
  for (auto& comp : components) {
    const bool self_loop =
        comp.size() == 1 && std::find(succs[comp[0]].begin(), succs[comp[0]].end(), comp[0]) != succs[comp[0]].end();
    if (comp.size() < 2 && !self_loop) continue;
    std::sort(comp.begin(), comp.end());
    std::vector<std::string> ids;
    std::string msg = "dependency cycle through";
    for (int v : comp) {
      ids.push_back(g.nodes[v].id);
      msg += " '" + g.nodes[v].id + "'";
    }
    report.push_back({ViolationKind::kCycle, ids, msg});
  }
  return report;
}

// ---------------------------------------------------------------------------
// Ordering

std::vector<std::string> topological_order(const ModelGraph& g) {
  const auto preds = g.node_predecessors();
  const size_t n = g.nodes.size();
  std::vector<size_t> pending(n);
  std::vector<std::vector<int>> succs(n);
  for (size_t v = 0; v < n; ++v) {
    pending[v] = preds[v].size();
    for (int p : preds[v]) succs[p].push_back(static_cast<int>(v));
  }
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (size_t v = 0; v < n; ++v) {
    if (pending[v] == 0) ready.push(static_cast<int>(v));
  }
  std::vector<std::string> order;
  order.reserve(n);
  while (!ready.empty()) {
    int v = ready.top();
    ready.pop();
    order.push_back(g.nodes[v].id);
    for (int s : succs[v]) {
      if (--pending[s] == 0) ready.push(s);
    }
  }
  if (order.size() != n) {
    std::string msg = "graph '" + g.name + "' contains a cycle through";
    for (size_t v = 0; v < n; ++v) {
      if (pending[v] > 0) msg += " '" + g.nodes[v].id + "'";
    }
    throw SimError(ErrorCode::kCycle, msg);
  }
  return order;
}

// ---------------------------------------------------------------------------
// Shape binding

namespace {

using Dims = std::vector<int64_t>;

std::string dims_to_string(const Dims& d) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
  os << ']';
  return os.str();
}

[[noreturn]] void mismatch(const OpNode& n, const std::string& detail) {
  throw SimError(ErrorCode::kShapeMismatch, "shape mismatch in node '" + n.id + "': " + detail);
}

Dims broadcast(const OpNode& n, const Dims& a, const Dims& b) {
  Dims out(std::max(a.size(), b.size()));
  for (size_t i = 0; i < out.size(); ++i) {
    const int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    const int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1) {
      mismatch(n, "cannot broadcast " + dims_to_string(a) + " with " + dims_to_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

std::vector<int64_t> int_list_attr(const OpNode& n, const char* key, std::vector<int64_t> fallback) {
  if (!n.attrs.contains(key)) return fallback;
  return n.attrs.at(key).get<std::vector<int64_t>>();
}

Dims infer_base(const OpNode& n, const std::vector<Dims>& in) {
  switch (n.op_type) {
    case OpType::kGemm: {
      const Dims& a = in[0];
      const Dims& b = in[1];
      if (a.size() < 2 || b.size() != 2) mismatch(n, "Gemm expects A rank>=2 and B rank 2");
      if (a.back() != b[0]) {
        mismatch(n, "inner dims " + std::to_string(a.back()) + " vs " + std::to_string(b[0]));
      }
      Dims out(a.begin(), a.end() - 1);
      out.push_back(b[1]);
      if (in.size() > 2) broadcast(n, out, in[2]);
      return out;
    }
    case OpType::kMatMul: {
      const Dims& a = in[0];
      const Dims& b = in[1];
      if (a.size() < 2 || b.size() < 2) mismatch(n, "MatMul expects operands of rank>=2");
      if (a.back() != b[b.size() - 2]) {
        mismatch(n, "inner dims " + std::to_string(a.back()) + " vs " + std::to_string(b[b.size() - 2]));
      }
      Dims batch = broadcast(n, Dims(a.begin(), a.end() - 2), Dims(b.begin(), b.end() - 2));
      batch.push_back(a[a.size() - 2]);
      batch.push_back(b.back());
      return batch;
    }
    case OpType::kConv2D: {
      const Dims& x = in[0];
      const Dims& w = in[1];
      if (x.size() != 4 || w.size() != 4) mismatch(n, "Conv2D expects NCHW input and OIHW weight");
      if (x[1] != w[1]) mismatch(n, "input channels " + std::to_string(x[1]) + " vs " + std::to_string(w[1]));
      auto strides = int_list_attr(n, "strides", {1, 1});
      auto pads = int_list_attr(n, "pads", {0, 0, 0, 0});
      auto dil = int_list_attr(n, "dilations", {1, 1});
      if (pads.size() == 2) pads = {pads[0], pads[1], pads[0], pads[1]};
      if (strides.size() != 2 || pads.size() != 4 || dil.size() != 2) mismatch(n, "malformed conv attributes");
      const int64_t eff_h = dil[0] * (w[2] - 1) + 1;
      const int64_t eff_w = dil[1] * (w[3] - 1) + 1;
      const int64_t span_h = x[2] + pads[0] + pads[2] - eff_h;
      const int64_t span_w = x[3] + pads[1] + pads[3] - eff_w;
      if (span_h < 0 || span_w < 0 || strides[0] < 1 || strides[1] < 1) mismatch(n, "kernel larger than padded input");
      return {x[0], w[0], span_h / strides[0] + 1, span_w / strides[1] + 1};
    }
    case OpType::kAdd:
    case OpType::kMul: return broadcast(n, in[0], in[1]);
    case OpType::kGelu:
    case OpType::kRelu:
    case OpType::kSoftmax:
    case OpType::kLayerNorm: return in[0];
  }
  return {};
}

int64_t product(const Dims& d) {
  int64_t p = 1;
  for (int64_t v : d) p *= v;
  return p;
}

}  // namespace

ModelGraph bind_shapes(const ModelGraph& g, const ShapeBindings& bindings) {
  ModelGraph out = g;
  for (auto& t : out.tensors) {
    for (Dim& d : t.shape) {
      if (std::holds_alternative<std::string>(d)) {
        const std::string& sym = std::get<std::string>(d);
        auto it = bindings.find(sym);
        if (it == bindings.end()) {
          throw SimError(ErrorCode::kUnboundSymbol, "unbound symbol '" + sym + "' in tensor '" + t.name + "'");
        }
        d = it->second;
      }
    }
  }

  std::unordered_map<std::string, size_t> index;
  for (size_t i = 0; i < out.tensors.size(); ++i) index[out.tensors[i].name] = i;

  for (const auto& id : topological_order(out)) {
    const OpNode& n = out.nodes[out.node_index(id)];
    const size_t extra = fused_extra_inputs(n);
    if (n.inputs.size() < extra + arity_of(n.op_type).min_inputs || n.outputs.size() != 1) {
      mismatch(n, "operand count does not match operator signature");
    }
    std::vector<Dims> base_in;
    for (size_t i = 0; i + extra < n.inputs.size(); ++i) {
      base_in.push_back(concrete_dims(out.tensor(n.inputs[i]).shape));
    }
    Dims result = infer_base(n, base_in);
    size_t operand = n.inputs.size() - extra;
    for (OpType tag : n.fused_ops) {
      if (is_elementwise_binary(tag)) {
        const Dims other = concrete_dims(out.tensor(n.inputs[operand++]).shape);
        if (broadcast(n, result, other) != result) {
          mismatch(n, std::string("fused ") + op_type_name(tag) + " operand " + dims_to_string(other) +
                          " does not broadcast into " + dims_to_string(result));
        }
      }
    }
    TensorDesc& dst = out.tensors[index.at(n.outputs[0])];
    const Dims declared = concrete_dims(dst.shape);
    if (declared != result) {
      // A declared output may be any row-major view with the same element count.
      if (declared.empty() && dst.shape.empty()) {
        dst.shape.assign(result.begin(), result.end());
      } else if (product(declared) != product(result)) {
        mismatch(n, "declared output " + dims_to_string(declared) + " but computed " + dims_to_string(result));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fusion

ModelGraph fuse_operators(const ModelGraph& g) {
  using P = std::vector<OpType>;
  static const std::vector<P> kComputePatterns = {
      {OpType::kAdd, OpType::kRelu}, {OpType::kAdd, OpType::kGelu}, {OpType::kAdd}, {OpType::kRelu}, {OpType::kGelu}};
  static const std::vector<P> kNormPatterns = {{OpType::kAdd}};

  ModelGraph out = g;
  std::vector<bool> alive(out.nodes.size(), true);
  std::set<std::string> removed_tensors;

  auto consumers_of = [&](const std::string& tensor) {
    std::vector<int> result;
    for (size_t i = 0; i < out.nodes.size(); ++i) {
      if (!alive[i]) continue;
      const auto& ins = out.nodes[i].inputs;
      if (std::find(ins.begin(), ins.end(), tensor) != ins.end()) result.push_back(static_cast<int>(i));
    }
    return result;
  };

  for (const auto& id : topological_order(g)) {
    const int si = out.node_index(id);
    if (!alive[si]) continue;
    OpNode& survivor = out.nodes[si];
    if (!survivor.fused_ops.empty() || survivor.outputs.size() != 1) continue;
    const std::vector<P>* patterns = nullptr;
    if (survivor.op_type == OpType::kGemm || survivor.op_type == OpType::kConv2D) {
      patterns = &kComputePatterns;
    } else if (survivor.op_type == OpType::kLayerNorm) {
      patterns = &kNormPatterns;
    }
    if (!patterns) continue;

    for (const P& pattern : *patterns) {
      std::vector<int> chain;
      std::vector<std::string> extra_inputs;
      std::string tensor = survivor.outputs[0];
      bool ok = true;
      for (OpType want : pattern) {
        const TensorDesc* t = out.find_tensor(tensor);
        auto cons = consumers_of(tensor);
        if (!t || t->kind == TensorKind::kOutput || cons.size() != 1) {
          ok = false;
          break;
        }
        const OpNode& c = out.nodes[cons[0]];
        if (c.op_type != want || !c.fused_ops.empty() || c.outputs.size() != 1) {
          ok = false;
          break;
        }
        if (is_elementwise_binary(want)) {
          if (c.inputs.size() != 2 || (c.inputs[0] == tensor) == (c.inputs[1] == tensor)) {
            ok = false;
            break;
          }
          extra_inputs.push_back(c.inputs[0] == tensor ? c.inputs[1] : c.inputs[0]);
        } else if (c.inputs.size() != 1) {
          ok = false;
          break;
        }
        chain.push_back(cons[0]);
        tensor = c.outputs[0];
      }
      if (!ok) continue;

      for (size_t i = 0; i < chain.size(); ++i) {
        OpNode& absorbed = out.nodes[chain[i]];
        removed_tensors.insert(i == 0 ? survivor.outputs[0] : out.nodes[chain[i - 1]].outputs[0]);
        survivor.fused_ops.push_back(absorbed.op_type);
        alive[chain[i]] = false;
      }
      survivor.inputs.insert(survivor.inputs.end(), extra_inputs.begin(), extra_inputs.end());
      survivor.outputs = {tensor};
      break;
    }
  }

  std::vector<OpNode> kept;
  for (size_t i = 0; i < out.nodes.size(); ++i) {
    if (alive[i]) kept.push_back(std::move(out.nodes[i]));
  }
  out.nodes = std::move(kept);
  std::erase_if(out.tensors, [&](const TensorDesc& t) { return removed_tensors.count(t.name) > 0; });
  return out;
}

}  // namespace npusim
