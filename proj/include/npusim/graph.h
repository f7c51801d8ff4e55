#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "json.hpp"
#include "npusim/common.h"

namespace npusim {

enum class DType { kInt8, kFp16, kFp32 };

uint32_t dtype_width(DType dtype);
const char* dtype_name(DType dtype);
DType parse_dtype(const std::string& name);

// A dimension is either concrete or a symbolic name bound later.
using Dim = std::variant<int64_t, std::string>;
using Shape = std::vector<Dim>;

bool is_concrete(const Shape& shape);
// Requires a concrete shape.
std::vector<int64_t> concrete_dims(const Shape& shape);
int64_t num_elements(const Shape& shape);
std::string shape_to_string(const Shape& shape);

enum class TensorKind { kInput, kOutput, kWeight, kActivation };

const char* tensor_kind_name(TensorKind kind);

struct TensorDesc {
  std::string name;
  DType dtype = DType::kFp16;
  Shape shape;
  TensorKind kind = TensorKind::kActivation;

  uint64_t byte_size() const;

  bool operator==(const TensorDesc&) const = default;
};

enum class OpType { kGemm, kMatMul, kConv2D, kAdd, kMul, kGelu, kRelu, kSoftmax, kLayerNorm };

const char* op_type_name(OpType op);
std::optional<OpType> parse_op_type(const std::string& name);
bool is_elementwise_binary(OpType op);
bool is_normalization(OpType op);

struct OpNode {
  std::string id;
  OpType op_type = OpType::kGemm;
  nlohmann::json attrs = nlohmann::json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<OpType> fused_ops;

  bool operator==(const OpNode&) const = default;
};

class ModelGraph {
 public:
  std::string name;
  std::vector<TensorDesc> tensors;  // declaration order
  std::vector<OpNode> nodes;        // file order

  const TensorDesc* find_tensor(const std::string& tensor_name) const;
  TensorDesc* find_tensor(const std::string& tensor_name);
  const TensorDesc& tensor(const std::string& tensor_name) const;
  int node_index(const std::string& node_id) const;

  // Producer node index per tensor name (first producer when several exist).
  std::unordered_map<std::string, int> producers() const;
  // Consumer node indices per tensor name, in node order.
  std::unordered_map<std::string, std::vector<int>> consumers() const;
  // Node-level predecessor lists (deduplicated, ascending).
  std::vector<std::vector<int>> node_predecessors() const;

  std::vector<std::string> graph_inputs() const;
  std::vector<std::string> graph_outputs() const;

  bool operator==(const ModelGraph& other) const {
    return name == other.name && tensors == other.tensors && nodes == other.nodes;
  }
};

ModelGraph parse_graph(const std::string& text);
ModelGraph load_graph_file(const std::string& path);
nlohmann::json graph_to_json(const ModelGraph& g);
std::string serialize_graph(const ModelGraph& g);

enum class ViolationKind { kCycle, kArity, kMultiProducer, kNoProducer, kIllegalFusion, kUnknownTensor };

const char* violation_kind_name(ViolationKind kind);

struct Violation {
  ViolationKind kind;
  std::vector<std::string> nodes;  // node ids involved
  std::string message;
};

using ValidationReport = std::vector<Violation>;

ValidationReport validate_graph(const ModelGraph& g);

using ShapeBindings = std::map<std::string, int64_t>;

// Returns a fully concrete copy with every derived shape recomputed.
ModelGraph bind_shapes(const ModelGraph& g, const ShapeBindings& bindings);

ModelGraph fuse_operators(const ModelGraph& g);

std::vector<std::string> topological_order(const ModelGraph& g);

}  // namespace npusim
