#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "metabridge/tensor.hpp"

namespace metabridge::diff {

using ValueId = int32_t;
constexpr ValueId kNoValue = -1;

enum class Op : uint8_t {
  kLeaf,
  kConst,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kExp,
  kLog,
  kRecip,
  kSqrt,
  kClampMin,
  kClamp,
  kSoftmaxLast,
  kSumTo,
  kBroadcastTo,
  kConcat,
  kSliceAxis,
  kPadAxis,
  kGatherRows,
  kScatterRows,
  kTransposeLast2,
  kSwapAxes,
  kReshape,
};

struct Node {
  Op op = Op::kConst;
  ValueId a = kNoValue;
  ValueId b = kNoValue;
  Tensor value;
  double c0 = 0.0;  // scale factor / added scalar / clamp low
  double c1 = 0.0;  // clamp high
  int64_t i0 = 0;   // axis
  int64_t i1 = 0;   // start / second axis
  int64_t i2 = 0;   // length / row count
  std::shared_ptr<const std::vector<int32_t>> ids;  // gather/scatter row indices
};

/// Eager define-by-run tape. Every builder computes its value immediately;
/// backward() appends adjoint nodes to the same tape, so gradients are
/// themselves differentiable (gradients through a gradient step work).
class Graph {
 public:
  ValueId leaf(Tensor v);
  ValueId constant(Tensor v);
  ValueId constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  /// Supported operand ranks: 2D x 2D, ND x 2D (applied to the last axis),
  /// and ND x ND with identical leading dims (batched matmul).
  ValueId matmul(ValueId a, ValueId b);
  ValueId add(ValueId a, ValueId b);  // numpy-style broadcasting
  ValueId sub(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);
  ValueId scale(ValueId a, double c);
  ValueId add_scalar(ValueId a, double c);
  ValueId exp(ValueId a);
  ValueId log(ValueId a);
  ValueId recip(ValueId a);
  ValueId sqrt(ValueId a);
  ValueId clamp_min(ValueId a, double lo);
  ValueId clamp(ValueId a, double lo, double hi);
  ValueId relu(ValueId a) { return clamp_min(a, 0.0); }
  ValueId softmax_last(ValueId a);
  ValueId sum_to(ValueId a, Shape target);
  ValueId broadcast_to(ValueId a, Shape target);
  ValueId sum_all(ValueId a) { return sum_to(a, {}); }
  ValueId mean_all(ValueId a);
  ValueId concat(ValueId a, ValueId b, int64_t axis);
  ValueId slice_axis(ValueId a, int64_t axis, int64_t start, int64_t len);
  /// Embed into zeros along `axis`: output dim = total, input placed at start.
  ValueId pad_axis(ValueId a, int64_t axis, int64_t start, int64_t total);
  /// table (V,d), ids with shape id_shape -> (id_shape..., d). Out-of-range ids must
  /// be handled by the caller (the encoder maps them to [UNK] first).
  ValueId gather_rows(ValueId table, std::shared_ptr<const std::vector<int32_t>> ids, Shape id_shape);
  /// (id_shape..., d) -> (rows, d), summing rows that share an id.
  ValueId scatter_rows(ValueId src, std::shared_ptr<const std::vector<int32_t>> ids, int64_t rows);
  ValueId transpose_last2(ValueId a);
  ValueId swap_axes(ValueId a, int64_t ax1, int64_t ax2);
  ValueId reshape(ValueId a, Shape target);

  const Tensor& val(ValueId id) const { return nodes_[static_cast<size_t>(id)].value; }
  size_t num_nodes() const { return nodes_.size(); }

  /// Reverse-mode adjoints of scalar `loss` with respect to each id in `wrt`.
  /// Entry is kNoValue when the loss does not depend on that id.
  std::vector<ValueId> backward(ValueId loss, std::span<const ValueId> wrt);

 private:
  ValueId push(Node n);
  const Node& node(ValueId id) const { return nodes_[static_cast<size_t>(id)]; }
  void check(ValueId id) const;

  std::vector<Node> nodes_;
};

/// Graph-side parameter handles, keyed by parameter name.
using NodeMap = std::map<std::string, ValueId>;

/// Builds a scalar loss from parameter handles.
using LossBuilder = std::function<ValueId(Graph&, const NodeMap&)>;

}  // namespace metabridge::diff
