#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <deque>
#include <vector>

#include "tpsep/diff/tensor.hpp"

namespace tpsep::diff {

enum class OpKind {
  kLeaf,
  kMatMul,
  kConv1d,
  kConvTranspose1d,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMulChannel,
  kAddChannel,
  kRelu,
  kSigmoid,
  kTanh,
  kPRelu,
  kMeanPool,
  kMaxPool,
  kLayerNorm,
  kConcat,
  kSlice,
  kPermute,
  kReshape,
  kSum,
  kMean,
  kBiGru,
  kSegment,
  kOverlapAdd,
  kNegSiSnr,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv1d: return "conv1d";
    case OpKind::kConvTranspose1d: return "conv_transpose1d";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kMulChannel: return "mul_channel";
    case OpKind::kAddChannel: return "add_channel";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kTanh: return "tanh";
    case OpKind::kPRelu: return "prelu";
    case OpKind::kMeanPool: return "mean_pool";
    case OpKind::kMaxPool: return "max_pool";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kPermute: return "permute";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kBiGru: return "bigru";
    case OpKind::kSegment: return "segment";
    case OpKind::kOverlapAdd: return "overlap_add";
    case OpKind::kNegSiSnr: return "neg_si_snr";
  }
  return "unknown";
}

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  std::size_t id() const noexcept { return id_; }
  Graph<T>& graph() const noexcept { return *graph_; }
  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return graph_->requires_grad(id_); }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Backward closure: receives the output gradient and accumulates into the
/// gradient buffers of its inputs. Entries of `grad_in` are null for inputs
/// that do not require a gradient.
template <typename T>
using BackwardFn =
    std::function<void(const Tensor<T>& grad_out,
                       const std::vector<Tensor<T>*>& grad_in)>;

/// Gradients indexed by node id. Nodes not reached by backward read as zeros.
template <typename T>
class GradientMap {
 public:
  GradientMap() = default;
  GradientMap(std::vector<Tensor<T>> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  bool has(const Var<T>& v) const {
    return v.id() < grads_.size() && !grads_[v.id()].empty();
  }

  Tensor<T> at(const Var<T>& v) const {
    if (has(v)) return grads_[v.id()];
    return Tensor<T>(shapes_.at(v.id()));
  }

 private:
  std::vector<Tensor<T>> grads_;
  std::vector<Shape> shapes_;
};

/// Append-only tape of nodes. Nodes are created in topological order, so the
/// graph is acyclic by construction.
template <typename T>
class Graph {
 public:
  struct Node {
    OpKind op = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    bool requires_grad = false;
    BackwardFn<T> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    check_finite(OpKind::kLeaf, value);
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Records an operation node. `make_backward` is only invoked when some
  /// input requires a gradient, so forward-only graphs keep no saved state.
  template <typename MakeBackward>
  Var<T> record(OpKind op, const std::vector<Var<T>>& inputs, Tensor<T> value,
                MakeBackward&& make_backward) {
    check_finite(op, value);
    Node n;
    n.op = op;
    n.value = std::move(value);
    for (const auto& in : inputs) {
      if (&in.graph() != this) {
        throw ShapeError(std::string(op_name(op)) +
                         ": input belongs to a different graph");
      }
      n.inputs.push_back(in.id());
      n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = make_backward();
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const {
    return nodes_.at(id).requires_grad;
  }
  OpKind op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const {
    return nodes_.at(id).inputs;
  }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar loss. Gradients along multiple paths
  /// are summed. Only leaf gradients are kept unless `retain_all` is set.
  GradientMap<T> backward(const Var<T>& loss, bool retain_all = false) const {
    if (&loss.graph() != this) {
      throw ShapeError("backward: loss belongs to a different graph");
    }
    const auto& lv = nodes_.at(loss.id()).value;
    if (lv.numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " +
                       to_string(lv.shape()));
    }
    std::vector<Tensor<T>> grads(nodes_.size());
    std::vector<Shape> shapes(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      shapes[i] = nodes_[i].value.shape();
    }
    if (!nodes_[loss.id()].requires_grad) {
      return GradientMap<T>(std::move(grads), std::move(shapes));
    }
    grads[loss.id()] = Tensor<T>(lv.shape(), T{1});
    std::vector<Tensor<T>*> grad_in;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      const Node& n = nodes_[id];
      if (grads[id].empty() || !n.backward) continue;
      grad_in.assign(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t in = n.inputs[k];
        if (!nodes_[in].requires_grad) continue;
        if (grads[in].empty()) grads[in] = Tensor<T>(nodes_[in].value.shape());
        grad_in[k] = &grads[in];
      }
      n.backward(grads[id], grad_in);
      if (!retain_all && n.op != OpKind::kLeaf) grads[id] = Tensor<T>();
    }
    return GradientMap<T>(std::move(grads), std::move(shapes));
  }

 private:
  static void check_finite(OpKind op, const Tensor<T>& value) {
    if (!value.all_finite()) {
      throw NumericError(std::string(op_name(op)) +
                         ": non-finite value in output of shape " +
                         to_string(value.shape()));
    }
  }

  std::deque<Node> nodes_;  // stable addresses: Var::value() references survive later records
};

}  // namespace tpsep::diff
