#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "langroute/tensor.hpp"

namespace langroute {

using NodeId = int;

// Reverse-mode gradient tape over dense double tensors.
//
// Every op records a node with its forward value; backward(loss) fills one
// gradient tensor per node, in reverse execution order. The record order is a
// topological order by construction, so the sweep is deterministic and two
// identical tapes produce bit-identical gradients.
//
// A tape is single-threaded. Independent tapes may run concurrently as long
// as they do not share mutable tensors.
class Tape {
 public:
  NodeId leaf(Tensor value);

  // c = a @ b. Supports [m,k]x[k,n] and batched [d...,m,k]x[d...,k,n] with
  // identical leading dims.
  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);              // same shape
  NodeId add_bias(NodeId x, NodeId bias);      // x[...,n] + bias[n]
  NodeId mul(NodeId a, NodeId b);              // elementwise, same shape
  NodeId mul_scalar(NodeId x, double c);       // c is a constant, not a node
  NodeId relu(NodeId x);                       // subgradient 0 at 0
  NodeId scale_columns(NodeId x, std::vector<double> factors);  // x[...,n] * f[n], f constant
  NodeId reshape(NodeId x, std::vector<std::int64_t> new_shape);
  NodeId permute(NodeId x, std::vector<int> axes);
  // softmax over the last dim of scores[...,T,T], restricted to col <= row;
  // entries above the diagonal are exactly 0 in the output.
  NodeId causal_masked_softmax(NodeId scores);
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
  NodeId gather_rows(NodeId x, std::vector<std::int64_t> rows);  // x[R,n] -> x[rows,n]
  // Mean negative log-likelihood over rows with include[r] != 0.
  // Gradient per included row is (softmax(logits_r) - onehot(target_r)) / n_included.
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int> targets,
                               std::vector<std::uint8_t> include);
  NodeId sum(NodeId x);  // reduce all elements to a scalar

  void backward(NodeId loss);

  const Tensor& value(NodeId id) const;
  const Tensor& grad(NodeId id) const;  // valid after backward()
  std::size_t num_nodes() const { return nodes_.size(); }
  bool has_grads() const { return !grads_.empty(); }

 private:
  enum class OpKind {
    kLeaf,
    kMatMul,
    kAdd,
    kAddBias,
    kMul,
    kMulScalar,
    kRelu,
    kScaleColumns,
    kReshape,
    kPermute,
    kCausalMaskedSoftmax,
    kLayerNorm,
    kGatherRows,
    kSoftmaxCrossEntropy,
    kSum,
  };

  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<NodeId> inputs;
    Tensor value;
    std::vector<double> fdata;        // scale factors | layer_norm mean+inv_std | softmax probs
    std::vector<std::int64_t> idata;  // permute axes | gather rows
    std::vector<int> targets;         // cross entropy
    std::vector<std::uint8_t> flags;  // cross entropy include mask
    double c = 0.0;                   // mul_scalar constant | layer_norm eps
    std::int64_t aux_n = 0;           // cross entropy included-row count
  };

  NodeId push(Node node, const char* op_name);
  const Node& node(NodeId id) const;
  void check_id(NodeId id) const;
  void backward_node(NodeId id);
  Tensor& grad_buf(NodeId id) { return grads_[static_cast<std::size_t>(id)]; }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Central-difference gradient estimate of a scalar-valued function, one
// coordinate at a time: (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps);

}  // namespace langroute
