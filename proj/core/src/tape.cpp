#include "langroute/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "langroute/errors.hpp"

namespace langroute {

namespace {

// C += A @ B, A is m x k, B is k x n.
void gemm_nn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A @ B^T, A is m x k, B is n x k.
void gemm_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C += A^T @ B, A is k x m, B is k x n.
void gemm_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<std::int64_t> strides_of(const std::vector<std::int64_t>& shape) {
  std::vector<std::int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  }
  return st;
}

}  // namespace

const Tape::Node& Tape::node(NodeId id) const {
  check_id(id);
  return nodes_[static_cast<std::size_t>(id)];
}

void Tape::check_id(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw ContractError("invalid node id " + std::to_string(id));
  }
}

NodeId Tape::push(Node n, const char* op_name) {
  if (!n.value.all_finite()) {
    throw NumericError(std::string(op_name) + " produced a non-finite value");
  }
  nodes_.push_back(std::move(n));
  grads_.clear();  // a new op invalidates any previous backward pass
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Tensor& Tape::value(NodeId id) const { return node(id).value; }

const Tensor& Tape::grad(NodeId id) const {
  check_id(id);
  if (grads_.empty()) throw ContractError("grad() called before backward()");
  return grads_[static_cast<std::size_t>(id)];
}

NodeId Tape::leaf(Tensor value) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.value = std::move(value);
  return push(std::move(n), "leaf");
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.rank() < 2 || bv.rank() < 2 || av.rank() != bv.rank()) {
    throw ContractError("matmul: ranks must match and be >= 2, got " + shape_str(av.shape) +
                        " and " + shape_str(bv.shape));
  }
  const int r = av.rank();
  for (int i = 0; i < r - 2; ++i) {
    if (av.dim(i) != bv.dim(i)) {
      throw ContractError("matmul: batch dims mismatch " + shape_str(av.shape) + " vs " +
                          shape_str(bv.shape));
    }
  }
  const std::int64_t m = av.dim(r - 2), k = av.dim(r - 1);
  const std::int64_t k2 = bv.dim(r - 2), nn = bv.dim(r - 1);
  if (k != k2) {
    throw ContractError("matmul: inner dimensions mismatch " + shape_str(av.shape) + " x " +
                        shape_str(bv.shape));
  }
  std::vector<std::int64_t> out_shape(av.shape.begin(), av.shape.end() - 1);
  out_shape.push_back(nn);
  Node n;
  n.kind = OpKind::kMatMul;
  n.inputs = {a, b};
  n.value = Tensor::zeros(out_shape);
  const std::int64_t batch = (m * k) == 0 ? 0 : av.numel() / (m * k);
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    gemm_nn(av.data.data() + bi * m * k, bv.data.data() + bi * k * nn,
            n.value.data.data() + bi * m * nn, m, k, nn);
  }
  return push(std::move(n), "matmul");
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) {
    throw ContractError("add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  }
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.value = av;
  for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += bv.data[i];
  return push(std::move(n), "add");
}

NodeId Tape::add_bias(NodeId x, NodeId bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  if (xv.rank() < 1 || bv.rank() != 1 || bv.dim(0) != xv.dim(xv.rank() - 1)) {
    throw ContractError("add_bias: bias " + shape_str(bv.shape) + " does not match last dim of " +
                        shape_str(xv.shape));
  }
  Node n;
  n.kind = OpKind::kAddBias;
  n.inputs = {x, bias};
  n.value = xv;
  const std::int64_t cols = bv.dim(0);
  const std::int64_t rows = cols == 0 ? 0 : xv.numel() / cols;
  for (std::int64_t r = 0; r < rows; ++r) {
    double* row = n.value.data.data() + r * cols;
    for (std::int64_t c = 0; c < cols; ++c) row[c] += bv.data[static_cast<std::size_t>(c)];
  }
  return push(std::move(n), "add_bias");
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) {
    throw ContractError("mul: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  }
  Node n;
  n.kind = OpKind::kMul;
  n.inputs = {a, b};
  n.value = av;
  for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= bv.data[i];
  return push(std::move(n), "mul");
}

NodeId Tape::mul_scalar(NodeId x, double c) {
  if (!std::isfinite(c)) throw NumericError("mul_scalar: non-finite constant");
  Node n;
  n.kind = OpKind::kMulScalar;
  n.inputs = {x};
  n.c = c;
  n.value = value(x);
  for (double& v : n.value.data) v *= c;
  return push(std::move(n), "mul_scalar");
}

NodeId Tape::relu(NodeId x) {
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {x};
  n.value = value(x);
  for (double& v : n.value.data) v = v > 0.0 ? v : 0.0;
  return push(std::move(n), "relu");
}

NodeId Tape::scale_columns(NodeId x, std::vector<double> factors) {
  const Tensor& xv = value(x);
  const std::int64_t cols = xv.rank() >= 1 ? xv.dim(xv.rank() - 1) : 0;
  if (static_cast<std::int64_t>(factors.size()) != cols) {
    throw ContractError("scale_columns: factor count " + std::to_string(factors.size()) +
                        " does not match last dim of " + shape_str(xv.shape));
  }
  Node n;
  n.kind = OpKind::kScaleColumns;
  n.inputs = {x};
  n.value = xv;
  const std::int64_t rows = cols == 0 ? 0 : xv.numel() / cols;
  for (std::int64_t r = 0; r < rows; ++r) {
    double* row = n.value.data.data() + r * cols;
    for (std::int64_t c = 0; c < cols; ++c) row[c] *= factors[static_cast<std::size_t>(c)];
  }
  n.fdata = std::move(factors);
  return push(std::move(n), "scale_columns");
}

NodeId Tape::reshape(NodeId x, std::vector<std::int64_t> new_shape) {
  const Tensor& xv = value(x);
  if (shape_numel(new_shape) != xv.numel()) {
    throw ContractError("reshape: cannot reshape " + shape_str(xv.shape) + " to " +
                        shape_str(new_shape));
  }
  Node n;
  n.kind = OpKind::kReshape;
  n.inputs = {x};
  n.value.shape = std::move(new_shape);
  n.value.data = xv.data;
  return push(std::move(n), "reshape");
}

NodeId Tape::permute(NodeId x, std::vector<int> axes) {
  const Tensor& xv = value(x);
  const int r = xv.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw ContractError("permute: axes size must equal rank");
  }
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int a : axes) {
    if (a < 0 || a >= r || seen[static_cast<std::size_t>(a)]) {
      throw ContractError("permute: invalid axes");
    }
    seen[static_cast<std::size_t>(a)] = true;
  }
  std::vector<std::int64_t> out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = xv.dim(axes[static_cast<std::size_t>(i)]);

  Node n;
  n.kind = OpKind::kPermute;
  n.inputs = {x};
  n.value = Tensor::zeros(out_shape);
  const std::vector<std::int64_t> in_st = strides_of(xv.shape);
  const std::vector<std::int64_t> out_st = strides_of(out_shape);
  const std::int64_t total = xv.numel();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  for (std::int64_t flat = 0; flat < total; ++flat) {
    std::int64_t rem = flat;
    std::int64_t src = 0;
    for (int i = 0; i < r; ++i) {
      const std::int64_t q = rem / out_st[static_cast<std::size_t>(i)];
      rem -= q * out_st[static_cast<std::size_t>(i)];
      src += q * in_st[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    }
    n.value.data[static_cast<std::size_t>(flat)] = xv.data[static_cast<std::size_t>(src)];
  }
  n.idata.assign(axes.begin(), axes.end());
  return push(std::move(n), "permute");
}

NodeId Tape::causal_masked_softmax(NodeId scores) {
  const Tensor& sv = value(scores);
  const int r = sv.rank();
  if (r < 2 || sv.dim(r - 1) != sv.dim(r - 2)) {
    throw ContractError("causal_masked_softmax: expected [...,T,T], got " + shape_str(sv.shape));
  }
  const std::int64_t t = sv.dim(r - 1);
  Node n;
  n.kind = OpKind::kCausalMaskedSoftmax;
  n.inputs = {scores};
  n.value = Tensor::zeros(sv.shape);
  const std::int64_t blocks = (t * t) == 0 ? 0 : sv.numel() / (t * t);
  for (std::int64_t b = 0; b < blocks; ++b) {
    for (std::int64_t i = 0; i < t; ++i) {
      const double* in = sv.data.data() + (b * t + i) * t;
      double* out = n.value.data.data() + (b * t + i) * t;
      double mx = in[0];
      for (std::int64_t j = 1; j <= i; ++j) mx = std::max(mx, in[j]);
      double z = 0.0;
      for (std::int64_t j = 0; j <= i; ++j) {
        out[j] = std::exp(in[j] - mx);
        z += out[j];
      }
      for (std::int64_t j = 0; j <= i; ++j) out[j] /= z;
    }
  }
  return push(std::move(n), "causal_masked_softmax");
}

NodeId Tape::layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
  const Tensor& xv = value(x);
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  const std::int64_t cols = xv.rank() >= 1 ? xv.dim(xv.rank() - 1) : 0;
  if (gv.rank() != 1 || bv.rank() != 1 || gv.dim(0) != cols || bv.dim(0) != cols) {
    throw ContractError("layer_norm: gamma/beta must be [n] matching last dim of x");
  }
  Node n;
  n.kind = OpKind::kLayerNorm;
  n.inputs = {x, gamma, beta};
  n.c = eps;
  n.value = Tensor::zeros(xv.shape);
  const std::int64_t rows = cols == 0 ? 0 : xv.numel() / cols;
  n.fdata.assign(static_cast<std::size_t>(2 * rows), 0.0);  // [means..., inv_stds...]
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = xv.data.data() + r * cols;
    double* out = n.value.data.data() + r * cols;
    double mean = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) mean += in[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      const double d = in[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    n.fdata[static_cast<std::size_t>(r)] = mean;
    n.fdata[static_cast<std::size_t>(rows + r)] = inv;
    for (std::int64_t c = 0; c < cols; ++c) {
      out[c] = (in[c] - mean) * inv * gv.data[static_cast<std::size_t>(c)] + bv.data[static_cast<std::size_t>(c)];
    }
  }
  return push(std::move(n), "layer_norm");
}

NodeId Tape::gather_rows(NodeId x, std::vector<std::int64_t> rows) {
  const Tensor& xv = value(x);
  if (xv.rank() != 2) {
    throw ContractError("gather_rows: expected rank-2 input, got " + shape_str(xv.shape));
  }
  const std::int64_t nrows = xv.dim(0), cols = xv.dim(1);
  for (std::int64_t r : rows) {
    if (r < 0 || r >= nrows) throw ContractError("gather_rows: row index out of range");
  }
  Node n;
  n.kind = OpKind::kGatherRows;
  n.inputs = {x};
  n.value = Tensor::zeros({static_cast<std::int64_t>(rows.size()), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* src = xv.data.data() + rows[i] * cols;
    double* dst = n.value.data.data() + static_cast<std::int64_t>(i) * cols;
    std::copy(src, src + cols, dst);
  }
  n.idata = std::move(rows);
  return push(std::move(n), "gather_rows");
}

NodeId Tape::softmax_cross_entropy(NodeId logits, std::vector<int> targets,
                                   std::vector<std::uint8_t> include) {
  const Tensor& lv = value(logits);
  if (lv.rank() != 2) {
    throw ContractError("softmax_cross_entropy: expected [rows,V] logits, got " + shape_str(lv.shape));
  }
  const std::int64_t rows = lv.dim(0), v = lv.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != rows ||
      static_cast<std::int64_t>(include.size()) != rows) {
    throw ContractError("softmax_cross_entropy: targets/include size must match rows");
  }
  std::int64_t n_inc = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (!include[static_cast<std::size_t>(r)]) continue;
    ++n_inc;
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= v) {
      throw ContractError("softmax_cross_entropy: target id " + std::to_string(tgt) +
                          " out of range for vocab " + std::to_string(v));
    }
  }
  if (n_inc == 0) {
    throw DataError("softmax_cross_entropy: degenerate batch, all positions masked out");
  }
  Node n;
  n.kind = OpKind::kSoftmaxCrossEntropy;
  n.inputs = {logits};
  n.aux_n = n_inc;
  n.fdata.assign(static_cast<std::size_t>(rows * v), 0.0);  // softmax probs per row
  double total = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = lv.data.data() + r * v;
    double* probs = n.fdata.data() + r * v;
    double mx = in[0];
    for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < v; ++j) {
      probs[j] = std::exp(in[j] - mx);
      z += probs[j];
    }
    for (std::int64_t j = 0; j < v; ++j) probs[j] /= z;
    if (include[static_cast<std::size_t>(r)]) {
      const double lse = mx + std::log(z);
      total += lse - in[targets[static_cast<std::size_t>(r)]];
    }
  }
  n.value = Tensor::scalar(total / static_cast<double>(n_inc));
  n.targets = std::move(targets);
  n.flags = std::move(include);
  return push(std::move(n), "softmax_cross_entropy");
}

NodeId Tape::sum(NodeId x) {
  Node n;
  n.kind = OpKind::kSum;
  n.inputs = {x};
  double acc = 0.0;
  for (double v : value(x).data) acc += v;
  n.value = Tensor::scalar(acc);
  return push(std::move(n), "sum");
}

void Tape::backward(NodeId loss) {
  check_id(loss);
  if (value(loss).numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(value(loss).shape));
  }
  grads_.assign(nodes_.size(), Tensor{});
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    grads_[i] = Tensor::zeros(nodes_[i].value.shape);
  }
  grads_[static_cast<std::size_t>(loss)].data[0] = 1.0;
  for (NodeId id = loss; id >= 0; --id) backward_node(id);
}

void Tape::backward_node(NodeId id) {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  const Tensor& g = grads_[static_cast<std::size_t>(id)];
  switch (n.kind) {
    case OpKind::kLeaf:
      return;
    case OpKind::kMatMul: {
      const Tensor& av = value(n.inputs[0]);
      const Tensor& bv = value(n.inputs[1]);
      Tensor& da = grad_buf(n.inputs[0]);
      Tensor& db = grad_buf(n.inputs[1]);
      const int r = av.rank();
      const std::int64_t m = av.dim(r - 2), k = av.dim(r - 1), nn = bv.dim(r - 1);
      const std::int64_t batch = (m * k) == 0 ? 0 : av.numel() / (m * k);
      for (std::int64_t bi = 0; bi < batch; ++bi) {
        // dA += g @ B^T ; dB += A^T @ g
        gemm_nt(g.data.data() + bi * m * nn, bv.data.data() + bi * k * nn,
                da.data.data() + bi * m * k, m, nn, k);
        gemm_tn(av.data.data() + bi * m * k, g.data.data() + bi * m * nn,
                db.data.data() + bi * k * nn, k, m, nn);
      }
      return;
    }
    case OpKind::kAdd: {
      Tensor& da = grad_buf(n.inputs[0]);
      Tensor& db = grad_buf(n.inputs[1]);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        da.data[i] += g.data[i];
        db.data[i] += g.data[i];
      }
      return;
    }
    case OpKind::kAddBias: {
      Tensor& dx = grad_buf(n.inputs[0]);
      Tensor& db = grad_buf(n.inputs[1]);
      const std::int64_t cols = db.numel();
      const std::int64_t rows = cols == 0 ? 0 : g.numel() / cols;
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* grow = g.data.data() + r * cols;
        double* dxrow = dx.data.data() + r * cols;
        for (std::int64_t c = 0; c < cols; ++c) {
          dxrow[c] += grow[c];
          db.data[static_cast<std::size_t>(c)] += grow[c];
        }
      }
      return;
    }
    case OpKind::kMul: {
      const Tensor& av = value(n.inputs[0]);
      const Tensor& bv = value(n.inputs[1]);
      Tensor& da = grad_buf(n.inputs[0]);
      Tensor& db = grad_buf(n.inputs[1]);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        da.data[i] += g.data[i] * bv.data[i];
        db.data[i] += g.data[i] * av.data[i];
      }
      return;
    }
    case OpKind::kMulScalar: {
      Tensor& dx = grad_buf(n.inputs[0]);
      for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += n.c * g.data[i];
      return;
    }
    case OpKind::kRelu: {
      Tensor& dx = grad_buf(n.inputs[0]);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        if (n.value.data[i] > 0.0) dx.data[i] += g.data[i];
      }
      return;
    }
    case OpKind::kScaleColumns: {
      Tensor& dx = grad_buf(n.inputs[0]);
      const std::int64_t cols = static_cast<std::int64_t>(n.fdata.size());
      const std::int64_t rows = cols == 0 ? 0 : g.numel() / cols;
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* grow = g.data.data() + r * cols;
        double* dxrow = dx.data.data() + r * cols;
        for (std::int64_t c = 0; c < cols; ++c) dxrow[c] += grow[c] * n.fdata[static_cast<std::size_t>(c)];
      }
      return;
    }
    case OpKind::kReshape: {
      Tensor& dx = grad_buf(n.inputs[0]);
      for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i];
      return;
    }
    case OpKind::kPermute: {
      Tensor& dx = grad_buf(n.inputs[0]);
      const Tensor& xv = value(n.inputs[0]);
      const int r = xv.rank();
      const std::vector<std::int64_t> in_st = strides_of(xv.shape);
      const std::vector<std::int64_t> out_st = strides_of(n.value.shape);
      const std::int64_t total = xv.numel();
      for (std::int64_t flat = 0; flat < total; ++flat) {
        std::int64_t rem = flat;
        std::int64_t src = 0;
        for (int i = 0; i < r; ++i) {
          const std::int64_t q = rem / out_st[static_cast<std::size_t>(i)];
          rem -= q * out_st[static_cast<std::size_t>(i)];
          src += q * in_st[static_cast<std::size_t>(n.idata[static_cast<std::size_t>(i)])];
        }
        dx.data[static_cast<std::size_t>(src)] += g.data[static_cast<std::size_t>(flat)];
      }
      return;
    }
    case OpKind::kCausalMaskedSoftmax: {
      Tensor& dx = grad_buf(n.inputs[0]);
      const int r = n.value.rank();
      const std::int64_t t = n.value.dim(r - 1);
      const std::int64_t blocks = (t * t) == 0 ? 0 : n.value.numel() / (t * t);
      for (std::int64_t b = 0; b < blocks; ++b) {
        for (std::int64_t i = 0; i < t; ++i) {
          const double* y = n.value.data.data() + (b * t + i) * t;
          const double* gy = g.data.data() + (b * t + i) * t;
          double* ds = dx.data.data() + (b * t + i) * t;
          double dot = 0.0;
          for (std::int64_t j = 0; j <= i; ++j) dot += gy[j] * y[j];
          for (std::int64_t j = 0; j <= i; ++j) ds[j] += y[j] * (gy[j] - dot);
        }
      }
      return;
    }
    case OpKind::kLayerNorm: {
      const Tensor& xv = value(n.inputs[0]);
      const Tensor& gv = value(n.inputs[1]);
      Tensor& dx = grad_buf(n.inputs[0]);
      Tensor& dgamma = grad_buf(n.inputs[1]);
      Tensor& dbeta = grad_buf(n.inputs[2]);
      const std::int64_t cols = gv.numel();
      const std::int64_t rows = cols == 0 ? 0 : xv.numel() / cols;
      for (std::int64_t r = 0; r < rows; ++r) {
        const double mean = n.fdata[static_cast<std::size_t>(r)];
        const double inv = n.fdata[static_cast<std::size_t>(rows + r)];
        const double* in = xv.data.data() + r * cols;
        const double* grow = g.data.data() + r * cols;
        double* dxrow = dx.data.data() + r * cols;
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
          const double xhat = (in[c] - mean) * inv;
          const double dxhat = grow[c] * gv.data[static_cast<std::size_t>(c)];
          dgamma.data[static_cast<std::size_t>(c)] += grow[c] * xhat;
          dbeta.data[static_cast<std::size_t>(c)] += grow[c];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        const double inv_n = 1.0 / static_cast<double>(cols);
        for (std::int64_t c = 0; c < cols; ++c) {
          const double xhat = (in[c] - mean) * inv;
          const double dxhat = grow[c] * gv.data[static_cast<std::size_t>(c)];
          dxrow[c] += inv * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
        }
      }
      return;
    }
    case OpKind::kGatherRows: {
      Tensor& dx = grad_buf(n.inputs[0]);
      const std::int64_t cols = n.value.rank() == 2 ? n.value.dim(1) : 0;
      for (std::size_t i = 0; i < n.idata.size(); ++i) {
        const double* grow = g.data.data() + static_cast<std::int64_t>(i) * cols;
        double* dst = dx.data.data() + n.idata[i] * cols;
        for (std::int64_t c = 0; c < cols; ++c) dst[c] += grow[c];
      }
      return;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      Tensor& dl = grad_buf(n.inputs[0]);
      const Tensor& lv = value(n.inputs[0]);
      const std::int64_t rows = lv.dim(0), v = lv.dim(1);
      const double scale = g.data[0] / static_cast<double>(n.aux_n);
      for (std::int64_t r = 0; r < rows; ++r) {
        if (!n.flags[static_cast<std::size_t>(r)]) continue;
        const double* probs = n.fdata.data() + r * v;
        double* drow = dl.data.data() + r * v;
        for (std::int64_t j = 0; j < v; ++j) drow[j] += scale * probs[j];
        drow[n.targets[static_cast<std::size_t>(r)]] -= scale;
      }
      return;
    }
    case OpKind::kSum: {
      Tensor& dx = grad_buf(n.inputs[0]);
      const double gv = g.data[0];
      for (double& d : dx.data) d += gv;
      return;
    }
  }
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_grad: eps must be positive");
  Tensor result = Tensor::zeros(x.shape);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + eps;
    const double fp = f(probe);
    probe.data[i] = orig - eps;
    const double fm = f(probe);
    probe.data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: function returned a non-finite value");
    }
    result.data[i] = (fp - fm) / (2.0 * eps);
  }
  return result;
}

}  // namespace langroute
