#pragma once

// Reverse-mode autodiff on a dynamic tape. Nodes evaluate eagerly on
// creation; backward() walks the tape in reverse accumulating gradients.
// Matrix products route through BLAS (dgemm); everything else is plain
// loops over doubles. Rank-2 tensors are row-major throughout.

#include "copnet/tensor.hpp"

#include <functional>
#include <map>
#include <memory>

extern "C" {
// OpenBLAS row-major dgemm, declared here to avoid dragging in cblas.h.
typedef enum { CopnetCblasRowMajor = 101 } COPNET_CBLAS_ORDER;
typedef enum { CopnetCblasNoTrans = 111, CopnetCblasTrans = 112 } COPNET_CBLAS_TRANSPOSE;
void cblas_dgemm(int order, int transa, int transb,
                 int m, int n, int k,
                 double alpha, const double* a, int lda,
                 const double* b, int ldb,
                 double beta, double* c, int ldc);
void openblas_set_num_threads(int);
}

namespace copnet {

// C = alpha*op(A)*op(B) + beta*C, row-major.
inline void dgemm(bool ta, bool tb, int m, int n, int k, double alpha,
                  const double* a, int lda, const double* b, int ldb,
                  double beta, double* c, int ldc) {
  static const bool once = [] { openblas_set_num_threads(1); return true; }();
  (void)once;
  cblas_dgemm(CopnetCblasRowMajor, ta ? CopnetCblasTrans : CopnetCblasNoTrans,
              tb ? CopnetCblasTrans : CopnetCblasNoTrans,
              m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

class ParamStore; // optim.hpp

enum class Op : uint8_t {
  kConst, kParam,
  kMatmul,      // a{m,k} * b{k,n}
  kLinear,      // x{M,in} * W{out,in}^T (+ b{out})
  kTanh, kSigmoid,
  kAdd, kSub, kMul,              // elementwise, same shape
  kAffine,                       // p0*x + p1 elementwise
  kSquare, kAbs,
  kConcatCols,                   // a{M,p} ++ b{M,q} -> {M,p+q}
  kSliceCols,                    // x{M,n}[:, i0:i0+i1]
  kSelectCols,                   // x{M,n} gathered at fixed column list
  kSoftmaxRows,
  kAttend,                       // fused masked single-query attention
  kGatherCols,                   // y[r] = x[r, idx[r]] -> {M,1}
  kRowSum,                       // {M,n} -> {M,1}
  kSumAll,                       // -> {1}
  kWeightedSum,                  // sum(w .* x) -> {1}, w constant
  kSigmoidCols,                  // sigmoid on a fixed column subset
  kReshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kConst: return "const";         case Op::kParam: return "param";
    case Op::kMatmul: return "matmul";       case Op::kLinear: return "linear";
    case Op::kTanh: return "tanh";           case Op::kSigmoid: return "sigmoid";
    case Op::kAdd: return "add";             case Op::kSub: return "sub";
    case Op::kMul: return "mul";             case Op::kAffine: return "affine";
    case Op::kSquare: return "square";       case Op::kAbs: return "abs";
    case Op::kConcatCols: return "concat_cols"; case Op::kSliceCols: return "slice_cols";
    case Op::kSelectCols: return "select_cols"; case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kAttend: return "attend";       case Op::kGatherCols: return "gather_cols";
    case Op::kRowSum: return "row_sum";      case Op::kSumAll: return "sum_all";
    case Op::kWeightedSum: return "weighted_sum"; case Op::kSigmoidCols: return "sigmoid_cols";
    case Op::kReshape: return "reshape";
  }
  return "?";
}

class Graph {
 public:
  using Id = int32_t;

  struct Node {
    Op op;
    Id a = -1, b = -1, c = -1;
    Tensor val;
    Tensor grad;            // allocated on first accumulation
    Tensor aux;             // op-specific cache (attend: attention weights)
    double p0 = 0, p1 = 0;  // affine coefficients
    int i0 = 0, i1 = 0;     // slice offset/len; attend: group size / total slots
    std::shared_ptr<const std::vector<int>> cols;      // select/gather indices
    std::shared_ptr<const std::vector<uint8_t>> mask;  // attend mask / column mask
    std::shared_ptr<const Tensor> w;                   // weighted_sum weights
    std::string pname;                                 // param name
    bool needs_grad = false;
  };

  Graph() { nodes_.reserve(256); }

  // Binds parameters by name; definition lives with ParamStore in optim.hpp.
  Id param(const std::string& name, const Tensor& value, bool trainable) {
    auto it = param_ids_.find(name);
    if (it != param_ids_.end()) return it->second;
    Node n;
    n.op = Op::kParam;
    n.val = value;
    n.pname = name;
    n.needs_grad = trainable;
    Id id = push(std::move(n));
    param_ids_.emplace(name, id);
    return id;
  }

  Id constant(Tensor v) {
    Node n;
    n.op = Op::kConst;
    n.val = std::move(v);
    return push(std::move(n));
  }

  Id matmul(Id a, Id b) {
    const Tensor& A = val(a); const Tensor& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
      throw std::invalid_argument(std::string("matmul: incompatible shapes ") + A.str() + " x " + B.str());
    Node n = binary(Op::kMatmul, a, b, Tensor({A.shape[0], B.shape[1]}));
    dgemm(false, false, A.rows(), B.cols(), A.cols(), 1.0,
          A.data.data(), A.cols(), B.data.data(), B.cols(), 0.0,
          n.val.data.data(), B.cols());
    return push(std::move(n));
  }

  // y = x * W^T + b; W is {out,in}, x is {M,in}, b is {out} or -1 for none.
  Id linear(Id x, Id wt, Id bias = -1) {
    const Tensor& X = val(x); const Tensor& W = val(wt);
    if (W.rank() != 2 || X.cols() != W.shape[1])
      throw std::invalid_argument(std::string("linear: input ") + X.str() + " vs weight " + W.str());
    int M = X.rows(), out = W.shape[0], in = W.shape[1];
    Node n = binary(Op::kLinear, x, wt, Tensor({M, out}));
    n.c = bias;
    if (bias >= 0) {
      const Tensor& B = val(bias);
      if (B.numel() != out)
        throw std::invalid_argument(std::string("linear: bias ") + B.str() + " vs weight " + W.str());
      n.needs_grad = n.needs_grad || nodes_[bias].needs_grad;
      for (int r = 0; r < M; ++r)
        std::memcpy(&n.val.data[static_cast<size_t>(r) * out], B.data.data(), sizeof(double) * out);
      dgemm(false, true, M, out, in, 1.0, X.data.data(), in, W.data.data(), in, 1.0,
            n.val.data.data(), out);
    } else {
      dgemm(false, true, M, out, in, 1.0, X.data.data(), in, W.data.data(), in, 0.0,
            n.val.data.data(), out);
    }
    return push(std::move(n));
  }

  Id tanh_act(Id x) {
    // tanh saturates to exactly +-1.0 in double arithmetic around |x|>19;
    // clamp to the adjacent representable value to keep the open-interval
    // guarantee the rest of the stack relies on.
    static const double bound = std::nextafter(1.0, 0.0);
    Node n = unary(Op::kTanh, x);
    for (auto& v : n.val.data) v = std::clamp(std::tanh(v), -bound, bound);
    return push(std::move(n));
  }

  Id sigmoid(Id x) {
    Node n = unary(Op::kSigmoid, x);
    for (auto& v : n.val.data) v = 1.0 / (1.0 + std::exp(-v));
    return push(std::move(n));
  }

  Id add(Id a, Id b) { return ew(Op::kAdd, a, b); }
  Id sub(Id a, Id b) { return ew(Op::kSub, a, b); }
  Id mul(Id a, Id b) { return ew(Op::kMul, a, b); }

  Id affine(Id x, double scale, double shift) {
    Node n = unary(Op::kAffine, x);
    n.p0 = scale; n.p1 = shift;
    for (auto& v : n.val.data) v = scale * v + shift;
    return push(std::move(n));
  }

  Id square(Id x) {
    Node n = unary(Op::kSquare, x);
    for (auto& v : n.val.data) v = v * v;
    return push(std::move(n));
  }

  Id abs_act(Id x) {
    Node n = unary(Op::kAbs, x);
    for (auto& v : n.val.data) v = std::fabs(v);
    return push(std::move(n));
  }

  Id concat_cols(Id a, Id b) {
    const Tensor& A = val(a); const Tensor& B = val(b);
    if (A.rows() != B.rows())
      throw std::invalid_argument(std::string("concat_cols: row mismatch ") + A.str() + " vs " + B.str());
    int M = A.rows(), p = A.cols(), q = B.cols();
    Node n = binary(Op::kConcatCols, a, b, Tensor({M, p + q}));
    for (int r = 0; r < M; ++r) {
      std::memcpy(&n.val.at(r, 0), &A.data[static_cast<size_t>(r) * p], sizeof(double) * p);
      std::memcpy(&n.val.at(r, p), &B.data[static_cast<size_t>(r) * q], sizeof(double) * q);
    }
    return push(std::move(n));
  }

  Id concat_cols(const std::vector<Id>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input list");
    Id acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = concat_cols(acc, xs[i]);
    return acc;
  }

  Id slice_cols(Id x, int off, int len) {
    const Tensor& X = val(x);
    if (off < 0 || len <= 0 || off + len > X.cols())
      throw std::invalid_argument("slice_cols: window [" + std::to_string(off) + "," +
                                  std::to_string(off + len) + ") outside " + X.str());
    Node n = unary(Op::kSliceCols, x);
    n.i0 = off; n.i1 = len;
    n.val = Tensor({X.rows(), len});
    for (int r = 0; r < X.rows(); ++r)
      std::memcpy(&n.val.at(r, 0), &X.data[static_cast<size_t>(r) * X.cols() + off],
                  sizeof(double) * len);
    return push(std::move(n));
  }

  Id select_cols(Id x, std::shared_ptr<const std::vector<int>> cols) {
    const Tensor& X = val(x);
    for (int c : *cols)
      if (c < 0 || c >= X.cols())
        throw std::invalid_argument("select_cols: column " + std::to_string(c) + " outside " + X.str());
    Node n = unary(Op::kSelectCols, x);
    n.cols = cols;
    n.val = Tensor({X.rows(), static_cast<int>(cols->size())});
    for (int r = 0; r < X.rows(); ++r)
      for (size_t j = 0; j < cols->size(); ++j)
        n.val.at(r, static_cast<int>(j)) = X.at(r, (*cols)[j]);
    return push(std::move(n));
  }

  Id softmax_rows(Id x) {
    Node n = unary(Op::kSoftmaxRows, x);
    int M = n.val.rows(), N = n.val.cols();
    for (int r = 0; r < M; ++r) {
      double* row = &n.val.data[static_cast<size_t>(r) * N];
      double mx = row[0];
      for (int j = 1; j < N; ++j) mx = std::max(mx, row[j]);
      double s = 0;
      for (int j = 0; j < N; ++j) { row[j] = std::exp(row[j] - mx); s += row[j]; }
      for (int j = 0; j < N; ++j) row[j] /= s;
    }
    return push(std::move(n));
  }

  // Masked single-query attention, fused. Rows of q are receivers grouped in
  // blocks of `group` (senders of receiver r live at rows (r/group)*group ..
  // +group-1 of k and v). Each receiver attends over `slots` >= group
  // positions: position j < group carries sender j (forced to logit 0 and
  // zero value when mask[r*group+j] is false — exactly a zero message);
  // positions group..slots-1 are permanent zero-message padding. Softmax runs
  // over all `slots` positions. Scaling is 1/sqrt(head_dim).
  Id attend(Id q, Id k, Id v, std::shared_ptr<const std::vector<uint8_t>> mask,
            int group, int slots) {
    const Tensor& Q = val(q); const Tensor& K = val(k); const Tensor& V = val(v);
    if (!Q.same_shape(K) || !Q.same_shape(V))
      throw std::invalid_argument(std::string("attend: shape mismatch ") + Q.str() + "/" + K.str() + "/" + V.str());
    int M = Q.rows(), D = Q.cols();
    if (group <= 0 || M % group != 0 || slots < group)
      throw std::invalid_argument("attend: bad group " + std::to_string(group) + " for " + Q.str());
    if (static_cast<int>(mask->size()) != M * group)
      throw std::invalid_argument("attend: mask size " + std::to_string(mask->size()) +
                                  " != rows*group " + std::to_string(M * group));
    Node n;
    n.op = Op::kAttend;
    n.a = q; n.b = k; n.c = v;
    n.needs_grad = nodes_[q].needs_grad || nodes_[k].needs_grad || nodes_[v].needs_grad;
    n.mask = std::move(mask);
    n.i0 = group; n.i1 = slots;
    n.val = Tensor({M, D});
    n.aux = Tensor({M, slots}); // attention weights, kept for backward
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
    std::vector<double> logits(static_cast<size_t>(slots));
    for (int r = 0; r < M; ++r) {
      int base = (r / group) * group;
      const uint8_t* mrow = n.mask->data() + static_cast<size_t>(r) * group;
      for (int j = 0; j < slots; ++j) {
        if (j < group && mrow[j]) {
          double dot = 0;
          const double* qr = &Q.data[static_cast<size_t>(r) * D];
          const double* kj = &K.data[static_cast<size_t>(base + j) * D];
          for (int d = 0; d < D; ++d) dot += qr[d] * kj[d];
          logits[j] = dot * inv_sqrt_d;
        } else {
          logits[j] = 0.0; // zero message: zero key -> zero logit
        }
      }
      double mx = logits[0];
      for (int j = 1; j < slots; ++j) mx = std::max(mx, logits[j]);
      double s = 0;
      for (int j = 0; j < slots; ++j) { logits[j] = std::exp(logits[j] - mx); s += logits[j]; }
      double* arow = &n.aux.data[static_cast<size_t>(r) * slots];
      for (int j = 0; j < slots; ++j) arow[j] = logits[j] / s;
      double* orow = &n.val.data[static_cast<size_t>(r) * D];
      std::fill(orow, orow + D, 0.0);
      for (int j = 0; j < group; ++j) {
        if (!mrow[j]) continue; // zero value contributes nothing
        const double* vj = &V.data[static_cast<size_t>(base + j) * D];
        double a = arow[j];
        for (int d = 0; d < D; ++d) orow[d] += a * vj[d];
      }
    }
    return push(std::move(n));
  }

  Id gather_cols(Id x, std::shared_ptr<const std::vector<int>> idx) {
    const Tensor& X = val(x);
    if (static_cast<int>(idx->size()) != X.rows())
      throw std::invalid_argument("gather_cols: " + std::to_string(idx->size()) +
                                  " indices for " + X.str());
    for (int c : *idx)
      if (c < 0 || c >= X.cols())
        throw std::invalid_argument("gather_cols: index " + std::to_string(c) + " outside " + X.str());
    Node n = unary(Op::kGatherCols, x);
    n.cols = idx;
    n.val = Tensor({X.rows(), 1});
    for (int r = 0; r < X.rows(); ++r) n.val[r] = X.at(r, (*idx)[r]);
    return push(std::move(n));
  }

  Id row_sum(Id x) {
    const Tensor& X = val(x);
    Node n = unary(Op::kRowSum, x);
    n.val = Tensor({X.rows(), 1});
    for (int r = 0; r < X.rows(); ++r) {
      double s = 0;
      for (int c = 0; c < X.cols(); ++c) s += X.at(r, c);
      n.val[r] = s;
    }
    return push(std::move(n));
  }

  Id sum_all(Id x) {
    Node n = unary(Op::kSumAll, x);
    double s = 0;
    for (double v : val(x).data) s += v;
    n.val = Tensor({1}, {s});
    return push(std::move(n));
  }

  // sum(w .* x) with constant weights; the masked-mean workhorse.
  Id weighted_sum(Id x, std::shared_ptr<const Tensor> w) {
    const Tensor& X = val(x);
    if (!X.same_shape(*w))
      throw std::invalid_argument(std::string("weighted_sum: ") + X.str() + " vs weights " + w->str());
    Node n = unary(Op::kWeightedSum, x);
    n.w = std::move(w);
    double s = 0;
    for (size_t i = 0; i < X.data.size(); ++i) s += X.data[i] * n.w->data[i];
    n.val = Tensor({1}, {s});
    return push(std::move(n));
  }

  // Sigmoid on columns flagged in mask (size = cols), identity elsewhere.
  Id sigmoid_cols(Id x, std::shared_ptr<const std::vector<uint8_t>> colmask) {
    const Tensor& X = val(x);
    if (static_cast<int>(colmask->size()) != X.cols())
      throw std::invalid_argument("sigmoid_cols: mask size " + std::to_string(colmask->size()) +
                                  " vs " + X.str());
    Node n = unary(Op::kSigmoidCols, x);
    n.mask = colmask;
    for (int r = 0; r < X.rows(); ++r)
      for (int c = 0; c < X.cols(); ++c)
        if ((*n.mask)[c]) n.val.at(r, c) = 1.0 / (1.0 + std::exp(-X.at(r, c)));
    return push(std::move(n));
  }

  Id reshape(Id x, std::vector<int> shape) {
    const Tensor& X = val(x);
    if (Tensor::numel_of(shape) != X.numel())
      throw std::invalid_argument(std::string("reshape: ") + X.str() + " to " + Tensor::shape_str(shape));
    Node n = unary(Op::kReshape, x);
    n.val.shape = std::move(shape);
    return push(std::move(n));
  }

  const Tensor& val(Id id) const { return nodes_[check(id)].val; }
  // op-specific cache; for attend nodes this holds the attention weights {rows, slots}
  const Tensor& aux(Id id) const { return nodes_[check(id)].aux; }
  const Tensor& grad(Id id) const { return nodes_[check(id)].grad; }
  bool has_grad(Id id) const { return nodes_[check(id)].grad.numel() > 0; }
  size_t size() const { return nodes_.size(); }

  // Accumulates d(loss)/d(node) for every node the scalar loss depends on.
  void backward(Id loss) {
    Node& ln = nodes_[check(loss)];
    if (ln.val.numel() != 1)
      throw std::invalid_argument(std::string("backward: loss must be scalar, got ") + ln.val.str());
    ensure_grad(ln);
    ln.grad.data[0] += 1.0;
    for (Id i = loss; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.numel() == 0) continue;
      step_backward(n);
    }
  }

  // Gradients of all named parameters touched by this graph (zero tensors
  // for parameters that never received gradient).
  std::map<std::string, Tensor> param_grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : param_ids_) {
      const Node& n = nodes_[id];
      out.emplace(name, n.grad.numel() ? n.grad : zeros_like(n.val));
    }
    return out;
  }

  void clear() {
    nodes_.clear();
    param_ids_.clear();
  }

 private:
  std::vector<Node> nodes_;
  std::map<std::string, Id> param_ids_;

  Id check(Id id) const {
    if (id < 0 || id >= static_cast<Id>(nodes_.size()))
      throw std::out_of_range("graph: bad node id " + std::to_string(id));
    return id;
  }

  Node unary(Op op, Id x) {
    Node n;
    n.op = op;
    n.a = check(x);
    n.val = nodes_[x].val;
    n.needs_grad = nodes_[x].needs_grad;
    return n;
  }

  Node binary(Op op, Id a, Id b, Tensor out) {
    Node n;
    n.op = op;
    n.a = check(a); n.b = check(b);
    n.val = std::move(out);
    n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
    return n;
  }

  Id ew(Op op, Id a, Id b) {
    const Tensor& A = val(a); const Tensor& B = val(b);
    if (!A.same_shape(B))
      throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch " + A.str() + " vs " + B.str());
    Node n = binary(op, a, b, Tensor(A.shape));
    for (size_t i = 0; i < A.data.size(); ++i) {
      switch (op) {
        case Op::kAdd: n.val.data[i] = A.data[i] + B.data[i]; break;
        case Op::kSub: n.val.data[i] = A.data[i] - B.data[i]; break;
        case Op::kMul: n.val.data[i] = A.data[i] * B.data[i]; break;
        default: throw std::logic_error("ew: bad op");
      }
    }
    return push(std::move(n));
  }

  Id push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  static void ensure_grad(Node& n) {
    if (n.grad.numel() == 0) n.grad = zeros_like(n.val);
  }

  // Adds into input grad only when that input participates in training.
  Tensor* gin(Id id) {
    if (id < 0) return nullptr;
    Node& n = nodes_[id];
    if (!n.needs_grad) return nullptr;
    ensure_grad(n);
    return &n.grad;
  }

  void step_backward(Node& n) {
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::kConst:
      case Op::kParam:
        return;
      case Op::kMatmul: {
        const Tensor& A = nodes_[n.a].val; const Tensor& B = nodes_[n.b].val;
        if (Tensor* da = gin(n.a))
          dgemm(false, true, A.rows(), A.cols(), B.cols(), 1.0,
                g.data.data(), B.cols(), B.data.data(), B.cols(), 1.0,
                da->data.data(), A.cols());
        if (Tensor* db = gin(n.b))
          dgemm(true, false, A.cols(), B.cols(), A.rows(), 1.0,
                A.data.data(), A.cols(), g.data.data(), B.cols(), 1.0,
                db->data.data(), B.cols());
        return;
      }
      case Op::kLinear: {
        const Tensor& X = nodes_[n.a].val; const Tensor& W = nodes_[n.b].val;
        int M = X.rows(), in = X.cols(), out = W.shape[0];
        if (Tensor* dx = gin(n.a))
          dgemm(false, false, M, in, out, 1.0, g.data.data(), out,
                W.data.data(), in, 1.0, dx->data.data(), in);
        if (Tensor* dw = gin(n.b))
          dgemm(true, false, out, in, M, 1.0, g.data.data(), out,
                X.data.data(), in, 1.0, dw->data.data(), in);
        if (Tensor* db = gin(n.c))
          for (int r = 0; r < M; ++r)
            for (int c = 0; c < out; ++c) db->data[c] += g.at(r, c);
        return;
      }
      case Op::kTanh: {
        if (Tensor* dx = gin(n.a))
          for (size_t i = 0; i < g.data.size(); ++i)
            dx->data[i] += g.data[i] * (1.0 - n.val.data[i] * n.val.data[i]);
        return;
      }
      case Op::kSigmoid: {
        if (Tensor* dx = gin(n.a))
          for (size_t i = 0; i < g.data.size(); ++i)
            dx->data[i] += g.data[i] * n.val.data[i] * (1.0 - n.val.data[i]);
        return;
      }
      case Op::kAdd: {
        if (Tensor* da = gin(n.a))
          for (size_t i = 0; i < g.data.size(); ++i) da->data[i] += g.data[i];
        if (Tensor* db = gin(n.b))
          for (size_t i = 0; i < g.data.size(); ++i) db->data[i] += g.data[i];
        return;
      }
      case Op::kSub: {
        if (Tensor* da = gin(n.a))
          for (size_t i = 0; i < g.data.size(); ++i) da->data[i] += g.data[i];
        if (Tensor* db = gin(n.b))
          for (size_t i = 0; i < g.data.size(); ++i) db->data[i] -= g.data[i];
        return;
      }
      case Op::kMul: {
        const Tensor& A = nodes_[n.a].val; const Tensor& B = nodes_[n.b].val;
        if (Tensor* da = gin(n.a))
          for (size_t i = 0; i < g.data.size(); ++i) da->data[i] += g.data[i] * B.data[i];
        if (Tensor* db = gin(n.b))
          for (size_t i = 0; i < g.data.size(); ++i) db->data[i] += g.data[i] * A.data[i];
        return;
      }
      case Op::kAffine: {
        if (Tensor* dx = gin(n.a))
          for (size_t i = 0; i < g.data.size(); ++i) dx->data[i] += g.data[i] * n.p0;
        return;
      }
      case Op::kSquare: {
        const Tensor& X = nodes_[n.a].val;
        if (Tensor* dx = gin(n.a))
          for (size_t i = 0; i < g.data.size(); ++i)
            dx->data[i] += g.data[i] * 2.0 * X.data[i];
        return;
      }
      case Op::kAbs: {
        const Tensor& X = nodes_[n.a].val;
        if (Tensor* dx = gin(n.a))
          for (size_t i = 0; i < g.data.size(); ++i) {
            double s = X.data[i] > 0 ? 1.0 : (X.data[i] < 0 ? -1.0 : 0.0);
            dx->data[i] += g.data[i] * s;
          }
        return;
      }
      case Op::kConcatCols: {
        const Tensor& A = nodes_[n.a].val; const Tensor& B = nodes_[n.b].val;
        int M = A.rows(), p = A.cols(), q = B.cols();
        if (Tensor* da = gin(n.a))
          for (int r = 0; r < M; ++r)
            for (int c = 0; c < p; ++c) da->at(r, c) += g.at(r, c);
        if (Tensor* db = gin(n.b))
          for (int r = 0; r < M; ++r)
            for (int c = 0; c < q; ++c) db->at(r, c) += g.at(r, p + c);
        return;
      }
      case Op::kSliceCols: {
        if (Tensor* dx = gin(n.a))
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < n.i1; ++c) dx->at(r, n.i0 + c) += g.at(r, c);
        return;
      }
      case Op::kSelectCols: {
        if (Tensor* dx = gin(n.a))
          for (int r = 0; r < g.rows(); ++r)
            for (size_t j = 0; j < n.cols->size(); ++j)
              dx->at(r, (*n.cols)[j]) += g.at(r, static_cast<int>(j));
        return;
      }
      case Op::kSoftmaxRows: {
        if (Tensor* dx = gin(n.a)) {
          int M = g.rows(), N = g.cols();
          for (int r = 0; r < M; ++r) {
            const double* y = &n.val.data[static_cast<size_t>(r) * N];
            const double* dy = &g.data[static_cast<size_t>(r) * N];
            double dot = 0;
            for (int j = 0; j < N; ++j) dot += y[j] * dy[j];
            double* out = &dx->data[static_cast<size_t>(r) * N];
            for (int j = 0; j < N; ++j) out[j] += y[j] * (dy[j] - dot);
          }
        }
        return;
      }
      case Op::kAttend: {
        const Tensor& Q = nodes_[n.a].val;
        const Tensor& K = nodes_[n.b].val;
        const Tensor& V = nodes_[n.c].val;
        Tensor* dq = gin(n.a);
        Tensor* dk = gin(n.b);
        Tensor* dv = gin(n.c);
        int M = Q.rows(), D = Q.cols(), group = n.i0, slots = n.i1;
        double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
        std::vector<double> dalpha(static_cast<size_t>(slots));
        for (int r = 0; r < M; ++r) {
          int base = (r / group) * group;
          const uint8_t* mrow = n.mask->data() + static_cast<size_t>(r) * group;
          const double* arow = &n.aux.data[static_cast<size_t>(r) * slots];
          const double* grow = &g.data[static_cast<size_t>(r) * D];
          const double* qr = &Q.data[static_cast<size_t>(r) * D];
          // d(out)/d(alpha_j) = v_j (zero for masked/padded slots)
          double dot = 0;
          for (int j = 0; j < slots; ++j) {
            double da = 0;
            if (j < group && mrow[j]) {
              const double* vj = &V.data[static_cast<size_t>(base + j) * D];
              for (int d = 0; d < D; ++d) da += grow[d] * vj[d];
            }
            dalpha[j] = da;
            dot += arow[j] * da;
          }
          for (int j = 0; j < group; ++j) {
            if (!mrow[j]) continue; // constant-zero logit and value
            double dlogit = arow[j] * (dalpha[j] - dot);
            const double* kj = &K.data[static_cast<size_t>(base + j) * D];
            if (dq) {
              double* dqr = &dq->data[static_cast<size_t>(r) * D];
              for (int d = 0; d < D; ++d) dqr[d] += dlogit * kj[d] * inv_sqrt_d;
            }
            if (dk) {
              double* dkj = &dk->data[static_cast<size_t>(base + j) * D];
              for (int d = 0; d < D; ++d) dkj[d] += dlogit * qr[d] * inv_sqrt_d;
            }
            if (dv) {
              double* dvj = &dv->data[static_cast<size_t>(base + j) * D];
              for (int d = 0; d < D; ++d) dvj[d] += arow[j] * grow[d];
            }
          }
        }
        return;
      }
      case Op::kGatherCols: {
        if (Tensor* dx = gin(n.a))
          for (int r = 0; r < g.rows(); ++r) dx->at(r, (*n.cols)[r]) += g[r];
        return;
      }
      case Op::kRowSum: {
        if (Tensor* dx = gin(n.a))
          for (int r = 0; r < dx->rows(); ++r)
            for (int c = 0; c < dx->cols(); ++c) dx->at(r, c) += g[r];
        return;
      }
      case Op::kSumAll: {
        if (Tensor* dx = gin(n.a))
          for (auto& v : dx->data) v += g.data[0];
        return;
      }
      case Op::kWeightedSum: {
        if (Tensor* dx = gin(n.a))
          for (size_t i = 0; i < dx->data.size(); ++i)
            dx->data[i] += g.data[0] * n.w->data[i];
        return;
      }
      case Op::kSigmoidCols: {
        if (Tensor* dx = gin(n.a)) {
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) {
              double d = (*n.mask)[c] ? n.val.at(r, c) * (1.0 - n.val.at(r, c)) : 1.0;
              dx->at(r, c) += g.at(r, c) * d;
            }
        }
        return;
      }
      case Op::kReshape: {
        if (Tensor* dx = gin(n.a))
          for (size_t i = 0; i < g.data.size(); ++i) dx->data[i] += g.data[i];
        return;
      }
    }
  }
};

// Standard GRU cell as a graph composite: reset/update gates, candidate,
// h' = u*h + (1-u)*c. Parameter tensors: w* {H,X}, u* {H,H}, b* {H}.
struct GruParams {
  Graph::Id wr, ur, br, wu, uu, bu, wc, uc, bc;
};

inline Graph::Id gru_cell(Graph& g, Graph::Id x, Graph::Id h, const GruParams& p) {
  const Tensor& X = g.val(x);
  const Tensor& H = g.val(h);
  const Tensor& Wr = g.val(p.wr);
  if (X.cols() != Wr.shape[1] || H.cols() != g.val(p.ur).shape[1])
    throw std::invalid_argument(std::string("gru_cell: x ") + X.str() + " h " + H.str() +
                                " vs params " + Wr.str());
  Graph::Id r = g.sigmoid(g.add(g.linear(x, p.wr, p.br), g.linear(h, p.ur)));
  Graph::Id u = g.sigmoid(g.add(g.linear(x, p.wu, p.bu), g.linear(h, p.uu)));
  Graph::Id c = g.tanh_act(g.add(g.linear(x, p.wc, p.bc), g.linear(g.mul(r, h), p.uc)));
  return g.add(g.mul(u, h), g.mul(g.affine(u, -1.0, 1.0), c));
}

} // namespace copnet
