#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "attnlens/common.hpp"
#include "attnlens/tensor.hpp"

namespace attnlens {

// Handle to a node on a Tape. Valid only for the tape that created it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class OpKind : std::uint8_t {
  Input,
  Constant,
  MatMul,
  Add,
  AddRow,       // matrix + row-broadcast bias
  Mul,          // elementwise
  Scale,        // * compile-time constant
  Transpose,
  SliceCols,
  ConcatCols,
  GatherRows,   // embedding lookup
  SoftmaxRows,  // optional 0/1 mask as second input
  LayerNormRows,
  Relu,
  Exp,
  Sum,             // -> scalar
  Reshape,
  LogSoftmaxPick,  // fused log-softmax + per-row target pick -> vector
};

// Reverse-mode autodiff tape. Define-by-run: every op records a node holding
// its output; backward replays the node list in reverse. One tape per forward
// evaluation; never shared across concurrent evaluations.
class Tape {
 public:
  Tape() {
#ifndef NDEBUG
    check_finite_ = true;
#endif
  }

  // --- graph construction -------------------------------------------------

  Var input(Tensor t) {
    bool rg = t.requires_grad;
    return push(OpKind::Input, {}, std::move(t), rg);
  }

  Var input(Tensor t, bool requires_grad) {
    t.requires_grad = requires_grad;
    return input(std::move(t));
  }

  Var constant(Tensor t) {
    t.requires_grad = false;
    return push(OpKind::Constant, {}, std::move(t), false);
  }

  Var matmul(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.cols() != B.rows())
      throw ShapeError("matmul: inner dims " + A.shape_str() + " vs " + B.shape_str());
    Tensor C(A.rows(), B.cols());
    matmul_acc(A.raw(), B.raw(), C.raw(), A.rows(), A.cols(), B.cols());
    return push(OpKind::MatMul, {a, b}, std::move(C));
  }

  Var add(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) throw ShapeError("add: shape mismatch");
    Tensor C = A;
    const double* q = B.raw();
    double* p = C.raw();
    for (std::size_t i = 0; i < C.size(); ++i) p[i] += q[i];
    return push(OpKind::Add, {a, b}, std::move(C));
  }

  // A[n x m] + bias[m] broadcast over rows.
  Var add_row(Var a, Var bias) {
    const Tensor& A = val(a);
    const Tensor& B = val(bias);
    if (B.rows() != 1 || A.cols() != B.cols()) throw ShapeError("add_row: bias shape");
    Tensor C = A;
    for (std::size_t r = 0; r < C.rows(); ++r) {
      double* p = C.raw() + r * C.cols();
      const double* q = B.raw();
      for (std::size_t j = 0; j < C.cols(); ++j) p[j] += q[j];
    }
    return push(OpKind::AddRow, {a, bias}, std::move(C));
  }

  Var mul(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) throw ShapeError("mul: shape mismatch");
    Tensor C = A;
    const double* q = B.raw();
    double* p = C.raw();
    for (std::size_t i = 0; i < C.size(); ++i) p[i] *= q[i];
    return push(OpKind::Mul, {a, b}, std::move(C));
  }

  Var scale(Var a, double c) {
    Tensor C = val(a);
    for (double& v : C.data()) v *= c;
    Var out = push(OpKind::Scale, {a}, std::move(C));
    nodes_[out.id].c0 = c;
    return out;
  }

  Var transpose(Var a) {
    const Tensor& A = val(a);
    Tensor C(A.cols(), A.rows());
    for (std::size_t r = 0; r < A.rows(); ++r)
      for (std::size_t j = 0; j < A.cols(); ++j) C(j, r) = A(r, j);
    return push(OpKind::Transpose, {a}, std::move(C));
  }

  Var slice_cols(Var a, std::size_t start, std::size_t len) {
    const Tensor& A = val(a);
    if (start + len > A.cols()) throw ShapeError("slice_cols: out of range");
    Tensor C(A.rows(), len);
    for (std::size_t r = 0; r < A.rows(); ++r)
      std::copy_n(A.raw() + r * A.cols() + start, len, C.raw() + r * len);
    Var out = push(OpKind::SliceCols, {a}, std::move(C));
    nodes_[out.id].i0 = static_cast<int>(start);
    nodes_[out.id].i1 = static_cast<int>(len);
    return out;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty");
    std::size_t rows = val(parts[0]).rows();
    std::size_t cols = 0;
    for (Var v : parts) {
      if (val(v).rows() != rows) throw ShapeError("concat_cols: row mismatch");
      cols += val(v).cols();
    }
    Tensor C(rows, cols);
    std::size_t off = 0;
    for (Var v : parts) {
      const Tensor& A = val(v);
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(A.raw() + r * A.cols(), A.cols(), C.raw() + r * cols + off);
      off += A.cols();
    }
    return push(OpKind::ConcatCols, parts, std::move(C));
  }

  // table[V x d], ids -> [ids.size() x d]
  Var gather_rows(Var table, const std::vector<int>& ids) {
    const Tensor& T = val(table);
    for (int id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= T.rows())
        throw ShapeError("gather_rows: id out of range");
    Tensor C(ids.size(), T.cols());
    for (std::size_t r = 0; r < ids.size(); ++r)
      std::copy_n(T.raw() + static_cast<std::size_t>(ids[r]) * T.cols(), T.cols(),
                  C.raw() + r * T.cols());
    Var out = push(OpKind::GatherRows, {table}, std::move(C));
    nodes_[out.id].ids = ids;
    return out;
  }

  // Row-wise softmax with max-subtraction. If mask is valid it must be a 0/1
  // tensor of the same shape; masked entries get probability exactly 0 and are
  // excluded from the max and the normalizer, so a row's output is bit-exactly
  // independent of masked inputs.
  Var softmax_rows(Var a, Var mask = Var{}) {
    const Tensor& A = val(a);
    const Tensor* M = mask.valid() ? &val(mask) : nullptr;
    if (M && !M->same_shape(A)) throw ShapeError("softmax_rows: mask shape");
    Tensor C = A;  // same shape and rank; values overwritten below
    for (std::size_t r = 0; r < A.rows(); ++r) {
      const double* x = A.raw() + r * A.cols();
      const double* m = M ? M->raw() + r * A.cols() : nullptr;
      double* p = C.raw() + r * A.cols();
      double mx = -std::numeric_limits<double>::infinity();
      std::size_t allowed = 0;
      for (std::size_t j = 0; j < A.cols(); ++j)
        if (!m || m[j] != 0.0) {
          ++allowed;
          mx = std::max(mx, x[j]);
        }
      if (allowed == 0) throw ShapeError("softmax_rows: fully masked row");
      if (!std::isfinite(mx)) throw NumericError("softmax_rows: non-finite scores");
      double z = 0.0;
      for (std::size_t j = 0; j < A.cols(); ++j) {
        p[j] = (!m || m[j] != 0.0) ? std::exp(x[j] - mx) : 0.0;
        z += p[j];
      }
      for (std::size_t j = 0; j < A.cols(); ++j) p[j] /= z;
    }
    std::vector<Var> in = {a};
    if (mask.valid()) in.push_back(mask);
    return push(OpKind::SoftmaxRows, in, std::move(C));
  }

  // Per-row layer norm with learned gain/bias: y = (x - mean)/sqrt(var + eps) * g + b.
  Var layer_norm_rows(Var a, Var gamma, Var beta, double eps = 1e-5) {
    const Tensor& A = val(a);
    const Tensor& G = val(gamma);
    const Tensor& B = val(beta);
    if (G.rows() != 1 || G.cols() != A.cols() || B.rows() != 1 || B.cols() != A.cols())
      throw ShapeError("layer_norm_rows: gain/bias shape");
    Tensor C = A;
    const std::size_t m = A.cols();
    for (std::size_t r = 0; r < A.rows(); ++r) {
      const double* x = A.raw() + r * m;
      double* y = C.raw() + r * m;
      double mean = 0.0;
      for (std::size_t j = 0; j < m; ++j) mean += x[j];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t j = 0; j < m; ++j) var += (x[j] - mean) * (x[j] - mean);
      var /= static_cast<double>(m);
      double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < m; ++j) y[j] = (x[j] - mean) * inv * G[j] + B[j];
    }
    Var out = push(OpKind::LayerNormRows, {a, gamma, beta}, std::move(C));
    nodes_[out.id].c0 = eps;
    return out;
  }

  Var relu(Var a) {
    Tensor C = val(a);
    for (double& v : C.data()) v = v > 0.0 ? v : 0.0;
    return push(OpKind::Relu, {a}, std::move(C));
  }

  Var exp(Var a) {
    Tensor C = val(a);
    for (double& v : C.data()) v = std::exp(v);
    return push(OpKind::Exp, {a}, std::move(C));
  }

  Var sum(Var a) {
    const Tensor& A = val(a);
    double s = 0.0;
    for (double v : A.data()) s += v;
    return push(OpKind::Sum, {a}, Tensor::scalar(s));
  }

  Var reshape(Var a, std::vector<std::size_t> shape) {
    const Tensor& A = val(a);
    Tensor C = Tensor::from(shape, A.data());
    return push(OpKind::Reshape, {a}, std::move(C));
  }

  // Fused log-softmax + pick: out[r] = log softmax(logits[r,:])[ids[r]].
  Var log_softmax_pick(Var logits, const std::vector<int>& ids) {
    const Tensor& A = val(logits);
    if (ids.size() != A.rows()) throw ShapeError("log_softmax_pick: ids length");
    for (int id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= A.cols())
        throw ShapeError("log_softmax_pick: id out of range");
    Tensor C = Tensor::vec(A.rows());
    for (std::size_t r = 0; r < A.rows(); ++r) {
      const double* x = A.raw() + r * A.cols();
      double mx = x[0];
      for (std::size_t j = 1; j < A.cols(); ++j) mx = std::max(mx, x[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < A.cols(); ++j) z += std::exp(x[j] - mx);
      C[r] = x[ids[r]] - mx - std::log(z);
    }
    Var out = push(OpKind::LogSoftmaxPick, {logits}, std::move(C));
    nodes_[out.id].ids = ids;
    return out;
  }

  // --- evaluation results ---------------------------------------------------

  const Tensor& value(Var v) const { return val(v); }
  std::size_t num_nodes() const { return nodes_.size(); }

  void set_check_finite(bool on) { check_finite_ = on; }

  // --- reverse pass ---------------------------------------------------------

  // Seeds the gradient of `seed_out` and propagates backwards. Gradients from
  // any previous backward() on this tape are discarded. Only nodes on a path
  // from a requires_grad input to the seed receive gradients.
  void backward(Var seed_out, const Tensor& seed_grad) {
    if (seed_out.id < 0 || static_cast<std::size_t>(seed_out.id) >= nodes_.size())
      throw ShapeError("backward: seed output not on tape");
    if (!seed_grad.same_shape(nodes_[seed_out.id].out))
      throw ShapeError("backward: seed gradient shape mismatch");
    grads_.assign(nodes_.size(), Tensor());
    grads_[seed_out.id] = seed_grad;
    for (int i = seed_out.id; i >= 0; --i) {
      if (grads_[i].empty() || !nodes_[i].needs_grad) continue;
      backprop_node(i);
    }
  }

  void backward(Var seed_out) {
    if (seed_out.id < 0 || static_cast<std::size_t>(seed_out.id) >= nodes_.size())
      throw ShapeError("backward: seed output not on tape");
    const Tensor& o = nodes_[seed_out.id].out;
    if (o.size() != 1) throw ShapeError("backward: default seed requires a scalar output");
    Tensor s = o;  // same shape, whether [1] or [1 x 1]
    s[0] = 1.0;
    backward(seed_out, s);
  }

  // Gradient of a node after backward(); zeros if the node is off-path.
  Tensor grad(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ShapeError("grad: not on tape");
    if (static_cast<std::size_t>(v.id) < grads_.size() && !grads_[v.id].empty())
      return grads_[v.id];
    const Tensor& o = nodes_[v.id].out;
    return o.rank() == 1 ? Tensor::vec(o.cols()) : Tensor(o.rows(), o.cols());
  }

  // C += A[n x k] * B[k x m], all row-major.
  static void matmul_acc(const double* A, const double* B, double* C, std::size_t n,
                         std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
      double* c = C + i * m;
      const double* a = A + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double ap = a[p];
        const double* b = B + p * m;
        for (std::size_t j = 0; j < m; ++j) c[j] += ap * b[j];
      }
    }
  }

 private:
  struct Node {
    OpKind kind;
    std::vector<int> in;
    Tensor out;
    std::vector<int> ids;  // GatherRows / LogSoftmaxPick targets
    int i0 = 0, i1 = 0;    // SliceCols start/len
    double c0 = 0.0;       // Scale factor / layer-norm eps
    bool needs_grad = false;
  };

  const Tensor& val(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ShapeError("tape: var not on this tape");
    return nodes_[v.id].out;
  }

  Var push(OpKind kind, const std::vector<Var>& in, Tensor out, bool input_rg = false) {
    Node n;
    n.kind = kind;
    n.in.reserve(in.size());
    bool ng = input_rg;
    for (Var v : in) {
      if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
        throw ShapeError("tape: input var not on this tape");
      n.in.push_back(v.id);
      ng = ng || nodes_[v.id].needs_grad;
    }
    n.needs_grad = ng;
    if (check_finite_ && !out.finite())
      throw NumericError("non-finite value at node " + std::to_string(nodes_.size()));
    n.out = std::move(out);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  Tensor& grad_slot(int id) {
    if (grads_[id].empty()) {
      const Tensor& o = nodes_[id].out;
      grads_[id] = o.rank() == 1 ? Tensor::vec(o.cols()) : Tensor(o.rows(), o.cols());
    }
    return grads_[id];
  }

  void acc(int id, const Tensor& g) {
    if (!nodes_[id].needs_grad) return;
    Tensor& slot = grad_slot(id);
    double* p = slot.raw();
    const double* q = g.raw();
    for (std::size_t i = 0; i < slot.size(); ++i) p[i] += q[i];
  }

  void backprop_node(int id) {
    const Node& n = nodes_[id];
    const Tensor& g = grads_[id];
    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Constant:
        break;
      case OpKind::MatMul: {
        const Tensor& A = nodes_[n.in[0]].out;
        const Tensor& B = nodes_[n.in[1]].out;
        if (nodes_[n.in[0]].needs_grad) {
          // dA += g * B^T
          Tensor& dA = grad_slot(n.in[0]);
          for (std::size_t i = 0; i < A.rows(); ++i)
            for (std::size_t p = 0; p < B.cols(); ++p) {
              const double gv = g(i, p);
              const double* br = B.raw() + 0;
              double* da = dA.raw() + i * A.cols();
              const double* bcol = br + p;  // column p, stride B.cols()
              for (std::size_t j = 0; j < A.cols(); ++j) da[j] += gv * bcol[j * B.cols()];
            }
        }
        if (nodes_[n.in[1]].needs_grad) {
          // dB += A^T * g
          Tensor& dB = grad_slot(n.in[1]);
          for (std::size_t i = 0; i < A.rows(); ++i) {
            const double* a = A.raw() + i * A.cols();
            const double* gr = g.raw() + i * g.cols();
            for (std::size_t j = 0; j < A.cols(); ++j) {
              const double av = a[j];
              double* db = dB.raw() + j * dB.cols();
              for (std::size_t p = 0; p < g.cols(); ++p) db[p] += av * gr[p];
            }
          }
        }
        break;
      }
      case OpKind::Add:
        acc(n.in[0], g);
        acc(n.in[1], g);
        break;
      case OpKind::AddRow: {
        acc(n.in[0], g);
        if (nodes_[n.in[1]].needs_grad) {
          Tensor& db = grad_slot(n.in[1]);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            const double* gr = g.raw() + r * g.cols();
            for (std::size_t j = 0; j < g.cols(); ++j) db[j] += gr[j];
          }
        }
        break;
      }
      case OpKind::Mul: {
        const Tensor& A = nodes_[n.in[0]].out;
        const Tensor& B = nodes_[n.in[1]].out;
        if (nodes_[n.in[0]].needs_grad) {
          Tensor& dA = grad_slot(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * B[i];
        }
        if (nodes_[n.in[1]].needs_grad) {
          Tensor& dB = grad_slot(n.in[1]);
          for (std::size_t i = 0; i < g.size(); ++i) dB[i] += g[i] * A[i];
        }
        break;
      }
      case OpKind::Scale: {
        if (nodes_[n.in[0]].needs_grad) {
          Tensor& dA = grad_slot(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * n.c0;
        }
        break;
      }
      case OpKind::Transpose: {
        if (nodes_[n.in[0]].needs_grad) {
          Tensor& dA = grad_slot(n.in[0]);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t j = 0; j < g.cols(); ++j) dA(j, r) += g(r, j);
        }
        break;
      }
      case OpKind::SliceCols: {
        if (nodes_[n.in[0]].needs_grad) {
          Tensor& dA = grad_slot(n.in[0]);
          const std::size_t start = static_cast<std::size_t>(n.i0);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t j = 0; j < g.cols(); ++j) dA(r, start + j) += g(r, j);
        }
        break;
      }
      case OpKind::ConcatCols: {
        std::size_t off = 0;
        for (int in_id : n.in) {
          const Tensor& part = nodes_[in_id].out;
          if (nodes_[in_id].needs_grad) {
            Tensor& dP = grad_slot(in_id);
            for (std::size_t r = 0; r < part.rows(); ++r)
              for (std::size_t j = 0; j < part.cols(); ++j) dP(r, j) += g(r, off + j);
          }
          off += part.cols();
        }
        break;
      }
      case OpKind::GatherRows: {
        if (nodes_[n.in[0]].needs_grad) {
          Tensor& dT = grad_slot(n.in[0]);
          for (std::size_t r = 0; r < n.ids.size(); ++r) {
            double* d = dT.raw() + static_cast<std::size_t>(n.ids[r]) * dT.cols();
            const double* gr = g.raw() + r * g.cols();
            for (std::size_t j = 0; j < g.cols(); ++j) d[j] += gr[j];
          }
        }
        break;
      }
      case OpKind::SoftmaxRows: {
        // dx = p .* (g - <g, p>) per row; masked entries have p == 0.
        if (nodes_[n.in[0]].needs_grad) {
          const Tensor& P = n.out;
          Tensor& dX = grad_slot(n.in[0]);
          for (std::size_t r = 0; r < P.rows(); ++r) {
            const double* p = P.raw() + r * P.cols();
            const double* gr = g.raw() + r * P.cols();
            double dot = 0.0;
            for (std::size_t j = 0; j < P.cols(); ++j) dot += p[j] * gr[j];
            double* dx = dX.raw() + r * P.cols();
            for (std::size_t j = 0; j < P.cols(); ++j) dx[j] += p[j] * (gr[j] - dot);
          }
        }
        break;
      }
      case OpKind::LayerNormRows: {
        const Tensor& X = nodes_[n.in[0]].out;
        const Tensor& G = nodes_[n.in[1]].out;
        const std::size_t m = X.cols();
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::size_t r = 0; r < X.rows(); ++r) {
          const double* x = X.raw() + r * m;
          const double* gr = g.raw() + r * m;
          double mean = 0.0;
          for (std::size_t j = 0; j < m; ++j) mean += x[j];
          mean *= inv_m;
          double var = 0.0;
          for (std::size_t j = 0; j < m; ++j) var += (x[j] - mean) * (x[j] - mean);
          var *= inv_m;
          const double inv = 1.0 / std::sqrt(var + n.c0);
          if (nodes_[n.in[1]].needs_grad || nodes_[n.in[2]].needs_grad) {
            Tensor& dG = grad_slot(n.in[1]);
            Tensor& dB = grad_slot(n.in[2]);
            for (std::size_t j = 0; j < m; ++j) {
              const double xh = (x[j] - mean) * inv;
              if (nodes_[n.in[1]].needs_grad) dG[j] += gr[j] * xh;
              if (nodes_[n.in[2]].needs_grad) dB[j] += gr[j];
            }
          }
          if (nodes_[n.in[0]].needs_grad) {
            Tensor& dX = grad_slot(n.in[0]);
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double h = gr[j] * G[j];
              s1 += h;
              s2 += h * (x[j] - mean) * inv;
            }
            s1 *= inv_m;
            s2 *= inv_m;
            double* dx = dX.raw() + r * m;
            for (std::size_t j = 0; j < m; ++j) {
              const double xh = (x[j] - mean) * inv;
              dx[j] += (gr[j] * G[j] - s1 - xh * s2) * inv;
            }
          }
        }
        break;
      }
      case OpKind::Relu: {
        if (nodes_[n.in[0]].needs_grad) {
          const Tensor& X = nodes_[n.in[0]].out;
          Tensor& dX = grad_slot(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) dX[i] += X[i] > 0.0 ? g[i] : 0.0;
        }
        break;
      }
      case OpKind::Exp: {
        if (nodes_[n.in[0]].needs_grad) {
          Tensor& dX = grad_slot(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) dX[i] += g[i] * n.out[i];
        }
        break;
      }
      case OpKind::Sum: {
        if (nodes_[n.in[0]].needs_grad) {
          Tensor& dX = grad_slot(n.in[0]);
          const double gv = g[0];
          for (std::size_t i = 0; i < dX.size(); ++i) dX[i] += gv;
        }
        break;
      }
      case OpKind::Reshape: {
        if (nodes_[n.in[0]].needs_grad) {
          Tensor& dX = grad_slot(n.in[0]);
          for (std::size_t i = 0; i < g.size(); ++i) dX[i] += g[i];
        }
        break;
      }
      case OpKind::LogSoftmaxPick: {
        if (nodes_[n.in[0]].needs_grad) {
          const Tensor& L = nodes_[n.in[0]].out;
          Tensor& dL = grad_slot(n.in[0]);
          for (std::size_t r = 0; r < L.rows(); ++r) {
            const double* x = L.raw() + r * L.cols();
            double mx = x[0];
            for (std::size_t j = 1; j < L.cols(); ++j) mx = std::max(mx, x[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < L.cols(); ++j) z += std::exp(x[j] - mx);
            const double gv = g[r];
            double* d = dL.raw() + r * L.cols();
            for (std::size_t j = 0; j < L.cols(); ++j) {
              const double p = std::exp(x[j] - mx) / z;
              d[j] += gv * ((static_cast<int>(j) == n.ids[r] ? 1.0 : 0.0) - p);
            }
          }
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool check_finite_ = false;
};

// Builds a scalar-valued graph from one input tensor.
using ScalarFn = std::function<Var(Tape&, Var)>;

// Max over coordinates of |analytic - central difference| /
// max(|analytic|, |central|, 1e-8).
inline double grad_check(const ScalarFn& f, const Tensor& point, double eps) {
  if (eps <= 0.0) throw ShapeError("grad_check: eps must be positive");
  auto eval = [&](const Tensor& x) {
    Tape t;
    Var in = t.input(x, false);
    Var out = f(t, in);
    const Tensor& o = t.value(out);
    if (o.size() != 1) throw ShapeError("grad_check: function is not scalar");
    return o[0];
  };
  Tape t;
  Var in = t.input(point, true);
  Var out = f(t, in);
  if (t.value(out).size() != 1) throw ShapeError("grad_check: function is not scalar");
  t.backward(out);
  Tensor analytic = t.grad(in);

  double worst = 0.0;
  Tensor x = point;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double fp = eval(x);
    x[i] = saved - eps;
    const double fm = eval(x);
    x[i] = saved;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace attnlens
