#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace oat {

class Tape;

// Handle to a node on a Tape. All tensors are dense row-major 2-D doubles;
// scalars are 1x1. Handles are cheap to copy and valid for the tape's life.
class Tensor {
 public:
  Tensor() = default;
  bool defined() const { return tape_ != nullptr; }
  int rows() const;
  int cols() const;
  std::span<const double> values() const;
  double scalar() const;  // requires 1x1
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Tensor(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
// which is already a topological order; backward() walks it in reverse once.
// Single-threaded by design: one tape per worker.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves. borrow() aliases caller-owned memory (caller keeps it alive and
  // unchanged for the tape's life); param() does the same but is marked to
  // receive a gradient slot keyed by pid. Repeated param() calls with one pid
  // return the same node so gradients from all uses accumulate in one place.
  Tensor constant(int r, int c, std::vector<double> v);
  Tensor constant(int r, int c, const float* v);
  Tensor borrow(int r, int c, const double* v);
  Tensor param(int r, int c, const double* v, int pid);
  Tensor zeros(int r, int c);
  Tensor scalar_const(double v) { return constant(1, 1, std::vector<double>{v}); }

  // Gradient of a 1x1 loss with respect to every param leaf, keyed by pid.
  // Params registered on the tape but untouched by the loss get zero vectors.
  std::unordered_map<int, std::vector<double>> backward(const Tensor& loss);

  bool grad_enabled() const { return grad_enabled_; }
  size_t node_count() const { return nodes_.size(); }

  // Node plumbing, public for the op implementations in tensor.cpp.
  struct Node {
    int r = 0, c = 0;
    const double* v = nullptr;    // points at own.data() or external memory
    std::vector<double> own;      // empty for borrowed leaves
    std::vector<double> grad;     // sized during backward when needs_grad
    int pid = -1;
    bool needs_grad = false;
    std::function<void(Tape&, int)> bwd;  // empty for leaves / pruned nodes
  };

  int push(int r, int c, bool needs, std::function<void(Tape&, int)> bwd);
  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }
  const double* val(int id) const { return nodes_[id].v; }
  double* mut(int id) { return nodes_[id].own.data(); }
  bool needs(int id) const { return nodes_[id].needs_grad; }
  // Gradient accumulation buffer for a node, allocated on first touch.
  double* gbuf(int id);
  Tensor handle(int id) { return Tensor(this, id); }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<int, int> param_nodes_;  // pid -> node id
  bool grad_enabled_ = true;
  bool in_backward_ = false;
};

// ---- ops ----
// All ops throw std::invalid_argument on shape mismatch or cross-tape mixing.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// C = A*B. Blocked kernels with a fixed accumulation order: output row i is
// produced by the same instruction path for every i, so permuting input rows
// permutes output rows bitwise.
Tensor matmul(const Tensor& a, const Tensor& b);
// C = A*B^T with b stored [n,k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor slice_rows(const Tensor& a, int r0, int r1);

Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor xlogx(const Tensor& a);  // x log x, 0 at 0

Tensor sum(const Tensor& a);   // -> 1x1
Tensor mean(const Tensor& a);  // -> 1x1
Tensor row_sum(const Tensor& a);  // [r,c] -> [r,1]
Tensor col_sum(const Tensor& a);  // [r,c] -> [1,c]
Tensor broadcast_row(const Tensor& v, int r);  // [1,c] -> [r,c]
Tensor broadcast_col(const Tensor& v, int c);  // [r,1] -> [r,c]

// Row-wise softmax family. The normalizer is a sorted-order sum, so a
// permutation of the entries along the reduced axis gives bitwise identical
// results for the surviving entries.
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor logsumexp_rows(const Tensor& a);  // [r,c] -> [r,1]

// y = (x - mean)/sqrt(var + eps) * gain + bias, row-wise; gain/bias [1,c].
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);

// out[i*K + j] = [m_i | z_j] for m [M,F], z [K,F] -> [M*K, 2F].
Tensor pairwise_concat(const Tensor& m, const Tensor& z);

// Same row-major values under a new shape; r*c must match.
Tensor reshape(const Tensor& a, int r, int c);

// out[i,f] = sum_k s[i,k] * v[k,f], accumulated in sorted order so the result
// is invariant to a joint permutation of s columns and v rows.
Tensor mix_rows(const Tensor& s, const Tensor& v);

// out[p,ch] = sum_k w[p,k] * comps[k, p*chans + ch], sorted-order sum over k.
// w [P,K], comps [K, P*chans] -> [P, chans].
Tensor compose_mix(const Tensor& w, const Tensor& comps, int chans);

// out[i] = src[i] >= 0 ? z[src[i]] : prev[i]; z [K,F], prev [M,F], src size M.
// The index map is data, not a tape value; gradients flow into the rows of z
// and prev that were actually used.
Tensor assemble_rows(const Tensor& z, const Tensor& prev,
                     const std::vector<int>& src);

// out[i] = a[idx[i]]; idx entries in [0, a.rows).
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);

// sum_k (a[k, ck*chans+ch] - b[0, ck*chans+ch])^2 grouped per column block:
// a [K, P*chans], b [1, P*chans] -> [K, P], entry = sum over the chans
// channels of the squared residual at pixel p.
Tensor pixel_sq_err(const Tensor& a, const Tensor& b, int chans);

// Scales row range [r0, r1) by s; other rows pass through.
Tensor scale_rows(const Tensor& a, int r0, int r1, double s);

// Fixed-order sum of a span, ascending by value; bitwise invariant to input
// permutation. Exposed for metric code that needs the same guarantee.
double stable_sum(std::span<const double> xs);

}  // namespace oat
