#include "oat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

namespace oat {

// ---- kernels ----
// Accumulation order is a fixed function of the k extent alone: k ascending,
// one accumulator per output element (knn/ktn), or an 8-lane split combined in
// a fixed tree (knt). Every output row runs the same path, which makes row
// permutations bitwise-exact and results independent of tiling.

namespace {

constexpr int kKC = 256;

// C += A*B; A [m,k], B [k,n], all row-major.
void knn(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int k0 = 0; k0 < k; k0 += kKC) {
    const int k1 = std::min(k, k0 + kKC);
    for (int i = 0; i < m; ++i) {
      const double* a = A + static_cast<size_t>(i) * k;
      double* c = C + static_cast<size_t>(i) * n;
      for (int p = k0; p < k1; ++p) {
        const double ap = a[p];
        const double* b = B + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) c[j] += ap * b[j];
      }
    }
  }
}

// C += A*B^T; A [m,k], B [n,k].
void knt(const double* A, const double* B, double* C, int m, int k, int n) {
  const int k8 = k & ~7;
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<size_t>(i) * k;
    double* c = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* b = B + static_cast<size_t>(j) * k;
      double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
      for (int p = 0; p < k8; p += 8)
        for (int r = 0; r < 8; ++r) acc[r] += a[p + r] * b[p + r];
      double tail = 0.0;
      for (int p = k8; p < k; ++p) tail += a[p] * b[p];
      c[j] += (((acc[0] + acc[1]) + (acc[2] + acc[3])) +
               ((acc[4] + acc[5]) + (acc[6] + acc[7]))) +
              tail;
    }
  }
}

// C += A^T*B; A [k,m], B [k,n].
void ktn(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int k0 = 0; k0 < k; k0 += kKC) {
    const int k1 = std::min(k, k0 + kKC);
    for (int p = k0; p < k1; ++p) {
      const double* a = A + static_cast<size_t>(p) * m;
      const double* b = B + static_cast<size_t>(p) * n;
      for (int i = 0; i < m; ++i) {
        const double ai = a[i];
        double* c = C + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) c[j] += ai * b[j];
      }
    }
  }
}

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void check_same_tape(const Tensor& a, const Tensor& b) {
  check(a.defined() && b.defined() && a.tape() == b.tape(),
        "tensors must live on the same tape");
}

std::string dim_str(const Tensor& t) {
  return "[" + std::to_string(t.rows()) + "," + std::to_string(t.cols()) + "]";
}

}  // namespace

double stable_sum(std::span<const double> xs) {
  const size_t n = xs.size();
  double buf[64];
  std::vector<double> heap;
  double* p = buf;
  if (n > 64) {
    heap.resize(n);
    p = heap.data();
  }
  std::copy(xs.begin(), xs.end(), p);
  std::sort(p, p + n);
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += p[i];
  return s;
}

// ---- Tensor accessors ----

int Tensor::rows() const { return tape_->node(id_).r; }
int Tensor::cols() const { return tape_->node(id_).c; }

std::span<const double> Tensor::values() const {
  const auto& nd = tape_->node(id_);
  return {nd.v, static_cast<size_t>(nd.r) * nd.c};
}

double Tensor::scalar() const {
  const auto& nd = tape_->node(id_);
  check(nd.r == 1 && nd.c == 1, "scalar() requires a 1x1 tensor");
  return nd.v[0];
}

// ---- Tape ----

int Tape::push(int r, int c, bool needs, std::function<void(Tape&, int)> bwd) {
  Node nd;
  nd.r = r;
  nd.c = c;
  nd.own.assign(static_cast<size_t>(r) * c, 0.0);
  nd.v = nd.own.data();
  nd.needs_grad = needs && grad_enabled_;
  if (nd.needs_grad) nd.bwd = std::move(bwd);
  nodes_.push_back(std::move(nd));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::constant(int r, int c, std::vector<double> v) {
  check(static_cast<size_t>(r) * c == v.size(), "constant: size mismatch");
  Node nd;
  nd.r = r;
  nd.c = c;
  nd.own = std::move(v);
  nd.v = nd.own.data();
  nodes_.push_back(std::move(nd));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::constant(int r, int c, const float* v) {
  std::vector<double> d(static_cast<size_t>(r) * c);
  for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(v[i]);
  return constant(r, c, std::move(d));
}

Tensor Tape::borrow(int r, int c, const double* v) {
  Node nd;
  nd.r = r;
  nd.c = c;
  nd.v = v;
  nodes_.push_back(std::move(nd));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::param(int r, int c, const double* v, int pid) {
  auto it = param_nodes_.find(pid);
  if (it != param_nodes_.end()) {
    const Node& nd = nodes_[it->second];
    check(nd.r == r && nd.c == c && nd.v == v, "param: pid reused with different tensor");
    return Tensor(this, it->second);
  }
  Node nd;
  nd.r = r;
  nd.c = c;
  nd.v = v;
  nd.pid = pid;
  nd.needs_grad = grad_enabled_;
  nodes_.push_back(std::move(nd));
  int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(pid, id);
  return Tensor(this, id);
}

Tensor Tape::zeros(int r, int c) {
  return constant(r, c, std::vector<double>(static_cast<size_t>(r) * c, 0.0));
}

double* Tape::gbuf(int id) {
  Node& nd = nodes_[id];
  if (nd.grad.empty()) nd.grad.assign(static_cast<size_t>(nd.r) * nd.c, 0.0);
  return nd.grad.data();
}

std::unordered_map<int, std::vector<double>> Tape::backward(const Tensor& loss) {
  check(grad_enabled_, "backward on a grad-disabled tape");
  check(loss.defined() && loss.tape() == this, "loss not on this tape");
  check(loss.rows() == 1 && loss.cols() == 1, "loss must be 1x1");

  for (Node& nd : nodes_)
    if (nd.needs_grad) nd.grad.assign(static_cast<size_t>(nd.r) * nd.c, 0.0);

  std::unordered_map<int, std::vector<double>> out;
  if (nodes_[loss.id()].needs_grad) {
    nodes_[loss.id()].grad[0] = 1.0;
    for (int i = loss.id(); i >= 0; --i) {
      Node& nd = nodes_[i];
      if (nd.needs_grad && nd.bwd && !nd.grad.empty()) nd.bwd(*this, i);
    }
  }
  for (auto& [pid, nid] : param_nodes_) {
    Node& nd = nodes_[nid];
    if (nd.grad.empty()) nd.grad.assign(static_cast<size_t>(nd.r) * nd.c, 0.0);
    out[pid] = std::move(nd.grad);
    nd.grad.clear();
  }
  return out;
}

// ---- op helpers ----

namespace {

// Unary elementwise with value-dependent backward:
// fwd computes y from x; dfn(x, y) is dy/dx.
template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF dfn) {
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  const size_t n = static_cast<size_t>(r) * c;
  int aid = a.id();
  int id = t.push(r, c, t.needs(aid), [aid, dfn, n](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* x = tp.val(aid);
    const double* y = tp.val(self);
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (size_t i = 0; i < n; ++i) ga[i] += dfn(x[i], y[i]) * g[i];
  });
  const double* x = t.val(aid);
  double* y = t.mut(id);
  for (size_t i = 0; i < n; ++i) y[i] = f(x[i]);
  return t.handle(id);
}

template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  check_same_tape(a, b);
  check(a.rows() == b.rows() && a.cols() == b.cols(),
        "elementwise op: shape mismatch " + dim_str(a) + " vs " + dim_str(b));
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  const size_t n = static_cast<size_t>(r) * c;
  int aid = a.id(), bid = b.id();
  int id = t.push(r, c, t.needs(aid) || t.needs(bid),
                  [aid, bid, da, db, n](Tape& tp, int self) {
                    const double* x = tp.val(aid);
                    const double* y = tp.val(bid);
                    const double* g = tp.node(self).grad.data();
                    if (tp.needs(aid)) {
                      double* ga = tp.gbuf(aid);
                      for (size_t i = 0; i < n; ++i) ga[i] += da(x[i], y[i]) * g[i];
                    }
                    if (tp.needs(bid)) {
                      double* gb = tp.gbuf(bid);
                      for (size_t i = 0; i < n; ++i) gb[i] += db(x[i], y[i]) * g[i];
                    }
                  });
  const double* x = t.val(aid);
  const double* y = t.val(bid);
  double* z = t.mut(id);
  for (size_t i = 0; i < n; ++i) z[i] = f(x[i], y[i]);
  return t.handle(id);
}

}  // namespace

// ---- arithmetic ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor xlogx(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; },
      [](double x, double) { return x > 1e-300 ? std::log(x) + 1.0 : 0.0; });
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b);
  check(a.cols() == b.rows(),
        "matmul: inner dims " + dim_str(a) + " x " + dim_str(b));
  Tape& t = *a.tape();
  const int m = a.rows(), k = a.cols(), n = b.cols();
  int aid = a.id(), bid = b.id();
  int id = t.push(m, n, t.needs(aid) || t.needs(bid),
                  [aid, bid, m, k, n](Tape& tp, int self) {
                    const double* g = tp.node(self).grad.data();
                    if (tp.needs(aid)) knt(g, tp.val(bid), tp.gbuf(aid), m, n, k);
                    if (tp.needs(bid)) ktn(tp.val(aid), g, tp.gbuf(bid), k, m, n);
                  });
  knn(t.val(aid), t.val(bid), t.mut(id), m, k, n);
  return t.handle(id);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b);
  check(a.cols() == b.cols(),
        "matmul_nt: inner dims " + dim_str(a) + " x " + dim_str(b) + "^T");
  Tape& t = *a.tape();
  const int m = a.rows(), k = a.cols(), n = b.rows();
  int aid = a.id(), bid = b.id();
  int id = t.push(m, n, t.needs(aid) || t.needs(bid),
                  [aid, bid, m, k, n](Tape& tp, int self) {
                    const double* g = tp.node(self).grad.data();
                    if (tp.needs(aid)) knn(g, tp.val(bid), tp.gbuf(aid), m, n, k);
                    if (tp.needs(bid)) ktn(g, tp.val(aid), tp.gbuf(bid), n, m, k);
                  });
  knt(t.val(aid), t.val(bid), t.mut(id), m, k, n);
  return t.handle(id);
}

// ---- shape ops ----

Tensor reshape(const Tensor& a, int r, int c) {
  Tape& t = *a.tape();
  const int n = a.rows() * a.cols();
  check(r > 0 && c > 0 && r * c == n, "reshape: element count must match");
  int aid = a.id();
  int id = t.push(r, c, t.needs(aid), [aid, n](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (int i = 0; i < n; ++i) ga[i] += g[i];
  });
  std::memcpy(t.mut(id), t.val(aid), sizeof(double) * n);
  return t.handle(id);
}

Tensor transpose(const Tensor& a) {
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  int aid = a.id();
  int id = t.push(c, r, t.needs(aid), [aid, r, c](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
  const double* x = t.val(aid);
  double* y = t.mut(id);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y[j * r + i] = x[i * c + j];
  return t.handle(id);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: empty");
  Tape& t = *parts[0].tape();
  const int r = parts[0].rows();
  int c = 0;
  bool needs = false;
  std::vector<int> ids;
  std::vector<int> offs;
  for (const auto& p : parts) {
    check_same_tape(parts[0], p);
    check(p.rows() == r, "concat_cols: row mismatch");
    ids.push_back(p.id());
    offs.push_back(c);
    c += p.cols();
    needs = needs || t.needs(p.id());
  }
  int id = t.push(r, c, needs, [ids, offs, r, c](Tape& tp, int self) {
    const double* g = tp.node(self).grad.data();
    for (size_t p = 0; p < ids.size(); ++p) {
      if (!tp.needs(ids[p])) continue;
      const int pc = tp.node(ids[p]).c;
      double* ga = tp.gbuf(ids[p]);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < pc; ++j) ga[i * pc + j] += g[i * c + offs[p] + j];
    }
  });
  double* y = t.mut(id);
  for (size_t p = 0; p < ids.size(); ++p) {
    const int pc = t.node(ids[p]).c;
    const double* x = t.val(ids[p]);
    for (int i = 0; i < r; ++i)
      std::memcpy(y + i * c + offs[p], x + i * pc, pc * sizeof(double));
  }
  return t.handle(id);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_rows: empty");
  Tape& t = *parts[0].tape();
  const int c = parts[0].cols();
  int r = 0;
  bool needs = false;
  std::vector<int> ids;
  std::vector<int> offs;
  for (const auto& p : parts) {
    check_same_tape(parts[0], p);
    check(p.cols() == c, "concat_rows: col mismatch");
    ids.push_back(p.id());
    offs.push_back(r);
    r += p.rows();
    needs = needs || t.needs(p.id());
  }
  int id = t.push(r, c, needs, [ids, offs, c](Tape& tp, int self) {
    const double* g = tp.node(self).grad.data();
    for (size_t p = 0; p < ids.size(); ++p) {
      if (!tp.needs(ids[p])) continue;
      const int pr = tp.node(ids[p]).r;
      double* ga = tp.gbuf(ids[p]);
      const double* gs = g + static_cast<size_t>(offs[p]) * c;
      for (int i = 0; i < pr * c; ++i) ga[i] += gs[i];
    }
  });
  double* y = t.mut(id);
  for (size_t p = 0; p < ids.size(); ++p) {
    const int pr = t.node(ids[p]).r;
    std::memcpy(y + static_cast<size_t>(offs[p]) * c, t.val(ids[p]),
                static_cast<size_t>(pr) * c * sizeof(double));
  }
  return t.handle(id);
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  check(0 <= c0 && c0 < c1 && c1 <= c, "slice_cols: bad range");
  const int w = c1 - c0;
  int aid = a.id();
  int id = t.push(r, w, t.needs(aid), [aid, c0, w, r, c](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j) ga[i * c + c0 + j] += g[i * w + j];
  });
  const double* x = t.val(aid);
  double* y = t.mut(id);
  for (int i = 0; i < r; ++i)
    std::memcpy(y + i * w, x + i * c + c0, w * sizeof(double));
  return t.handle(id);
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  check(0 <= r0 && r0 < r1 && r1 <= r, "slice_rows: bad range");
  const int h = r1 - r0;
  int aid = a.id();
  int id = t.push(h, c, t.needs(aid), [aid, r0, h, c](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (int i = 0; i < h * c; ++i) ga[r0 * c + i] += g[i];
  });
  std::memcpy(t.mut(id), t.val(aid) + static_cast<size_t>(r0) * c,
              static_cast<size_t>(h) * c * sizeof(double));
  return t.handle(id);
}

// ---- reductions and broadcasts ----

Tensor sum(const Tensor& a) {
  Tape& t = *a.tape();
  const size_t n = static_cast<size_t>(a.rows()) * a.cols();
  int aid = a.id();
  int id = t.push(1, 1, t.needs(aid), [aid, n](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double g = tp.node(self).grad[0];
    double* ga = tp.gbuf(aid);
    for (size_t i = 0; i < n; ++i) ga[i] += g;
  });
  const double* x = t.val(aid);
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += x[i];
  t.mut(id)[0] = s;
  return t.handle(id);
}

Tensor mean(const Tensor& a) {
  const size_t n = static_cast<size_t>(a.rows()) * a.cols();
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Tensor row_sum(const Tensor& a) {
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  int aid = a.id();
  int id = t.push(r, 1, t.needs(aid), [aid, r, c](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga[i * c + j] += g[i];
  });
  const double* x = t.val(aid);
  double* y = t.mut(id);
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += x[i * c + j];
    y[i] = s;
  }
  return t.handle(id);
}

Tensor col_sum(const Tensor& a) {
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  int aid = a.id();
  int id = t.push(1, c, t.needs(aid), [aid, r, c](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga[i * c + j] += g[j];
  });
  const double* x = t.val(aid);
  double* y = t.mut(id);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y[j] += x[i * c + j];
  return t.handle(id);
}

Tensor broadcast_row(const Tensor& v, int r) {
  Tape& t = *v.tape();
  check(v.rows() == 1, "broadcast_row: input must be 1 x c");
  const int c = v.cols();
  int vid = v.id();
  int id = t.push(r, c, t.needs(vid), [vid, r, c](Tape& tp, int self) {
    if (!tp.needs(vid)) return;
    const double* g = tp.node(self).grad.data();
    double* gv = tp.gbuf(vid);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) gv[j] += g[i * c + j];
  });
  const double* x = t.val(vid);
  double* y = t.mut(id);
  for (int i = 0; i < r; ++i) std::memcpy(y + i * c, x, c * sizeof(double));
  return t.handle(id);
}

Tensor broadcast_col(const Tensor& v, int c) {
  Tape& t = *v.tape();
  check(v.cols() == 1, "broadcast_col: input must be r x 1");
  const int r = v.rows();
  int vid = v.id();
  int id = t.push(r, c, t.needs(vid), [vid, r, c](Tape& tp, int self) {
    if (!tp.needs(vid)) return;
    const double* g = tp.node(self).grad.data();
    double* gv = tp.gbuf(vid);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) gv[i] += g[i * c + j];
  });
  const double* x = t.val(vid);
  double* y = t.mut(id);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y[i * c + j] = x[i];
  return t.handle(id);
}

// ---- softmax family ----

namespace {

// Row max then exp; normalizer summed in sorted order. Returns lse per row.
void row_lse(const double* x, int r, int c, double* lse) {
  std::vector<double> e(c);
  for (int i = 0; i < r; ++i) {
    const double* xi = x + static_cast<size_t>(i) * c;
    double m = xi[0];
    for (int j = 1; j < c; ++j) m = std::max(m, xi[j]);
    for (int j = 0; j < c; ++j) e[j] = std::exp(xi[j] - m);
    lse[i] = m + std::log(stable_sum(e));
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  int aid = a.id();
  int id = t.push(r, c, t.needs(aid), [aid, r, c](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* y = tp.val(self);
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (int i = 0; i < r; ++i) {
      const double* yi = y + static_cast<size_t>(i) * c;
      const double* gi = g + static_cast<size_t>(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += yi[j] * gi[j];
      for (int j = 0; j < c; ++j) ga[i * c + j] += yi[j] * (gi[j] - dot);
    }
  });
  const double* x = t.val(aid);
  double* y = t.mut(id);
  std::vector<double> lse(r);
  row_lse(x, r, c, lse.data());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y[i * c + j] = std::exp(x[i * c + j] - lse[i]);
  return t.handle(id);
}

Tensor log_softmax_rows(const Tensor& a) {
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  int aid = a.id();
  int id = t.push(r, c, t.needs(aid), [aid, r, c](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* y = tp.val(self);
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (int i = 0; i < r; ++i) {
      const double* yi = y + static_cast<size_t>(i) * c;
      const double* gi = g + static_cast<size_t>(i) * c;
      double gs = 0.0;
      for (int j = 0; j < c; ++j) gs += gi[j];
      for (int j = 0; j < c; ++j) ga[i * c + j] += gi[j] - std::exp(yi[j]) * gs;
    }
  });
  const double* x = t.val(aid);
  double* y = t.mut(id);
  std::vector<double> lse(r);
  row_lse(x, r, c, lse.data());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) y[i * c + j] = x[i * c + j] - lse[i];
  return t.handle(id);
}

Tensor logsumexp_rows(const Tensor& a) {
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  int aid = a.id();
  int id = t.push(r, 1, t.needs(aid), [aid, r, c](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* x = tp.val(aid);
    const double* y = tp.val(self);
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        ga[i * c + j] += std::exp(x[i * c + j] - y[i]) * g[i];
  });
  row_lse(t.val(aid), r, c, t.mut(id));
  return t.handle(id);
}

// ---- layer norm ----

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  const int r = x.rows(), c = x.cols();
  check(gain.rows() == 1 && gain.cols() == c, "layer_norm: gain must be 1 x c");
  check(bias.rows() == 1 && bias.cols() == c, "layer_norm: bias must be 1 x c");
  Tape& t = *x.tape();
  int xid = x.id(), gid = gain.id(), bid = bias.id();

  // Normalized values and inverse stddev are needed in backward; captured by
  // value since node storage may be reused for other purposes.
  auto nrm = std::make_shared<std::vector<double>>(static_cast<size_t>(r) * c);
  auto inv = std::make_shared<std::vector<double>>(r);

  bool needs = t.needs(xid) || t.needs(gid) || t.needs(bid);
  int id = t.push(r, c, needs, [xid, gid, bid, nrm, inv, r, c](Tape& tp, int self) {
    const double* g = tp.node(self).grad.data();
    const double* gg = tp.val(gid);
    if (tp.needs(gid)) {
      double* gv = tp.gbuf(gid);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gv[j] += g[i * c + j] * (*nrm)[i * c + j];
    }
    if (tp.needs(bid)) {
      double* gb = tp.gbuf(bid);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gb[j] += g[i * c + j];
    }
    if (tp.needs(xid)) {
      double* gx = tp.gbuf(xid);
      for (int i = 0; i < r; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < c; ++j) {
          const double dn = g[i * c + j] * gg[j];
          m1 += dn;
          m2 += dn * (*nrm)[i * c + j];
        }
        m1 /= c;
        m2 /= c;
        for (int j = 0; j < c; ++j) {
          const double dn = g[i * c + j] * gg[j];
          gx[i * c + j] += (*inv)[i] * (dn - m1 - (*nrm)[i * c + j] * m2);
        }
      }
    }
  });
  const double* xv = t.val(xid);
  const double* gv = t.val(gid);
  const double* bv = t.val(bid);
  double* y = t.mut(id);
  for (int i = 0; i < r; ++i) {
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = xv[i * c + j] - mu;
      var += d * d;
    }
    var /= c;
    const double iv = 1.0 / std::sqrt(var + eps);
    (*inv)[i] = iv;
    for (int j = 0; j < c; ++j) {
      const double nv = (xv[i * c + j] - mu) * iv;
      (*nrm)[i * c + j] = nv;
      y[i * c + j] = nv * gv[j] + bv[j];
    }
  }
  return t.handle(id);
}

// ---- structured ops ----

Tensor pairwise_concat(const Tensor& m, const Tensor& z) {
  check_same_tape(m, z);
  check(m.cols() == z.cols(), "pairwise_concat: feature dims differ");
  Tape& t = *m.tape();
  const int M = m.rows(), K = z.rows(), F = m.cols();
  int mid = m.id(), zid = z.id();
  int id = t.push(M * K, 2 * F, t.needs(mid) || t.needs(zid),
                  [mid, zid, M, K, F](Tape& tp, int self) {
                    const double* g = tp.node(self).grad.data();
                    if (tp.needs(mid)) {
                      double* gm = tp.gbuf(mid);
                      for (int i = 0; i < M; ++i)
                        for (int j = 0; j < K; ++j)
                          for (int f = 0; f < F; ++f)
                            gm[i * F + f] += g[(i * K + j) * 2 * F + f];
                    }
                    if (tp.needs(zid)) {
                      double* gz = tp.gbuf(zid);
                      for (int i = 0; i < M; ++i)
                        for (int j = 0; j < K; ++j)
                          for (int f = 0; f < F; ++f)
                            gz[j * F + f] += g[(i * K + j) * 2 * F + F + f];
                    }
                  });
  const double* mv = t.val(mid);
  const double* zv = t.val(zid);
  double* y = t.mut(id);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < K; ++j) {
      double* row = y + static_cast<size_t>(i * K + j) * 2 * F;
      std::memcpy(row, mv + static_cast<size_t>(i) * F, F * sizeof(double));
      std::memcpy(row + F, zv + static_cast<size_t>(j) * F, F * sizeof(double));
    }
  return t.handle(id);
}

Tensor mix_rows(const Tensor& s, const Tensor& v) {
  check_same_tape(s, v);
  check(s.cols() == v.rows(), "mix_rows: inner dims");
  Tape& t = *s.tape();
  const int M = s.rows(), K = s.cols(), F = v.cols();
  int sid = s.id(), vid = v.id();
  int id = t.push(M, F, t.needs(sid) || t.needs(vid),
                  [sid, vid, M, K, F](Tape& tp, int self) {
                    const double* g = tp.node(self).grad.data();
                    const double* sv = tp.val(sid);
                    const double* vv = tp.val(vid);
                    if (tp.needs(sid)) {
                      double* gs = tp.gbuf(sid);
                      for (int i = 0; i < M; ++i)
                        for (int k = 0; k < K; ++k) {
                          double acc = 0.0;
                          for (int f = 0; f < F; ++f)
                            acc += g[i * F + f] * vv[k * F + f];
                          gs[i * K + k] += acc;
                        }
                    }
                    if (tp.needs(vid)) {
                      double* gv = tp.gbuf(vid);
                      for (int k = 0; k < K; ++k)
                        for (int i = 0; i < M; ++i)
                          for (int f = 0; f < F; ++f)
                            gv[k * F + f] += sv[i * K + k] * g[i * F + f];
                    }
                  });
  const double* sv = t.val(sid);
  const double* vv = t.val(vid);
  double* y = t.mut(id);
  std::vector<double> terms(K);
  for (int i = 0; i < M; ++i)
    for (int f = 0; f < F; ++f) {
      for (int k = 0; k < K; ++k) terms[k] = sv[i * K + k] * vv[k * F + f];
      y[i * F + f] = stable_sum(terms);
    }
  return t.handle(id);
}

Tensor compose_mix(const Tensor& w, const Tensor& comps, int chans) {
  check_same_tape(w, comps);
  const int P = w.rows(), K = w.cols();
  check(comps.rows() == K && comps.cols() == P * chans,
        "compose_mix: comps must be [K, P*chans]");
  Tape& t = *w.tape();
  int wid = w.id(), cid = comps.id();
  int id = t.push(P, chans, t.needs(wid) || t.needs(cid),
                  [wid, cid, P, K, chans](Tape& tp, int self) {
                    const double* g = tp.node(self).grad.data();
                    const double* wv = tp.val(wid);
                    const double* cv = tp.val(cid);
                    if (tp.needs(wid)) {
                      double* gw = tp.gbuf(wid);
                      for (int p = 0; p < P; ++p)
                        for (int k = 0; k < K; ++k) {
                          double acc = 0.0;
                          for (int ch = 0; ch < chans; ++ch)
                            acc += g[p * chans + ch] *
                                   cv[static_cast<size_t>(k) * P * chans + p * chans + ch];
                          gw[p * K + k] += acc;
                        }
                    }
                    if (tp.needs(cid)) {
                      double* gc = tp.gbuf(cid);
                      for (int k = 0; k < K; ++k)
                        for (int p = 0; p < P; ++p)
                          for (int ch = 0; ch < chans; ++ch)
                            gc[static_cast<size_t>(k) * P * chans + p * chans + ch] +=
                                wv[p * K + k] * g[p * chans + ch];
                    }
                  });
  const double* wv = t.val(wid);
  const double* cv = t.val(cid);
  double* y = t.mut(id);
  std::vector<double> terms(K);
  for (int p = 0; p < P; ++p)
    for (int ch = 0; ch < chans; ++ch) {
      for (int k = 0; k < K; ++k)
        terms[k] = wv[p * K + k] *
                   cv[static_cast<size_t>(k) * P * chans + p * chans + ch];
      y[p * chans + ch] = stable_sum(terms);
    }
  return t.handle(id);
}

Tensor assemble_rows(const Tensor& z, const Tensor& prev,
                     const std::vector<int>& src) {
  check_same_tape(z, prev);
  check(z.cols() == prev.cols(), "assemble_rows: feature dims differ");
  const int M = prev.rows(), F = prev.cols(), K = z.rows();
  check(static_cast<int>(src.size()) == M, "assemble_rows: src size");
  for (int s : src) check(s < K, "assemble_rows: src out of range");
  Tape& t = *z.tape();
  int zid = z.id(), pid = prev.id();
  int id = t.push(M, F, t.needs(zid) || t.needs(pid),
                  [zid, pid, src, M, F](Tape& tp, int self) {
                    const double* g = tp.node(self).grad.data();
                    for (int i = 0; i < M; ++i) {
                      if (src[i] >= 0) {
                        if (!tp.needs(zid)) continue;
                        double* gz = tp.gbuf(zid);
                        for (int f = 0; f < F; ++f)
                          gz[src[i] * F + f] += g[i * F + f];
                      } else {
                        if (!tp.needs(pid)) continue;
                        double* gp = tp.gbuf(pid);
                        for (int f = 0; f < F; ++f) gp[i * F + f] += g[i * F + f];
                      }
                    }
                  });
  const double* zv = t.val(zid);
  const double* pv = t.val(pid);
  double* y = t.mut(id);
  for (int i = 0; i < M; ++i) {
    const double* srcp = src[i] >= 0 ? zv + static_cast<size_t>(src[i]) * F
                                     : pv + static_cast<size_t>(i) * F;
    std::memcpy(y + static_cast<size_t>(i) * F, srcp, F * sizeof(double));
  }
  return t.handle(id);
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  for (int i : idx) check(0 <= i && i < r, "gather_rows: index out of range");
  const int n = static_cast<int>(idx.size());
  int aid = a.id();
  int id = t.push(n, c, t.needs(aid), [aid, idx, c](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < c; ++j) ga[idx[i] * c + j] += g[i * c + j];
  });
  const double* x = t.val(aid);
  double* y = t.mut(id);
  for (int i = 0; i < n; ++i)
    std::memcpy(y + static_cast<size_t>(i) * c, x + static_cast<size_t>(idx[i]) * c,
                c * sizeof(double));
  return t.handle(id);
}

Tensor pixel_sq_err(const Tensor& a, const Tensor& b, int chans) {
  check_same_tape(a, b);
  const int K = a.rows(), W = a.cols();
  check(b.rows() == 1 && b.cols() == W, "pixel_sq_err: b must be [1, cols(a)]");
  check(W % chans == 0, "pixel_sq_err: cols not divisible by chans");
  const int P = W / chans;
  Tape& t = *a.tape();
  int aid = a.id(), bid = b.id();
  int id = t.push(K, P, t.needs(aid) || t.needs(bid),
                  [aid, bid, K, P, chans](Tape& tp, int self) {
                    const double* g = tp.node(self).grad.data();
                    const double* av = tp.val(aid);
                    const double* bv = tp.val(bid);
                    const int W2 = P * chans;
                    if (tp.needs(aid)) {
                      double* ga = tp.gbuf(aid);
                      for (int k = 0; k < K; ++k)
                        for (int p = 0; p < P; ++p)
                          for (int ch = 0; ch < chans; ++ch) {
                            const int c = p * chans + ch;
                            ga[k * W2 + c] +=
                                2.0 * (av[k * W2 + c] - bv[c]) * g[k * P + p];
                          }
                    }
                    if (tp.needs(bid)) {
                      double* gb = tp.gbuf(bid);
                      for (int k = 0; k < K; ++k)
                        for (int p = 0; p < P; ++p)
                          for (int ch = 0; ch < chans; ++ch) {
                            const int c = p * chans + ch;
                            gb[c] -= 2.0 * (av[k * W2 + c] - bv[c]) * g[k * P + p];
                          }
                    }
                  });
  const double* av = t.val(aid);
  const double* bv = t.val(bid);
  double* y = t.mut(id);
  for (int k = 0; k < K; ++k)
    for (int p = 0; p < P; ++p) {
      double s = 0.0;
      for (int ch = 0; ch < chans; ++ch) {
        const double d = av[k * W + p * chans + ch] - bv[p * chans + ch];
        s += d * d;
      }
      y[k * P + p] = s;
    }
  return t.handle(id);
}

Tensor scale_rows(const Tensor& a, int r0, int r1, double s) {
  Tape& t = *a.tape();
  const int r = a.rows(), c = a.cols();
  check(0 <= r0 && r0 <= r1 && r1 <= r, "scale_rows: bad range");
  int aid = a.id();
  int id = t.push(r, c, t.needs(aid), [aid, r0, r1, s, r, c](Tape& tp, int self) {
    if (!tp.needs(aid)) return;
    const double* g = tp.node(self).grad.data();
    double* ga = tp.gbuf(aid);
    for (int i = 0; i < r; ++i) {
      const double f = (i >= r0 && i < r1) ? s : 1.0;
      for (int j = 0; j < c; ++j) ga[i * c + j] += f * g[i * c + j];
    }
  });
  const double* x = t.val(aid);
  double* y = t.mut(id);
  for (int i = 0; i < r; ++i) {
    const double f = (i >= r0 && i < r1) ? s : 1.0;
    for (int j = 0; j < c; ++j) y[i * c + j] = f * x[i * c + j];
  }
  return t.handle(id);
}

}  // namespace oat
