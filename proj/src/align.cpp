#include "oat/align.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "oat/errors.hpp"

namespace oat {

void AlignConfig::validate() const {
  if (memory_slots < 1) throw std::invalid_argument("memory_slots must be >= 1");
  if (feat < 1) throw std::invalid_argument("feat must be >= 1");
  if (hidden < 1) throw std::invalid_argument("hidden must be >= 1");
  if (psi < 0.0) throw std::invalid_argument("psi must be >= 0");
}

AlignNet::AlignNet(ParamStore& ps, const AlignConfig& cfg, Rng& rng)
    : ps_(&ps), cfg_(cfg) {
  cfg_.validate();
  scorer_ = make_or_attach_mlp(
      ps, "align.score", {2 * cfg_.feat, cfg_.hidden, cfg_.hidden, 1}, rng);
  null_logit_ = ps.find("align.null");
  if (null_logit_ < 0) null_logit_ = ps.add("align.null", 1, 1, {0.0});
}

static void check_finite(const Tensor& x, const char* what) {
  const double* v = x.tape()->val(x.id());
  const int n = x.rows() * x.cols();
  for (int i = 0; i < n; ++i)
    if (!std::isfinite(v[i]))
      throw NumericError(std::string(what) + ": non-finite value at index " +
                         std::to_string(i));
}

Tensor AlignNet::adjacency(Tape& t, const Tensor& m, const Tensor& z) const {
  if (m.cols() != cfg_.feat || z.cols() != cfg_.feat)
    throw DataError("adjacency: feature width mismatch");
  check_finite(m, "adjacency memory");
  check_finite(z, "adjacency slots");
  const int rows = m.rows(), k = z.rows();
  Tensor s = scorer_.apply(t, *ps_, pairwise_concat(m, z));  // [M*K, 1]
  Tensor logits = reshape(s, rows, k);
  Tensor null_col = broadcast_row(ps_->leaf(t, null_logit_), rows);  // [M,1]
  Tensor full = softmax_rows(concat_cols({logits, null_col}));
  return slice_cols(full, 0, k);
}

Tensor soft_align(const Tensor& a, const Tensor& z) { return matmul(a, z); }

// Shortest augmenting path assignment on a square min-cost matrix, O(n^3).
// Potentials keep reduced costs nonnegative; each pass augments one row.
static std::vector<int> solve_square_min(const std::vector<double>& a, int n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

Assignment hungarian_assign(const std::vector<double>& scores, int m, int k,
                            const std::vector<uint8_t>& empty_flags) {
  if (static_cast<int>(scores.size()) != m * k)
    throw std::invalid_argument("hungarian: score matrix size mismatch");
  if (static_cast<int>(empty_flags.size()) != k)
    throw std::invalid_argument("hungarian: flag count mismatch");
  for (double s : scores)
    if (!std::isfinite(s)) throw NumericError("hungarian: non-finite score");

  Assignment out;
  out.memory_to_obs.assign(m, -1);
  out.obs_to_memory.assign(k, -1);

  std::vector<int> kept;
  for (int j = 0; j < k; ++j)
    if (!empty_flags[j]) kept.push_back(j);
  const int kk = static_cast<int>(kept.size());
  if (kk == 0) return out;
  if (kk > m)
    throw std::invalid_argument("hungarian: more occupied slots than rows");

  double lo = std::numeric_limits<double>::infinity();
  for (int i = 0; i < m; ++i)
    for (int j : kept) lo = std::min(lo, scores[i * k + j]);
  const double pad = lo - 1.0;  // any value below the real minimum works

  // Maximize by minimizing the negated scores; pad columns make it square.
  std::vector<double> cost(static_cast<size_t>(m) * m, -pad);
  for (int i = 0; i < m; ++i)
    for (int jj = 0; jj < kk; ++jj)
      cost[static_cast<size_t>(i) * m + jj] = -scores[i * k + kept[jj]];
  const std::vector<int> row_to_col = solve_square_min(cost, m);

  for (int i = 0; i < m; ++i) {
    const int c = row_to_col[i];
    if (c < 0 || c >= kk) continue;  // pad column: row stays unmatched
    const int j = kept[c];
    out.memory_to_obs[i] = j;
    out.obs_to_memory[j] = i;
    out.total += scores[i * k + j];
  }
  return out;
}

Assignment hungarian_assign(const Tensor& scores,
                            const std::vector<uint8_t>& empty_flags) {
  const auto v = scores.values();
  return hungarian_assign(std::vector<double>(v.begin(), v.end()),
                          scores.rows(), scores.cols(), empty_flags);
}

HardAligned hard_align(const Tensor& a, const Tensor& z,
                       const std::vector<uint8_t>& empty_flags,
                       const Tensor& prev) {
  if (prev.rows() != a.rows() || prev.cols() != z.cols())
    throw DataError("hard_align: prev has the wrong shape");
  Assignment asg = hungarian_assign(a, empty_flags);
  return {assemble_rows(z, prev, asg.memory_to_obs), std::move(asg)};
}

Tensor alignnet_loss(const std::vector<Tensor>& z_d,
                     const std::vector<Tensor>& z_soft,
                     const std::vector<Tensor>& a_seq, double psi,
                     bool penalty_on_memory_rows) {
  if (psi < 0.0) throw std::invalid_argument("alignnet_loss: psi must be >= 0");
  if (z_d.size() != z_soft.size() || z_d.size() != a_seq.size())
    throw std::invalid_argument("alignnet_loss: sequence lengths differ");
  if (z_d.empty()) throw std::invalid_argument("alignnet_loss: empty sequence");

  Tape& t = *z_d[0].tape();
  Tensor total = t.scalar_const(0.0);
  for (size_t i = 0; i < z_d.size(); ++i) {
    Tensor diff = sub(z_d[i], z_soft[i]);
    Tensor term = sum(mul(diff, diff));
    term = add(term, scale(sum(xlogx(a_seq[i])), -psi));
    Tensor mass = penalty_on_memory_rows
                      ? transpose(row_sum(a_seq[i]))   // [1,M]
                      : col_sum(a_seq[i]);             // [1,K]
    term = add(term, sum(relu(add_scalar(mass, -1.0))));
    total = add(total, term);
  }
  return total;
}

Tensor init_memory(Tape& t, int m, int f) {
  if (m < 1 || f < 1) throw std::invalid_argument("init_memory: bad shape");
  return t.zeros(m, f);
}

}  // namespace oat
