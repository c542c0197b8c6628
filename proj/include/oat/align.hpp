#pragma once

#include <cstdint>
#include <vector>

#include "oat/nn.hpp"
#include "oat/rng.hpp"
#include "oat/tensor.hpp"

namespace oat {

// Memory-based slot alignment. A scorer rates every (memory row, observed
// slot) pair; row softmax over the K slots plus a learned null option gives
// the adjacency. Soft alignment mixes slots by adjacency weight; hard
// alignment routes each matched slot to one memory row via the Hungarian
// solver and is the path that defines object identity.

struct AlignConfig {
  int memory_slots = 9;  // M
  int feat = 16;         // F
  int hidden = 64;       // scorer MLP, two hidden layers
  double psi = 0.01;     // entropy weight in the alignment loss

  void validate() const;  // throws std::invalid_argument
};

// Injective partial match from memory rows to observed slots.
struct Assignment {
  std::vector<int> memory_to_obs;  // size M, -1 when unmatched
  std::vector<int> obs_to_memory;  // size K, -1 when unmatched or excluded
  double total = 0.0;              // sum of matched scores
};

class AlignNet {
 public:
  // Attaches to params already present in the store (by name), otherwise
  // creates them. The null logit starts at zero.
  AlignNet(ParamStore& ps, const AlignConfig& cfg, Rng& rng);

  // m [M,F], z [K,F] -> A [M,K]; rows are softmax over K slots plus the null
  // logit with the null column dropped, so each row sums to at most one.
  Tensor adjacency(Tape& t, const Tensor& m, const Tensor& z) const;

  const AlignConfig& config() const { return cfg_; }

 private:
  ParamStore* ps_;
  AlignConfig cfg_;
  Mlp scorer_;
  int null_logit_ = -1;  // param id
};

// A [M,K] times z [K,F]; fully differentiable.
Tensor soft_align(const Tensor& a, const Tensor& z);

// Maximizes the total matched score over injective matchings. Flagged
// columns are excluded up front; the matrix is padded square with a score
// below the real minimum, and pad matches come back as unmatched. Requires
// (kept columns) <= m. Non-finite scores are rejected.
Assignment hungarian_assign(const std::vector<double>& scores, int m, int k,
                            const std::vector<uint8_t>& empty_flags);
Assignment hungarian_assign(const Tensor& scores,
                            const std::vector<uint8_t>& empty_flags);

// Matched memory rows take their slot's features; unmatched rows carry
// `prev` forward. The match itself is not differentiated; gradients flow
// into the routed z and prev rows only.
struct HardAligned {
  Tensor za;  // [M,F]
  Assignment asg;
};
HardAligned hard_align(const Tensor& a, const Tensor& z,
                       const std::vector<uint8_t>& empty_flags,
                       const Tensor& prev);

// Per step: squared error between decoded-from-memory and soft-aligned
// features, psi-weighted adjacency row entropy, and a hinge on column sums
// above one. `penalty_on_memory_rows` switches the hinge to memory-row sums
// (the alternate reading of which axis "double-books" an object).
Tensor alignnet_loss(const std::vector<Tensor>& z_d,
                     const std::vector<Tensor>& z_soft,
                     const std::vector<Tensor>& a_seq, double psi,
                     bool penalty_on_memory_rows = false);

Tensor init_memory(Tape& t, int m, int f);  // all zeros

}  // namespace oat
