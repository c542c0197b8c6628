#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "oat/align.hpp"
#include "oat/codec.hpp"
#include "oat/tensor.hpp"
#include "oat/transition.hpp"
#include "oat/world.hpp"

namespace oat {

// Episode-level model plumbing: per-step slot features flow through an
// optional per-step order scramble and the aligner into the transition core.
// Predictions z_d exist for steps 1..L with L = t_enc + t_unroll: steps
// below t_enc consume the hard-aligned observation of their step, later
// steps consume the previous prediction. The memory advances by the core's
// delta at every step, and observation-side targets (soft/hard alignments)
// are produced for all steps 1..L so losses and metrics can use them.

// Canonical per-step slot features [K,F] and empty flags for one episode.
// Backed either by a live codec encode (gradients flow to the codec) or by
// precomputed values (frozen codec).
struct EpisodeSource {
  std::function<Tensor(Tape&, int step)> slots;
  std::function<std::vector<uint8_t>(int step)> flags;
  const Trajectory* traj = nullptr;  // actions, frames, length
  int k_slots = 0;
};

EpisodeSource encoding_source(const SlotCodec& codec, const Trajectory& tr);
// values[t] holds K*F doubles; flags[t] holds K bytes.
EpisodeSource precomputed_source(const std::vector<std::vector<double>>& values,
                                 const std::vector<std::vector<uint8_t>>& flags,
                                 const Trajectory& tr, int k, int f);

struct RolloutConfig {
  int t_enc = 4;
  int t_unroll = 6;
  int memory_slots = 9;       // M >= K; unaligned runs usually set M = K
  bool aligned = true;        // false: skip the aligner, zero-pad slots to M
  bool shuffle = true;        // per-step slot order scramble
  uint64_t shuffle_seed = 0;
  bool want_targets = true;   // produce z_soft/z_hard/adj for steps 1..L
};

struct RolloutResult {
  // Indexed by step 0..L; entries outside a sequence's range are undefined
  // tensors. z_d[t] is defined for t >= 1.
  std::vector<Tensor> z_d;
  std::vector<Tensor> z_canon;  // observation slots in source order [K,F]
  std::vector<Tensor> z_obs;    // scrambled observation slots [K,F]
  std::vector<Tensor> z_soft;  // aligned mode only
  std::vector<Tensor> z_hard;  // aligned: carry-forward targets; else padded obs
  std::vector<Tensor> adj;     // aligned mode only
  std::vector<Tensor> memory;  // m_t before the step-t update; memory[0] is zero
  std::vector<Assignment> assignments;      // aligned mode only
  std::vector<std::vector<uint8_t>> flags;  // shuffled per-step empty flags
  std::vector<std::vector<int>> perms;      // applied slot orders
  int t_enc = 0, t_unroll = 0;
};

RolloutResult rollout(Tape& t, const EpisodeSource& src, const AlignNet* align,
                      const TransitionCore& core, const RolloutConfig& rc);

}  // namespace oat
