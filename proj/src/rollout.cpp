#include "oat/rollout.hpp"

#include <stdexcept>
#include <string>

#include "oat/errors.hpp"

namespace oat {

EpisodeSource encoding_source(const SlotCodec& codec, const Trajectory& tr) {
  EpisodeSource src;
  src.traj = &tr;
  src.k_slots = tr.n_obj + 1;
  const SlotCodec* c = &codec;
  const Trajectory* trp = &tr;
  src.slots = [c, trp](Tape& t, int step) {
    return c->encode(t, trp->frame(step), slot_mask_stack(*trp, step));
  };
  const double thr = codec.config().empty_threshold();
  const int k = src.k_slots, p = tr.w * tr.h;
  src.flags = [trp, thr, k, p](int step) {
    auto stack = slot_mask_stack(*trp, step);
    return empty_slot_flags(stack.data(), k, p, thr);
  };
  return src;
}

EpisodeSource precomputed_source(const std::vector<std::vector<double>>& values,
                                 const std::vector<std::vector<uint8_t>>& flags,
                                 const Trajectory& tr, int k, int f) {
  if (static_cast<int>(values.size()) < tr.t ||
      static_cast<int>(flags.size()) < tr.t)
    throw DataError("precomputed source shorter than the episode");
  for (int s = 0; s < tr.t; ++s)
    if (static_cast<int>(values[s].size()) != k * f ||
        static_cast<int>(flags[s].size()) != k)
      throw DataError("precomputed slot block has the wrong shape at step " +
                      std::to_string(s));
  EpisodeSource src;
  src.traj = &tr;
  src.k_slots = k;
  // Copies keep the source self-contained; a per-episode block is tiny.
  auto vals = values;
  auto flg = flags;
  src.slots = [vals, k, f](Tape& t, int step) {
    return t.constant(k, f, vals[static_cast<size_t>(step)]);
  };
  src.flags = [flg](int step) { return flg[static_cast<size_t>(step)]; };
  return src;
}

RolloutResult rollout(Tape& t, const EpisodeSource& src, const AlignNet* align,
                      const TransitionCore& core, const RolloutConfig& rc) {
  if (rc.t_enc < 1) throw std::invalid_argument("rollout: t_enc must be >= 1");
  if (rc.t_unroll < 0) throw std::invalid_argument("rollout: t_unroll must be >= 0");
  if (rc.aligned && align == nullptr)
    throw std::invalid_argument("rollout: aligned mode needs an aligner");
  const int k = src.k_slots, f = core.config().feat;
  const int m_rows = rc.memory_slots;
  if (m_rows < k)
    throw std::invalid_argument("rollout: memory_slots below the slot count");
  const int L = rc.t_enc + rc.t_unroll;
  const Trajectory& tr = *src.traj;
  const int need_steps = rc.want_targets ? L + 1 : L;
  if (tr.t < need_steps)
    throw DataError("rollout: episode has " + std::to_string(tr.t) +
                    " steps, needs " + std::to_string(need_steps));

  RolloutResult r;
  r.t_enc = rc.t_enc;
  r.t_unroll = rc.t_unroll;
  r.z_d.resize(L + 1);
  r.z_canon.resize(L + 1);
  r.z_obs.resize(L + 1);
  r.z_soft.resize(L + 1);
  r.z_hard.resize(L + 1);
  r.adj.resize(L + 1);
  r.memory.resize(L + 1);
  r.assignments.resize(L + 1);
  r.flags.resize(L + 1);
  r.perms.resize(L + 1);

  const auto shuffles = slot_shuffle(L + 1, k, Rng(rc.shuffle_seed));
  Tensor m = init_memory(t, m_rows, f);
  r.memory[0] = m;
  HiddenState h = core.initial_state(t, m_rows);
  Tensor prev_za = t.zeros(m_rows, f);

  for (int step = 0; step <= L; ++step) {
    const bool need_obs = step < rc.t_enc || (rc.want_targets && step >= 1);
    Tensor aligned_obs;
    if (need_obs) {
      Tensor zc = src.slots(t, step);
      if (zc.rows() != k || zc.cols() != f)
        throw DataError("rollout: slot block shape mismatch at step " +
                        std::to_string(step));
      std::vector<int> perm(k);
      for (int i = 0; i < k; ++i) perm[i] = rc.shuffle ? shuffles[step][i] : i;
      const auto canon_flags = src.flags(step);
      std::vector<uint8_t> flg(k);
      for (int i = 0; i < k; ++i) flg[i] = canon_flags[perm[i]];
      Tensor z = rc.shuffle ? gather_rows(zc, perm) : zc;

      r.z_canon[step] = zc;
      r.z_obs[step] = z;
      r.flags[step] = flg;
      r.perms[step] = std::move(perm);

      if (rc.aligned) {
        Tensor a = align->adjacency(t, m, z);
        r.adj[step] = a;
        r.z_soft[step] = soft_align(a, z);
        HardAligned ha = hard_align(a, z, flg, prev_za);
        prev_za = ha.za;
        r.z_hard[step] = ha.za;
        r.assignments[step] = std::move(ha.asg);
        aligned_obs = ha.za;
      } else {
        Tensor zp = m_rows == k
                        ? z
                        : concat_rows({z, t.zeros(m_rows - k, f)});
        r.z_hard[step] = zp;
        aligned_obs = zp;
      }
    }
    if (step == L) break;

    Tensor input = step < rc.t_enc ? aligned_obs : r.z_d[step];
    Tensor act = t.constant(1, tr.a, tr.action(step));
    TransitionStep out = core.step(t, input, act, h, m);
    r.z_d[step + 1] = out.z_next;
    m = out.m_next;
    h = out.state;
    r.memory[step + 1] = m;
  }
  return r;
}

}  // namespace oat
