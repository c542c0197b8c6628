#include "oat/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "oat/align.hpp"
#include "oat/codec.hpp"
#include "oat/training.hpp"
#include "oat/transition.hpp"
#include "oat/world.hpp"

namespace oat {

namespace {

std::vector<double> randvec(size_t n, Rng& rng, double lo = -0.8,
                            double hi = 0.8) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

std::vector<std::vector<double>> snapshot(const ParamStore& ps) {
  std::vector<std::vector<double>> theta;
  for (int i = 0; i < ps.count(); ++i) theta.push_back(ps.values(i));
  return theta;
}

// One fd_check at a fresh random parameter point. The build functions
// write theta back into the store before every forward pass, so the probe
// perturbations reach the model.
FdResult codec_point(Rng rng) {
  CodecConfig cc;
  cc.window_w = 6;
  cc.window_h = 6;
  cc.k_slots = 3;
  cc.feat = 5;
  cc.enc_hidden = 10;
  cc.dec_hidden = 10;
  ParamStore ps;
  SlotCodec codec(ps, cc, rng);
  const int p = cc.pixels();
  std::vector<float> frame(3 * p), masks(static_cast<size_t>(cc.k_slots) * p);
  for (auto& x : frame) x = static_cast<float>(rng.uniform(0.0, 1.0));
  for (auto& x : masks) x = static_cast<float>(rng.uniform_int(0, 1));
  auto theta = snapshot(ps);
  auto build = [&](Tape& t, const std::vector<std::vector<double>>& th) {
    for (int i = 0; i < ps.count(); ++i)
      std::copy(th[i].begin(), th[i].end(), ps.values(i).begin());
    const Tensor z = codec.encode(t, frame.data(), masks);
    return codec.mixture_loss(t, codec.decode(t, z), frame.data());
  };
  return fd_check(build, theta, 1, rng);
}

FdResult align_point(Rng rng) {
  AlignConfig ac;
  // Five memory rows over three slots put random-init column sums near 5/4,
  // keeping the column hinge active but clear of its kink; four rows would
  // pin every random point's column sums exactly at the hinge.
  ac.memory_slots = 5;
  ac.feat = 5;
  ac.hidden = 8;
  ac.psi = 0.01;
  ParamStore ps;
  AlignNet net(ps, ac, rng);
  const int k = 3;
  const int m_id = ps.add("t.m", ac.memory_slots, ac.feat,
                          randvec(static_cast<size_t>(ac.memory_slots) * ac.feat, rng));
  const int z_id =
      ps.add("t.z", k, ac.feat, randvec(static_cast<size_t>(k) * ac.feat, rng));
  const int zd_id = ps.add("t.zd", ac.memory_slots, ac.feat,
                           randvec(static_cast<size_t>(ac.memory_slots) * ac.feat, rng));
  auto theta = snapshot(ps);
  auto build = [&](Tape& t, const std::vector<std::vector<double>>& th) {
    for (int i = 0; i < ps.count(); ++i)
      std::copy(th[i].begin(), th[i].end(), ps.values(i).begin());
    const Tensor a = net.adjacency(t, ps.leaf(t, m_id), ps.leaf(t, z_id));
    const Tensor zs = soft_align(a, ps.leaf(t, z_id));
    return alignnet_loss({ps.leaf(t, zd_id)}, {zs}, {a}, ac.psi);
  };
  return fd_check(build, theta, 1, rng);
}

FdResult transformer_point(Rng rng) {
  ParamStore ps;
  TransformerBlock tb = TransformerBlock::make_or_attach(ps, "tb", 6, 2, 8, rng);
  const int x_id = ps.add("t.x", 4, 6, randvec(24, rng));
  auto theta = snapshot(ps);
  auto build = [&](Tape& t, const std::vector<std::vector<double>>& th) {
    for (int i = 0; i < ps.count(); ++i)
      std::copy(th[i].begin(), th[i].end(), ps.values(i).begin());
    const Tensor y = tb.apply(t, ps, ps.leaf(t, x_id));
    return add(sum(mul(y, y)), scale(sum(y), 0.5));
  };
  return fd_check(build, theta, 1, rng);
}

FdResult slot_lstm_point(Rng rng) {
  ParamStore ps;
  SlotLstm cell = SlotLstm::make_or_attach(ps, "sl", 5, 6, rng);
  const int rows = 3;
  const int x_id = ps.add("t.x", rows, 5, randvec(rows * 5, rng));
  const int h_id = ps.add("t.h", rows, 6, randvec(rows * 6, rng, -0.5, 0.5));
  const int c_id = ps.add("t.c", rows, 6, randvec(rows * 6, rng, -0.5, 0.5));
  auto theta = snapshot(ps);
  auto build = [&](Tape& t, const std::vector<std::vector<double>>& th) {
    for (int i = 0; i < ps.count(); ++i)
      std::copy(th[i].begin(), th[i].end(), ps.values(i).begin());
    HiddenState s{ps.leaf(t, h_id), ps.leaf(t, c_id)};
    auto [out, ns] = cell.step(t, ps, ps.leaf(t, x_id), s);
    return add(sum(mul(out, out)), scale(sum(mul(ns.c, ns.c)), 0.5));
  };
  return fd_check(build, theta, 1, rng);
}

FdResult transition_point(Rng rng) {
  CoreConfig cfg;
  cfg.variant = CoreVariant::kTransformerSlotLstm;
  cfg.feat = 4;
  cfg.action = 3;
  cfg.h_rec = 6;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.ffn_hidden = 6;
  ParamStore ps;
  TransitionCore core(ps, cfg, rng);
  // The output layer starts at zero, which blocks every gradient path.
  for (int i = 0; i < ps.count(); ++i)
    if (ps.name(i).rfind("core.head", 0) == 0)
      for (auto& v : ps.values(i)) v = rng.uniform(-0.3, 0.3);
  const int rows = 3;
  const size_t n = static_cast<size_t>(rows) * cfg.feat;
  const int z_id = ps.add("t.z", rows, cfg.feat, randvec(n, rng));
  const int m_id = ps.add("t.m", rows, cfg.feat, randvec(n, rng));
  const std::vector<double> tgt1 = randvec(n, rng), tgt2 = randvec(n, rng);
  auto theta = snapshot(ps);
  auto build = [&](Tape& t, const std::vector<std::vector<double>>& th) {
    for (int i = 0; i < ps.count(); ++i)
      std::copy(th[i].begin(), th[i].end(), ps.values(i).begin());
    const Tensor act = t.constant(1, cfg.action, {0.0, 1.0, 0.0});
    const TransitionStep s1 = core.step(t, ps.leaf(t, z_id), act,
                                        core.initial_state(t, rows),
                                        ps.leaf(t, m_id));
    const TransitionStep s2 = core.step(t, s1.z_next, act, s1.state, s1.m_next);
    return transition_loss({s1.z_next, s2.z_next},
                           {t.constant(rows, cfg.feat, tgt1),
                            t.constant(rows, cfg.feat, tgt2)});
  };
  return fd_check(build, theta, 1, rng);
}

FdResult assignment_point(Rng rng) {
  // Rows far apart keep the matching stable under the probe steps, which
  // is where the piecewise loss is differentiable.
  const int m = 4, k = 3, f = 3;
  std::vector<double> tgt(static_cast<size_t>(k) * f);
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < f; ++c)
      tgt[static_cast<size_t>(r) * f + c] = 10.0 * r + rng.uniform(-0.5, 0.5);
  std::vector<double> zd(static_cast<size_t>(m) * f);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < f; ++c)
      zd[static_cast<size_t>(r) * f + c] =
          10.0 * ((r + 1) % m) + rng.uniform(-0.5, 0.5);
  ParamStore ps;
  const int zd_id = ps.add("t.zd", m, f, zd);
  auto theta = snapshot(ps);
  std::vector<double> tgt_copy = tgt;
  auto build = [&](Tape& t, const std::vector<std::vector<double>>& th) {
    for (int i = 0; i < ps.count(); ++i)
      std::copy(th[i].begin(), th[i].end(), ps.values(i).begin());
    return hungarian_min_assignment_loss(ps.leaf(t, zd_id),
                                         t.constant(k, f, tgt_copy));
  };
  return fd_check(build, theta, 1, rng);
}

FdResult pixel_point(Rng rng) {
  WorldConfig wc;
  wc.arena_w = 32;
  wc.arena_h = 32;
  wc.window_w = 8;
  wc.window_h = 8;
  wc.n_obj = 2;
  wc.pan_step = 2;
  wc.episode_len = 6;
  wc.sprite_min = 3;
  wc.sprite_max = 5;
  const Trajectory tr = generate_trajectory(wc, rng.u64());
  CodecConfig cc;
  cc.window_w = 8;
  cc.window_h = 8;
  cc.k_slots = 3;
  cc.feat = 5;
  cc.enc_hidden = 10;
  cc.dec_hidden = 10;
  ParamStore ps;
  SlotCodec codec(ps, cc, rng);
  const int z_id = ps.add("t.z", cc.k_slots, cc.feat,
                          randvec(static_cast<size_t>(cc.k_slots) * cc.feat, rng));
  auto theta = snapshot(ps);
  auto build = [&](Tape& t, const std::vector<std::vector<double>>& th) {
    for (int i = 0; i < ps.count(); ++i)
      std::copy(th[i].begin(), th[i].end(), ps.values(i).begin());
    return pixel_level_loss(t, codec, {ps.leaf(t, z_id)}, tr, 1);
  };
  return fd_check(build, theta, 1, rng);
}

}  // namespace

std::vector<GradSuiteRow> gradcheck_suite(int points, uint64_t seed,
                                          double tol) {
  if (points < 1)
    throw std::invalid_argument("gradcheck_suite: points must be >= 1");
  struct Entry {
    const char* name;
    FdResult (*run)(Rng);
  };
  const Entry entries[] = {
      {"codec-mixture", codec_point},
      {"align-adjacency", align_point},
      {"transformer-block", transformer_point},
      {"slot-lstm", slot_lstm_point},
      {"transition-core", transition_point},
      {"assignment-floor", assignment_point},
      {"pixel-decode", pixel_point},
  };
  const Rng root(seed);
  std::vector<GradSuiteRow> rows;
  for (const Entry& e : entries) {
    GradSuiteRow row;
    row.module = e.name;
    row.points = points;
    for (int p = 0; p < points; ++p) {
      const FdResult r = e.run(root.stream(e.name, static_cast<uint64_t>(p)));
      row.checked += r.checked;
      row.skipped += r.skipped;
      if (r.max_rel >= row.worst.max_rel) row.worst = r;
    }
    row.pass = row.worst.max_rel < tol;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace oat
