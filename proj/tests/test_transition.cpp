#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "oat/errors.hpp"
#include "oat/gradcheck.hpp"
#include "oat/transition.hpp"

using namespace oat;

namespace {

std::vector<double> randvec(size_t n, Rng& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

std::vector<double> permute_rows(const std::vector<double>& v, int rows, int cols,
                                 const std::vector<int>& perm) {
  std::vector<double> out(v.size());
  for (int i = 0; i < rows; ++i)
    std::copy_n(v.begin() + static_cast<size_t>(perm[i]) * cols, cols,
                out.begin() + static_cast<size_t>(i) * cols);
  return out;
}

bool rows_match_permuted(const Tensor& base, const Tensor& permuted,
                         const std::vector<int>& perm) {
  const int c = base.cols();
  for (size_t i = 0; i < perm.size(); ++i)
    if (std::memcmp(base.values().data() + static_cast<size_t>(perm[i]) * c,
                    permuted.values().data() + i * c, sizeof(double) * c) != 0)
      return false;
  return true;
}

CoreConfig small_core(CoreVariant v, bool memory_input = false) {
  CoreConfig c;
  c.variant = v;
  c.feat = 4;
  c.action = 3;
  c.h_rec = 6;
  c.d_model = 8;
  c.heads = 2;
  c.layers = 2;
  c.ffn_hidden = 6;
  c.memory_input = memory_input;
  return c;
}

}  // namespace

TEST_CASE("slot lstm shares weights across rows with no cross-slot flow") {
  ParamStore ps;
  Rng rng(61);
  SlotLstm lstm = SlotLstm::make_or_attach(ps, "l", 5, 4, rng);
  Tape t(false);
  const int m = 3;
  auto xv = randvec(static_cast<size_t>(m) * 5, rng);
  std::copy_n(xv.begin(), 5, xv.begin() + 5);  // rows 0 and 1 identical
  HiddenState s{t.zeros(m, 4), t.zeros(m, 4)};
  auto [h1, s1] = lstm.step(t, ps, t.constant(m, 5, xv), s);
  CHECK(std::memcmp(h1.values().data(), h1.values().data() + 4,
                    4 * sizeof(double)) == 0);

  // changing row 2's input must leave rows 0 and 1 untouched
  auto xv2 = xv;
  for (int c = 0; c < 5; ++c) xv2[static_cast<size_t>(2) * 5 + c] += 0.7;
  auto [h2, s2] = lstm.step(t, ps, t.constant(m, 5, xv2), s);
  CHECK(std::memcmp(h1.values().data(), h2.values().data(),
                    2 * 4 * sizeof(double)) == 0);
  CHECK(std::memcmp(h1.values().data() + 8, h2.values().data() + 8,
                    4 * sizeof(double)) != 0);
}

TEST_CASE("zeroed lstm weights give zero outputs") {
  ParamStore ps;
  Rng rng(62);
  SlotLstm lstm = SlotLstm::make_or_attach(ps, "l", 3, 4, rng);
  for (int i = 0; i < ps.count(); ++i)
    std::fill(ps.values(i).begin(), ps.values(i).end(), 0.0);
  Tape t(false);
  HiddenState s{t.zeros(2, 4), t.zeros(2, 4)};
  auto [h, ns] = lstm.step(t, ps, t.constant(2, 3, randvec(6, rng)), s);
  for (double v : h.values()) CHECK(v == 0.0);
  for (double v : ns.c.values()) CHECK(v == 0.0);
}

TEST_CASE("every core variant permutes outputs with its inputs bitwise") {
  const std::vector<int> perm = {3, 0, 4, 1, 2};
  const int m = 5;
  for (CoreVariant variant :
       {CoreVariant::kSlotLstm, CoreVariant::kTransformer,
        CoreVariant::kTransformerSlotLstm}) {
    for (bool mem_in : {false, true}) {
      CAPTURE(core_variant_name(variant));
      CAPTURE(mem_in);
      CoreConfig cfg = small_core(variant, mem_in);
      ParamStore ps;
      Rng rng(63);
      TransitionCore core(ps, cfg, rng);

      Tape t(false);
      auto zv = randvec(static_cast<size_t>(m) * cfg.feat, rng);
      auto mv = randvec(static_cast<size_t>(m) * cfg.feat, rng);
      auto hv = randvec(static_cast<size_t>(m) * cfg.h_rec, rng);
      auto cv = randvec(static_cast<size_t>(m) * cfg.h_rec, rng);
      Tensor act = t.constant(1, cfg.action, {0.0, 1.0, 0.0});

      const bool has_state = variant != CoreVariant::kTransformer;
      HiddenState s, sp;
      if (has_state) {
        s = {t.constant(m, cfg.h_rec, hv), t.constant(m, cfg.h_rec, cv)};
        sp = {t.constant(m, cfg.h_rec, permute_rows(hv, m, cfg.h_rec, perm)),
              t.constant(m, cfg.h_rec, permute_rows(cv, m, cfg.h_rec, perm))};
      }
      TransitionStep a = core.step(t, t.constant(m, cfg.feat, zv), act, s,
                                   t.constant(m, cfg.feat, mv));
      TransitionStep b = core.step(
          t, t.constant(m, cfg.feat, permute_rows(zv, m, cfg.feat, perm)), act,
          sp, t.constant(m, cfg.feat, permute_rows(mv, m, cfg.feat, perm)));

      CHECK(rows_match_permuted(a.z_next, b.z_next, perm));
      CHECK(rows_match_permuted(a.m_next, b.m_next, perm));
      CHECK(rows_match_permuted(a.dz, b.dz, perm));
      CHECK(rows_match_permuted(a.dm, b.dm, perm));
      if (has_state) {
        CHECK(rows_match_permuted(a.state.h, b.state.h, perm));
        CHECK(rows_match_permuted(a.state.c, b.state.c, perm));
      }
    }
  }
}

TEST_CASE("a freshly initialized core is the identity transition") {
  for (CoreVariant variant :
       {CoreVariant::kSlotLstm, CoreVariant::kTransformer,
        CoreVariant::kTransformerSlotLstm}) {
    CAPTURE(core_variant_name(variant));
    CoreConfig cfg = small_core(variant);
    ParamStore ps;
    Rng rng(64);
    TransitionCore core(ps, cfg, rng);
    Tape t(false);
    const int m = 4;
    auto zv = randvec(static_cast<size_t>(m) * cfg.feat, rng);
    auto mv = randvec(static_cast<size_t>(m) * cfg.feat, rng);
    Tensor z = t.constant(m, cfg.feat, zv);
    Tensor mem = t.constant(m, cfg.feat, mv);
    Tensor act = t.constant(1, cfg.action, {1.0, 0.0, 0.0});
    TransitionStep out = core.step(t, z, act, core.initial_state(t, m), mem);
    for (double v : out.dz.values()) CHECK(v == 0.0);
    for (double v : out.dm.values()) CHECK(v == 0.0);
    CHECK(std::memcmp(out.z_next.values().data(), zv.data(),
                      zv.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(out.m_next.values().data(), mv.data(),
                      mv.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("attention weight rows sum to one") {
  ParamStore ps;
  Rng rng(65);
  TransformerBlock blk = TransformerBlock::make_or_attach(ps, "b", 8, 2, 6, rng);
  Tape t(false);

  Tensor x = t.constant(5, 8, randvec(40, rng, -2, 2));
  std::vector<Tensor> attn;
  blk.apply(t, ps, x, &attn);
  REQUIRE(attn.size() == 2);
  for (const Tensor& w : attn) {
    REQUIRE(w.rows() == 5);
    REQUIRE(w.cols() == 5);
    for (int i = 0; i < 5; ++i) {
      double s = 0.0;
      for (int j = 0; j < 5; ++j) s += w.values()[static_cast<size_t>(i) * 5 + j];
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }

  // single slot: nothing else to attend to
  std::vector<Tensor> attn1;
  Tensor y = blk.apply(t, ps, t.constant(1, 8, randvec(8, rng)), &attn1);
  CHECK(y.rows() == 1);
  for (const Tensor& w : attn1) CHECK(w.values()[0] == 1.0);
}

TEST_CASE("transformer block rejects non-finite input") {
  ParamStore ps;
  Rng rng(66);
  TransformerBlock blk = TransformerBlock::make_or_attach(ps, "b", 4, 1, 4, rng);
  Tape t(false);
  std::vector<double> v(8, 0.0);
  v[5] = std::nan("");
  CHECK_THROWS_AS(blk.apply(t, ps, t.constant(2, 4, v)), NumericError);
}

TEST_CASE("transition step rejects mismatched shapes") {
  CoreConfig cfg = small_core(CoreVariant::kTransformerSlotLstm);
  ParamStore ps;
  Rng rng(67);
  TransitionCore core(ps, cfg, rng);
  Tape t(false);
  const int m = 3;
  Tensor z = t.zeros(m, cfg.feat);
  Tensor mem = t.zeros(m, cfg.feat);
  HiddenState s = core.initial_state(t, m);
  CHECK_THROWS_AS(core.step(t, z, t.zeros(1, cfg.action + 1), s, mem), DataError);
  CHECK_THROWS_AS(core.step(t, t.zeros(m, cfg.feat + 2),
                            t.zeros(1, cfg.action), s, mem),
                  DataError);
  std::vector<double> bad(static_cast<size_t>(m) * cfg.feat, 0.0);
  bad[2] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(core.step(t, t.constant(m, cfg.feat, bad),
                            t.zeros(1, cfg.action), s, mem),
                  NumericError);
}

TEST_CASE("transition loss closed forms") {
  Tape t(false);
  Rng rng(68);
  const int m = 4, f = 5, steps = 3;
  std::vector<Tensor> za, zd, zd_off, zd_doubled;
  const double delta = 0.3;
  for (int i = 0; i < steps; ++i) {
    auto v = randvec(static_cast<size_t>(m) * f, rng);
    za.push_back(t.constant(m, f, v));
    zd.push_back(t.constant(m, f, v));
    auto off = v;
    for (auto& x : off) x += delta;
    zd_off.push_back(t.constant(m, f, off));
    auto two = v;
    for (auto& x : two) x += 2 * delta;
    zd_doubled.push_back(t.constant(m, f, two));
  }
  CHECK(transition_loss(zd, za).scalar() == 0.0);
  const double want = steps * m * f * delta * delta;
  CHECK(transition_loss(zd_off, za).scalar() ==
        doctest::Approx(want).epsilon(1e-12));
  CHECK(transition_loss(zd_doubled, za).scalar() ==
        doctest::Approx(4 * want).epsilon(1e-12));
  CHECK_THROWS_AS(transition_loss(zd, {za[0]}), std::invalid_argument);
}

TEST_CASE("core gradients pass finite differences") {
  for (CoreVariant variant :
       {CoreVariant::kSlotLstm, CoreVariant::kTransformerSlotLstm}) {
    CAPTURE(core_variant_name(variant));
    CoreConfig cfg = small_core(variant);
    cfg.layers = 1;
    ParamStore ps;
    Rng rng(69);
    TransitionCore core(ps, cfg, rng);
    // the zero head blocks every gradient path; give it signal
    for (int i = 0; i < ps.count(); ++i)
      if (ps.name(i).rfind("core.head", 0) == 0)
        for (auto& v : ps.values(i)) v = rng.uniform(-0.3, 0.3);
    const int m = 3;
    const int z_id = ps.add("t.z", m, cfg.feat, randvec(static_cast<size_t>(m) * cfg.feat, rng));
    const int m_id = ps.add("t.m", m, cfg.feat, randvec(static_cast<size_t>(m) * cfg.feat, rng));

    std::vector<std::vector<double>> theta;
    for (int i = 0; i < ps.count(); ++i) theta.push_back(ps.values(i));
    auto build = [&](Tape& t, const std::vector<std::vector<double>>& th) {
      for (int i = 0; i < ps.count(); ++i)
        std::copy(th[i].begin(), th[i].end(), ps.values(i).begin());
      Tensor act = t.constant(1, cfg.action, {0.0, 0.0, 1.0});
      TransitionStep s1 = core.step(t, ps.leaf(t, z_id), act,
                                    core.initial_state(t, m), ps.leaf(t, m_id));
      TransitionStep s2 = core.step(t, s1.z_next, act, s1.state, s1.m_next);
      Tensor loss = add(sum(s2.z_next), scale(sum(s2.m_next), 0.5));
      return add(loss, scale(sum(mul(s2.z_next, s2.z_next)), 0.1));
    };
    Rng r2(70);
    auto res = fd_check(build, theta, 5, r2);
    CAPTURE(res.param);
    CAPTURE(res.elem);
    CHECK(res.max_rel < 1e-4);
  }
}
