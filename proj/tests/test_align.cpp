#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "oat/align.hpp"
#include "oat/codec.hpp"
#include "oat/errors.hpp"
#include "oat/gradcheck.hpp"
#include "oat/world.hpp"

using namespace oat;

namespace {

std::vector<double> randvec(size_t n, Rng& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Exhaustive maximum over injective matchings of kept columns to rows.
double brute_best(const std::vector<double>& s, int m, int k,
                  const std::vector<uint8_t>& flags) {
  std::vector<int> kept;
  for (int j = 0; j < k; ++j)
    if (!flags[j]) kept.push_back(j);
  if (kept.empty()) return 0.0;
  std::vector<int> rows(m);
  std::iota(rows.begin(), rows.end(), 0);
  double best = -1e300;
  do {
    double tot = 0.0;
    for (size_t idx = 0; idx < kept.size(); ++idx)
      tot += s[static_cast<size_t>(rows[idx]) * k + kept[idx]];
    best = std::max(best, tot);
  } while (std::next_permutation(rows.begin(), rows.end()));
  return best;
}

void check_injective(const Assignment& a) {
  std::vector<int> seen;
  for (int j : a.memory_to_obs)
    if (j >= 0) seen.push_back(j);
  std::sort(seen.begin(), seen.end());
  CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
  for (size_t j = 0; j < a.obs_to_memory.size(); ++j)
    if (a.obs_to_memory[j] >= 0)
      CHECK(a.memory_to_obs[a.obs_to_memory[j]] == static_cast<int>(j));
}

}  // namespace

TEST_CASE("zeroed scorer gives uniform adjacency rows") {
  AlignConfig cfg;
  cfg.memory_slots = 5;
  cfg.feat = 4;
  cfg.hidden = 8;
  ParamStore ps;
  Rng rng(41);
  AlignNet net(ps, cfg, rng);
  for (int i = 0; i < ps.count(); ++i)
    if (ps.name(i).rfind("align.", 0) == 0)
      std::fill(ps.values(i).begin(), ps.values(i).end(), 0.0);

  const int k = 3;
  Tape t(false);
  Tensor m = t.constant(cfg.memory_slots, cfg.feat,
                        randvec(static_cast<size_t>(cfg.memory_slots) * cfg.feat, rng));
  Tensor z = t.constant(k, cfg.feat, randvec(static_cast<size_t>(k) * cfg.feat, rng));
  Tensor a = net.adjacency(t, m, z);
  REQUIRE(a.rows() == cfg.memory_slots);
  REQUIRE(a.cols() == k);
  for (double v : a.values()) CHECK(v == 1.0 / (k + 1));
}

TEST_CASE("permuting observed slots permutes adjacency columns bitwise") {
  AlignConfig cfg;
  cfg.memory_slots = 6;
  cfg.feat = 8;
  cfg.hidden = 16;
  ParamStore ps;
  Rng rng(42);
  AlignNet net(ps, cfg, rng);
  const int k = 4;
  const std::vector<int> perm = {2, 0, 3, 1};

  Tape t(false);
  auto zv = randvec(static_cast<size_t>(k) * cfg.feat, rng);
  std::vector<double> zp(zv.size());
  for (int i = 0; i < k; ++i)
    std::copy_n(zv.begin() + static_cast<size_t>(perm[i]) * cfg.feat, cfg.feat,
                zp.begin() + static_cast<size_t>(i) * cfg.feat);
  Tensor m = t.constant(cfg.memory_slots, cfg.feat,
                        randvec(static_cast<size_t>(cfg.memory_slots) * cfg.feat, rng));
  Tensor a = net.adjacency(t, m, t.constant(k, cfg.feat, zv));
  Tensor ap = net.adjacency(t, m, t.constant(k, cfg.feat, zp));

  const auto av = a.values(), apv = ap.values();
  for (int i = 0; i < cfg.memory_slots; ++i)
    for (int j = 0; j < k; ++j) {
      const double x = av[static_cast<size_t>(i) * k + perm[j]];
      const double y = apv[static_cast<size_t>(i) * k + j];
      CHECK(std::memcmp(&x, &y, sizeof(double)) == 0);
    }
}

TEST_CASE("adjacency rows sum to at most one") {
  AlignConfig cfg;
  cfg.feat = 8;
  cfg.hidden = 16;
  ParamStore ps;
  Rng rng(43);
  AlignNet net(ps, cfg, rng);
  Tape t(false);
  Tensor m = t.constant(cfg.memory_slots, cfg.feat,
                        randvec(static_cast<size_t>(cfg.memory_slots) * cfg.feat, rng, -3, 3));
  Tensor z = t.constant(7, cfg.feat, randvec(7 * static_cast<size_t>(cfg.feat), rng, -3, 3));
  Tensor a = net.adjacency(t, m, z);
  for (int i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (int j = 0; j < a.cols(); ++j) s += a.values()[static_cast<size_t>(i) * a.cols() + j];
    CHECK(s <= 1.0 + 1e-9);
    CHECK(s > 0.0);
  }
}

TEST_CASE("soft alignment mixes slots by adjacency weight") {
  Tape t(false);
  const int k = 3, f = 4;
  Rng rng(44);
  auto zv = randvec(static_cast<size_t>(k) * f, rng);
  Tensor z = t.constant(k, f, zv);

  // permutation row, zero row, uniform row
  Tensor a = t.constant(4, k,
                        {0, 1, 0,  //
                         0, 0, 1,  //
                         0, 0, 0,  //
                         1.0 / 3, 1.0 / 3, 1.0 / 3});
  const auto out = soft_align(a, z).values();
  for (int c = 0; c < f; ++c) {
    CHECK(out[c] == zv[static_cast<size_t>(1) * f + c]);
    CHECK(out[static_cast<size_t>(1) * f + c] == zv[static_cast<size_t>(2) * f + c]);
    CHECK(out[static_cast<size_t>(2) * f + c] == 0.0);
    const double mean = (zv[c] + zv[f + c] + zv[2 * f + c]) / 3.0;
    CHECK(out[static_cast<size_t>(3) * f + c] == doctest::Approx(mean).epsilon(1e-15));
  }

  // linearity in z
  Tensor z2 = t.constant(k, f, [&] {
    auto v = zv;
    for (auto& x : v) x *= 2.0;
    return v;
  }());
  const auto o1 = soft_align(a, z).values(), o2 = soft_align(a, z2).values();
  for (size_t i = 0; i < o1.size(); ++i)
    CHECK(o2[i] == doctest::Approx(2.0 * o1[i]).epsilon(1e-15));
}

TEST_CASE("hungarian solves the pinned small cases") {
  {
    Assignment a = hungarian_assign({1, 2, 2, 1}, 2, 2, {0, 0});
    CHECK(a.memory_to_obs == std::vector<int>{1, 0});
    CHECK(a.total == 4.0);
  }
  {
    Assignment a = hungarian_assign({5, 1, 3}, 3, 1, {0});
    CHECK(a.memory_to_obs == std::vector<int>{0, -1, -1});
    CHECK(a.obs_to_memory == std::vector<int>{0});
    CHECK(a.total == 5.0);
  }
  {
    Assignment a = hungarian_assign({1, 2, 3, 4}, 2, 2, {1, 1});
    CHECK(a.memory_to_obs == std::vector<int>{-1, -1});
    CHECK(a.total == 0.0);
  }
}

TEST_CASE("hungarian equals brute force on a thousand random matrices") {
  Rng rng(45);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> s = randvec(36, rng, -5, 5);
    std::vector<uint8_t> flags(6, 0);
    Assignment a = hungarian_assign(s, 6, 6, flags);
    check_injective(a);
    int matched = 0;
    for (int j : a.memory_to_obs) matched += j >= 0 ? 1 : 0;
    CHECK(matched == 6);
    CHECK(a.total == doctest::Approx(brute_best(s, 6, 6, flags)).epsilon(1e-12));
  }
}

TEST_CASE("hungarian equals brute force with excluded columns") {
  Rng rng(46);
  for (int trial = 0; trial < 300; ++trial) {
    const int m = 6, k = rng.uniform_int(1, 6);
    std::vector<double> s = randvec(static_cast<size_t>(m) * k, rng, -2, 2);
    std::vector<uint8_t> flags(k, 0);
    for (int j = 0; j < k; ++j) flags[j] = rng.uniform() < 0.3 ? 1 : 0;
    Assignment a = hungarian_assign(s, m, k, flags);
    check_injective(a);
    for (int j = 0; j < k; ++j)
      if (flags[j])
        CHECK(a.obs_to_memory[j] == -1);
      else
        CHECK(a.obs_to_memory[j] >= 0);  // m >= kept, so all kept match
    CHECK(a.total == doctest::Approx(brute_best(s, m, k, flags)).epsilon(1e-12));
  }
}

TEST_CASE("hungarian rejects bad inputs") {
  CHECK_THROWS_AS(hungarian_assign({std::nan(""), 1, 2, 3}, 2, 2, {0, 0}),
                  NumericError);
  // three occupied columns cannot inject into two rows
  CHECK_THROWS_AS(hungarian_assign({1, 2, 3, 4, 5, 6}, 2, 3, {0, 0, 0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(hungarian_assign({1, 2}, 2, 2, {0, 0}), std::invalid_argument);
}

TEST_CASE("hard alignment routes matches and carries the rest forward") {
  Tape t(false);
  Rng rng(47);
  const int f = 3;

  SUBCASE("clean permutation recovers the permuted slots") {
    auto zv = randvec(3 * f, rng);
    Tensor z = t.constant(3, f, zv);
    Tensor prev = t.constant(3, f, randvec(3 * f, rng));
    Tensor a = t.constant(3, 3, {0, 1, 0, 0, 0, 1, 1, 0, 0});
    auto [za, asg] = hard_align(a, z, {0, 0, 0}, prev);
    CHECK(asg.memory_to_obs == std::vector<int>{1, 2, 0});
    const auto v = za.values();
    for (int c = 0; c < f; ++c) {
      CHECK(v[c] == zv[static_cast<size_t>(1) * f + c]);
      CHECK(v[static_cast<size_t>(1) * f + c] == zv[static_cast<size_t>(2) * f + c]);
      CHECK(v[static_cast<size_t>(2) * f + c] == zv[c]);
    }
  }

  SUBCASE("all-empty observations leave memory untouched") {
    Tensor z = t.constant(2, f, randvec(2 * f, rng));
    auto pv = randvec(4 * f, rng);
    Tensor prev = t.constant(4, f, pv);
    Tensor a = t.constant(4, 2, randvec(8, rng, 0, 1));
    auto [za, asg] = hard_align(a, z, {1, 1}, prev);
    CHECK(asg.memory_to_obs == std::vector<int>{-1, -1, -1, -1});
    const auto v = za.values();
    for (size_t i = 0; i < pv.size(); ++i) CHECK(v[i] == pv[i]);
  }

  SUBCASE("two visible slots update exactly two of four rows") {
    Tensor z = t.constant(3, f, randvec(3 * f, rng));
    auto pv = randvec(4 * f, rng);
    Tensor prev = t.constant(4, f, pv);
    Tensor a = t.constant(4, 3, randvec(12, rng, 0, 1));
    auto [za, asg] = hard_align(a, z, {0, 1, 0}, prev);
    int updated = 0;
    for (int i = 0; i < 4; ++i) updated += asg.memory_to_obs[i] >= 0 ? 1 : 0;
    CHECK(updated == 2);
    const auto v = za.values();
    for (int i = 0; i < 4; ++i)
      if (asg.memory_to_obs[i] < 0)
        for (int c = 0; c < f; ++c)
          CHECK(v[static_cast<size_t>(i) * f + c] == pv[static_cast<size_t>(i) * f + c]);
  }
}

TEST_CASE("alignment loss vanishes on a perfect one-hot match") {
  Tape t(false);
  Rng rng(48);
  const int n = 4, f = 5;
  auto zv = randvec(static_cast<size_t>(n) * f, rng);
  Tensor z = t.constant(n, f, zv);
  Tensor a = t.constant(n, n, {0, 1, 0, 0,  //
                               0, 0, 0, 1,  //
                               1, 0, 0, 0,  //
                               0, 0, 1, 0});
  Tensor zsoft = soft_align(a, z);
  CHECK(alignnet_loss({zsoft}, {zsoft}, {a}, 0.01).scalar() == 0.0);
}

TEST_CASE("uniform adjacency rows cost the closed-form entropy") {
  Tape t(false);
  const int m = 5, k = 5, f = 3, steps = 4;
  Tensor a = t.constant(m, k, std::vector<double>(static_cast<size_t>(m) * k, 1.0 / k));
  Tensor z = t.zeros(k, f);
  Tensor zsoft = soft_align(a, z);
  const double psi = 0.01;
  const double want = steps * psi * m * std::log(static_cast<double>(k));
  std::vector<Tensor> zs(steps, zsoft), as(steps, a);
  CHECK(alignnet_loss(zs, zs, as, psi).scalar() ==
        doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("column mass beyond one pays exactly the excess") {
  Tape t(false);
  const int f = 2;
  Tensor z = t.zeros(3, f);
  // column 0 sums to 1.5
  Tensor a = t.constant(2, 3, {1.0, 0.0, 0.0,  //
                               0.5, 0.25, 0.25});
  Tensor zsoft = soft_align(a, z);
  CHECK(alignnet_loss({zsoft}, {zsoft}, {a}, 0.0).scalar() ==
        doctest::Approx(0.5).epsilon(1e-15));

  // swapped reading: hinge on memory-row sums instead
  Tensor ar = t.constant(3, 2, {1.0, 0.5,  //
                                0.0, 0.25,  //
                                0.0, 0.25});
  Tensor zr = t.zeros(2, f);
  Tensor zsr = soft_align(ar, zr);
  CHECK(alignnet_loss({zsr}, {zsr}, {ar}, 0.0, true).scalar() ==
        doctest::Approx(0.5).epsilon(1e-15));
  // a scorer-style matrix keeps every memory row at mass <= 1
  CHECK(alignnet_loss({zsoft}, {zsoft}, {a}, 0.0, true).scalar() == 0.0);
}

TEST_CASE("alignment loss rejects bad arguments") {
  Tape t(false);
  Tensor a = t.constant(1, 1, {1.0});
  Tensor z = t.zeros(1, 2);
  Tensor zs = soft_align(a, z);
  CHECK_THROWS_AS(alignnet_loss({zs}, {zs}, {a}, -0.01), std::invalid_argument);
  CHECK_THROWS_AS(alignnet_loss({zs}, {zs, zs}, {a}, 0.01), std::invalid_argument);
  CHECK_THROWS_AS(alignnet_loss({}, {}, {}, 0.01), std::invalid_argument);
}

TEST_CASE("adjacency rejects non-finite inputs") {
  AlignConfig cfg;
  cfg.feat = 4;
  cfg.hidden = 8;
  ParamStore ps;
  Rng rng(49);
  AlignNet net(ps, cfg, rng);
  Tape t(false);
  std::vector<double> mv(static_cast<size_t>(cfg.memory_slots) * cfg.feat, 0.0);
  mv[5] = std::numeric_limits<double>::infinity();
  Tensor m = t.constant(cfg.memory_slots, cfg.feat, mv);
  Tensor z = t.zeros(3, cfg.feat);
  CHECK_THROWS_AS(net.adjacency(t, m, z), NumericError);
  CHECK_THROWS_AS(net.adjacency(t, t.zeros(2, cfg.feat), t.zeros(2, 3)), DataError);
}

TEST_CASE("init memory is zero with the requested shape") {
  Tape t(false);
  Tensor m = init_memory(t, 4, 16);
  CHECK(m.rows() == 4);
  CHECK(m.cols() == 16);
  for (double v : m.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(init_memory(t, 0, 3), std::invalid_argument);
}

TEST_CASE("alignment gradients pass finite differences") {
  AlignConfig cfg;
  cfg.memory_slots = 4;
  cfg.feat = 5;
  cfg.hidden = 8;
  ParamStore ps;
  Rng rng(50);
  AlignNet net(ps, cfg, rng);
  const int k = 3;
  const int m_id = ps.add("t.m", cfg.memory_slots, cfg.feat,
                          randvec(static_cast<size_t>(cfg.memory_slots) * cfg.feat, rng));
  const int z0_id = ps.add("t.z0", k, cfg.feat, randvec(static_cast<size_t>(k) * cfg.feat, rng));
  const int z1_id = ps.add("t.z1", k, cfg.feat, randvec(static_cast<size_t>(k) * cfg.feat, rng));
  const int zd_id = ps.add("t.zd", cfg.memory_slots, cfg.feat,
                           randvec(static_cast<size_t>(cfg.memory_slots) * cfg.feat, rng));

  std::vector<std::vector<double>> theta;
  for (int i = 0; i < ps.count(); ++i) theta.push_back(ps.values(i));
  auto build = [&](Tape& t, const std::vector<std::vector<double>>& th) {
    for (int i = 0; i < ps.count(); ++i)
      std::copy(th[i].begin(), th[i].end(), ps.values(i).begin());
    Tensor m0 = ps.leaf(t, m_id);
    Tensor z0 = ps.leaf(t, z0_id), z1 = ps.leaf(t, z1_id);
    Tensor zd = ps.leaf(t, zd_id);
    Tensor a0 = net.adjacency(t, m0, z0);
    Tensor m1 = soft_align(a0, z0);  // differentiable memory rollover
    Tensor a1 = net.adjacency(t, m1, z1);
    return alignnet_loss({zd, zd}, {soft_align(a0, z0), soft_align(a1, z1)},
                         {a0, a1}, 0.01);
  };
  Rng r2(51);
  auto res = fd_check(build, theta, 6, r2);
  CAPTURE(res.param);
  CAPTURE(res.elem);
  CHECK(res.max_rel < 1e-4);
}

TEST_CASE("oracle scores keep slot identities across occlusions") {
  WorldConfig wc;
  Trajectory tr = generate_trajectory(wc, 123);
  REQUIRE(has_occlusion_event(tr));
  const int f = 6, m_rows = wc.n_obj + 2;
  Rng rng(52);

  // One fixed embedding per persistent identity.
  std::vector<std::vector<double>> embed;
  for (int o = 0; o < tr.n_obj; ++o)
    embed.push_back(randvec(f, rng, -1, 1));

  Tape t(false);
  Tensor prev = init_memory(t, m_rows, f);
  std::vector<int> home(tr.n_obj, -1);  // first memory row per object
  int reentries = 0;
  std::vector<bool> was_hidden(tr.n_obj, false);

  for (int step = 0; step < tr.t; ++step) {
    // Observed slots in shuffled order, empties flagged.
    auto perm = slot_shuffle(1, tr.n_obj, Rng(900 + step))[0];
    std::vector<double> zv(static_cast<size_t>(tr.n_obj) * f, 0.0);
    std::vector<uint8_t> flags(tr.n_obj, 1);
    for (int i = 0; i < tr.n_obj; ++i) {
      const int o = perm[i];
      if (!tr.visible(step, o)) continue;
      flags[i] = 0;
      std::copy(embed[o].begin(), embed[o].end(), zv.begin() + static_cast<size_t>(i) * f);
    }
    Tensor z = t.constant(tr.n_obj, f, zv);

    // score[i][j] = -||m_i - z_j||^2, computed off-tape
    std::vector<double> score(static_cast<size_t>(m_rows) * tr.n_obj);
    const auto mv = prev.values();
    for (int i = 0; i < m_rows; ++i)
      for (int j = 0; j < tr.n_obj; ++j) {
        double d = 0.0;
        for (int c = 0; c < f; ++c) {
          const double r = mv[static_cast<size_t>(i) * f + c] - zv[static_cast<size_t>(j) * f + c];
          d += r * r;
        }
        score[static_cast<size_t>(i) * tr.n_obj + j] = -d;
      }
    Assignment asg = hungarian_assign(score, m_rows, tr.n_obj, flags);

    for (int i = 0; i < tr.n_obj; ++i) {
      const int o = perm[i];
      if (!tr.visible(step, o)) continue;
      const int row = asg.obs_to_memory[i];
      REQUIRE(row >= 0);
      if (home[o] < 0) {
        home[o] = row;
      } else {
        CHECK(row == home[o]);  // same identity lands on the same row
        if (was_hidden[o]) {
          ++reentries;
          was_hidden[o] = false;
        }
      }
    }
    for (int o = 0; o < tr.n_obj; ++o)
      if (home[o] >= 0 && !tr.visible(step, o)) was_hidden[o] = true;

    prev = assemble_rows(z, prev, asg.memory_to_obs);
  }
  CHECK(reentries > 0);  // the occlusion event was actually exercised
}
