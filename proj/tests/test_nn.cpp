#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oat/gradcheck.hpp"
#include "oat/nn.hpp"
#include "oat/parallel.hpp"

using namespace oat;

TEST_CASE("adam matches an independent reference over several steps") {
  ParamStore ps;
  ps.add("p", 1, 3, {0.5, -0.2, 1.0});
  AdamConfig cfg;
  cfg.lr = 0.01;
  cfg.clip = 0.0;  // no clipping here
  Adam opt(ps, cfg);

  // reference state
  std::vector<double> th = {0.5, -0.2, 1.0}, m(3, 0.0), v(3, 0.0);
  std::vector<std::vector<double>> gs = {
      {0.3, -0.1, 0.7}, {-0.2, 0.05, 0.4}, {0.0, 0.0, -1.0}};
  for (int t = 1; t <= 3; ++t) {
    std::unordered_map<int, std::vector<double>> grads;
    grads[0] = gs[t - 1];
    opt.step(grads);
    for (int i = 0; i < 3; ++i) {
      const double g = gs[t - 1][i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      th[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int i = 0; i < 3; ++i)
    CHECK(ps.values(0)[i] == doctest::Approx(th[i]).epsilon(1e-14));
}

TEST_CASE("global norm clip scales gradients to the ceiling") {
  ParamStore ps;
  ps.add("a", 1, 2, {0.0, 0.0});
  ps.add("b", 1, 1, {0.0});
  AdamConfig cfg;
  cfg.clip = 5.0;
  Adam opt(ps, cfg);
  std::unordered_map<int, std::vector<double>> grads;
  grads[0] = {6.0, 8.0};  // norm with b: sqrt(36+64+0) = 10 > 5
  grads[1] = {0.0};
  double norm = opt.step(grads);
  CHECK(norm == doctest::Approx(10.0));

  // reference: clipped grad (3, 4): m = 0.1*g, v = 0.001*g^2, bias-corrected
  // first step gives theta = -lr * g/|g| elementwise (up to eps).
  for (int i = 0; i < 2; ++i) {
    const double g = (i == 0 ? 3.0 : 4.0);
    const double mh = 0.1 * g / (1 - 0.9);
    const double vh = 0.001 * g * g / (1 - 0.999);
    const double want = -cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    CHECK(ps.values(0)[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("zero gradients leave parameters untouched") {
  ParamStore ps;
  ps.add("p", 2, 2, {1, 2, 3, 4});
  Adam opt(ps, {});
  std::unordered_map<int, std::vector<double>> grads;  // empty: all zero
  opt.step(grads);
  opt.step(grads);
  CHECK(ps.values(0) == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("linear and mlp shapes, zero-init head outputs zero") {
  ParamStore ps;
  Rng rng(3);
  auto mlp = Mlp::make(ps, "enc", {10, 16, 4}, rng);
  auto head = Linear::make(ps, "head", 4, 8, rng, 0.0);
  Tape t;
  std::vector<double> x(5 * 10, 0.3);
  auto y = mlp.apply(t, ps, t.constant(5, 10, x));
  CHECK(y.rows() == 5);
  CHECK(y.cols() == 4);
  auto h = head.apply(t, ps, y);
  CHECK(h.rows() == 5);
  CHECK(h.cols() == 8);
  for (double v : h.values()) CHECK(v == 0.0);
}

TEST_CASE("mlp gradients pass finite differences") {
  ParamStore ps;
  Rng rng(4);
  auto mlp = Mlp::make(ps, "m", {6, 8, 3}, rng);
  std::vector<std::vector<double>> theta;
  for (int i = 0; i < ps.count(); ++i) theta.push_back(ps.values(i));
  std::vector<double> x(4 * 6);
  for (auto& v : x) v = rng.uniform(-1, 1);

  auto build = [&](Tape& t, const std::vector<std::vector<double>>& th) {
    // Copy values in place: tapes borrow the store's buffers, which must
    // outlive the backward pass.
    for (int i = 0; i < ps.count(); ++i)
      std::copy(th[i].begin(), th[i].end(), ps.values(i).begin());
    return sum(tanh(mlp.apply(t, ps, t.constant(4, 6, x))));
  };
  Rng r3(5);
  auto res = fd_check(build, theta, 8, r3);
  CHECK(res.max_rel < 1e-4);
}

TEST_CASE("duplicate param names rejected") {
  ParamStore ps;
  ps.add("x", 1, 1, {0.0});
  CHECK_THROWS_AS(ps.add("x", 1, 1, {0.0}), std::invalid_argument);
}

TEST_CASE("parallel_for covers all items once for any worker count") {
  for (int workers : {1, 2, 4, 7}) {
    std::vector<int> hits(25, 0);
    parallel_for(25, workers, [&](int i) { hits[i]++; });
    for (int h : hits) CHECK(h == 1);
  }
}
