#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oat/gradcheck.hpp"

namespace oat {

// Finite-difference sweep over every differentiable piece of the pipeline,
// each exercised as a small fixed-shape instance re-initialized at `points`
// random parameter points. One row per piece; `worst` keeps the probe with
// the largest relative gap across all points.
struct GradSuiteRow {
  std::string module;
  FdResult worst;
  int points = 0;
  int checked = 0;  // total probes across points
  int skipped = 0;  // probes moved off non-smooth stencils
  bool pass = false;
};

std::vector<GradSuiteRow> gradcheck_suite(int points, uint64_t seed,
                                          double tol = 1e-4);

}  // namespace oat
