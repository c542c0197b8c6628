#pragma once

#include <functional>
#include <vector>

#include "oat/rng.hpp"
#include "oat/tensor.hpp"

namespace oat {

struct FdResult {
  double max_rel = 0.0;  // worst |analytic - central| / max(1, |central|)
  double ad = 0.0;       // analytic value at the worst point
  double fd = 0.0;       // central-difference value at the worst point
  int param = -1;
  int elem = -1;
  int checked = 0;
  int skipped = 0;  // probes moved off non-smooth stencils
};

// Builds a 1x1 loss on the given tape; params must be registered with
// tape.param(..., theta[i].data(), i) so pids index into theta.
using BuildLoss =
    std::function<Tensor(Tape&, const std::vector<std::vector<double>>&)>;

// Compares reverse-mode gradients against central finite differences at
// samples_per_param randomly chosen elements of each parameter vector.
// A probe only counts where the stencil can measure a derivative: when the
// central estimate misses `tol` AND the two one-sided estimates disagree,
// the stencil contains a kink (relu, hinge, assignment switch). The step
// shrinks to walk off a kink caught in the stencil wings; if the kink sits
// exactly at the evaluation point no step helps, so the probe moves to
// another element of the same parameter and the move is tallied in
// `skipped`. Mismatches on smooth stencils are recorded as failures at
// whichever scale exposed them.
FdResult fd_check(const BuildLoss& build, std::vector<std::vector<double>> theta,
                  int samples_per_param, Rng& rng, double step = 1e-4,
                  double tol = 1e-4);

}  // namespace oat
