#pragma once

#include <cstdint>
#include <functional>

namespace oscar {

/// Central-difference gradient verification with step 1e-3 against an
/// analytic gradient. `f` re-evaluates the scalar function after the checker
/// perturbs coordinates of `point` in place (values restored afterwards).
///
/// Reported error is max_i |analytic_i - numeric_i| / max(||analytic||_inf,
/// ||numeric||_inf): the error is measured against the gradient's magnitude,
/// so near-zero coordinates do not blow up the ratio while any wrong formula
/// (off by the gradient's scale) is still caught.
///
/// `max_coords` > 0 checks a deterministic sample of coordinates (seeded by
/// `seed`) instead of all of them. Non-finite evaluations raise NumericError.
double grad_check(const std::function<double()>& f, float* point,
                  const float* analytic, int64_t n, double step = 1e-3,
                  int64_t max_coords = -1, uint64_t seed = 0);

}  // namespace oscar
