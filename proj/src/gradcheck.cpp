#include "oscar/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "oscar/errors.hpp"
#include "oscar/rng.hpp"

namespace oscar {

double grad_check(const std::function<double()>& f, float* point, const float* analytic,
                  int64_t n, double step, int64_t max_coords, uint64_t seed) {
  std::vector<int64_t> coords(n);
  std::iota(coords.begin(), coords.end(), 0);
  if (max_coords > 0 && max_coords < n) {
    Rng rng(derive_seed(seed, 0xc0de));
    rng.shuffle(coords);
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }

  double scale = 0.0;
  for (int64_t i = 0; i < n; i++) scale = std::max(scale, std::abs(static_cast<double>(analytic[i])));

  double max_err = 0.0;
  for (int64_t i : coords) {
    float saved = point[i];
    point[i] = static_cast<float>(saved + step);
    double fp = f();
    point[i] = static_cast<float>(saved - step);
    double fm = f();
    point[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite function evaluation");
    double numeric = (fp - fm) / (2.0 * step);
    scale = std::max(scale, std::abs(numeric));
    double err = std::abs(static_cast<double>(analytic[i]) - numeric);
    max_err = std::max(max_err, err);
  }
  return scale > 0.0 ? max_err / scale : max_err;
}

}  // namespace oscar
