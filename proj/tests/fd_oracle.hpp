#pragma once

// Central finite-difference oracle. Independent of the reverse-mode code
// path: it only ever evaluates forward values.

#include "sklp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace sklp::testing {

inline double central_difference(const std::function<double()>& f, double& coord, double h = 1e-4) {
  const double saved = coord;
  coord = saved + h;
  const double up = f();
  coord = saved - h;
  const double down = f();
  coord = saved;
  return (up - down) / (2.0 * h);
}

/// |a − n| / max(|a|, |n|, floor). The floor turns the check into an
/// absolute one for coordinates whose true derivative is ~0.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace sklp::testing
