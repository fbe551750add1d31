#pragma once

#include <functional>
#include <string>

#include "dive/tensor.hpp"

namespace dive {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<index>]"
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// Compares analytic gradients against central finite differences.
///
/// `objective` evaluates the scalar reduction for the current parameter
/// values. `backward` must zero and refill `grad` of every checked parameter.
/// Relative error per entry is max(0, |a - fd| - abs_floor) / max(|a|, |fd|, 1e-12);
/// the report holds the maximum. abs_floor absorbs round-off in the difference
/// quotient (about 1e-10 at h = 1e-5 for O(1) objectives), which otherwise
/// dominates entries whose true gradient is zero. When `max_entries_per_param` is non-zero, larger
/// parameters are probed at evenly strided entries.
///
/// Throws Error(kNonFinite) if the objective is ever non-finite.
GradCheckReport grad_check(const std::function<double()>& objective, const std::function<void()>& backward,
                           const ParamList& params, double h = 1e-5, std::size_t max_entries_per_param = 0,
                           double abs_floor = 1e-8);

}  // namespace dive
