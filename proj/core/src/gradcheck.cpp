#include "dive/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dive/error.hpp"

namespace dive {

GradCheckReport grad_check(const std::function<double()>& objective, const std::function<void()>& backward,
                           const ParamList& params, double h, std::size_t max_entries_per_param, double abs_floor) {
  auto eval = [&] {
    const double f = objective();
    if (!std::isfinite(f)) throw Error(ErrorCode::kNonFinite, "grad_check: objective is not finite");
    return f;
  };
  eval();
  backward();
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const Parameter* p : params) {
    if (!p->grad.all_finite()) throw Error(ErrorCode::kNonFinite, "grad_check: analytic gradient of " + p->name);
    analytic.push_back(p->grad);
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    const std::size_t n = p.value.size();
    std::size_t stride = 1;
    if (max_entries_per_param != 0 && n > max_entries_per_param) {
      stride = (n + max_entries_per_param - 1) / max_entries_per_param;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double fp = eval();
      p.value[i] = saved - h;
      const double fm = eval();
      p.value[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(fd), 1e-12});
      const double rel = std::max(0.0, std::abs(a - fd) - abs_floor) / denom;
      ++report.entries_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = p.name + "[" + std::to_string(i) + "]";
        report.worst_analytic = a;
        report.worst_numeric = fd;
      }
    }
  }
  return report;
}

}  // namespace dive
