#include "usm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace usm {

GradReport grad_check(const std::function<Tensor()>& loss_fn,
                      const std::vector<std::pair<std::string, Tensor>>& params,
                      double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  GradReport report;
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) {
    ++report.non_finite_probes;
    report.max_relative_error = std::numeric_limits<double>::infinity();
    return report;
  }
  loss.backward();
  for (const auto& [name, param] : params) {
    Tensor p = param;
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    bool finite = true;
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + step;
      double up = loss_fn().item();
      vals[i] = orig - step;
      double down = loss_fn().item();
      vals[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.non_finite_probes += 1;
        finite = false;
        continue;
      }
      double numeric = (up - down) / (2.0 * step);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    double err;
    if (!finite) {
      err = std::numeric_limits<double>::infinity();
    } else {
      double denom = std::max(std::sqrt(a2), std::sqrt(n2));
      err = denom == 0.0 ? 0.0 : std::sqrt(diff2) / denom;
    }
    report.per_parameter_errors.emplace_back(name, err);
    report.max_relative_error = std::max(report.max_relative_error, err);
  }
  return report;
}

}  // namespace usm
