#include "loopeval/nn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace loopeval::nn {

template <>
GradCheckOptions<float> GradCheckOptions<float>::defaults() {
  return {1e-3f, 5e-2f, 1e-4f};
}

template <>
GradCheckOptions<double> GradCheckOptions<double>::defaults() {
  return {1e-5, 1e-5, 1e-10};
}

template <typename Real>
std::vector<std::vector<double>> numeric_gradient(const std::function<Real()>& objective, const ParamRefs<Real>& params,
                                                  Real step) {
  std::vector<std::vector<double>> out;
  for (auto* p : params) {
    std::vector<double> g(p->size());
    for (std::size_t i = 0; i < p->size(); ++i) {
      const Real saved = p->values[i];
      // realized offsets, so rounding of x +- h cancels
      auto at = [&](Real offset, double& realized) {
        p->values[i] = saved + offset;
        realized = static_cast<double>(p->values[i]) - static_cast<double>(saved);
        return static_cast<double>(objective());
      };
      double h1p, h1m, h2p, h2m;
      const double f1p = at(step, h1p);
      const double f1m = at(-step, h1m);
      const double f2p = at(2 * step, h2p);
      const double f2m = at(-2 * step, h2m);
      p->values[i] = saved;
      const double d1 = (f1p - f1m) / (h1p - h1m);
      const double d2 = (f2p - f2m) / (h2p - h2m);
      g[i] = (4.0 * d1 - d2) / 3.0;
    }
    out.push_back(std::move(g));
  }
  return out;
}

GradCheckReport compare_gradients(const std::string& op_name, const std::vector<std::string>& names,
                                  const std::vector<std::vector<double>>& analytic,
                                  const std::vector<std::vector<double>>& numeric, double tolerance,
                                  double abs_floor) {
  if (analytic.size() != names.size() || numeric.size() != names.size())
    throw std::invalid_argument("compare_gradients: tensor count mismatch");
  GradCheckReport report;
  report.op_name = op_name;
  report.tolerance = tolerance;
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (analytic[k].size() != numeric[k].size())
      throw std::invalid_argument("compare_gradients: size mismatch for " + names[k]);
    double diff2 = 0, ana2 = 0, num2 = 0;
    for (std::size_t i = 0; i < analytic[k].size(); ++i) {
      const double a = analytic[k][i];
      const double n = numeric[k][i];
      diff2 += (a - n) * (a - n);
      ana2 += a * a;
      num2 += n * n;
    }
    const double denom = std::sqrt(ana2) + std::sqrt(num2);
    double rel = 0;
    if (denom > abs_floor) {
      rel = std::sqrt(diff2) / denom;
    } else if (!std::isfinite(denom)) {
      rel = std::numeric_limits<double>::infinity();
    }
    report.per_parameter.push_back({names[k], rel});
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  report.passed = report.max_rel_error <= report.tolerance;
  return report;
}

template <typename Real>
GradCheckReport grad_check(const std::string& op_name, const std::function<Real()>& objective,
                           const std::function<void()>& analytic, const ParamRefs<Real>& params,
                           GradCheckOptions<Real> options) {
  analytic();
  std::vector<std::string> names;
  std::vector<std::vector<double>> grads;
  for (auto* p : params) {
    names.push_back(p->name);
    grads.emplace_back(p->grad.begin(), p->grad.end());
  }
  const auto numeric = numeric_gradient<Real>(objective, params, options.step);
  return compare_gradients(op_name, names, grads, numeric, static_cast<double>(options.tolerance),
                           static_cast<double>(options.abs_floor));
}

template std::vector<std::vector<double>> numeric_gradient<float>(const std::function<float()>&,
                                                                  const ParamRefs<float>&, float);
template std::vector<std::vector<double>> numeric_gradient<double>(const std::function<double()>&,
                                                                   const ParamRefs<double>&, double);
template GradCheckReport grad_check<float>(const std::string&, const std::function<float()>&,
                                           const std::function<void()>&, const ParamRefs<float>&,
                                           GradCheckOptions<float>);
template GradCheckReport grad_check<double>(const std::string&, const std::function<double()>&,
                                            const std::function<void()>&, const ParamRefs<double>&,
                                            GradCheckOptions<double>);

}  // namespace loopeval::nn
