#pragma once

#include <functional>
#include <string>
#include <vector>

#include "loopeval/nn/tensor.hpp"

namespace loopeval::nn {

struct ParamError {
  std::string name;
  double rel_error = 0;
};

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0;
  std::vector<ParamError> per_parameter;
  bool passed = false;
  double tolerance = 0;
};

template <typename Real>
struct GradCheckOptions {
  Real tolerance;
  Real step;
  // Parameters whose analytic and numeric gradient norms are both below this count as exact.
  Real abs_floor;

  static GradCheckOptions defaults();
};

/// Compares analytic gradients against central finite differences.
///
/// `objective` evaluates the scalar under test at the current parameter values.
/// `analytic` must zero and then populate every gradient in `params`.
/// The per-parameter error is ||analytic - numeric|| / (||analytic|| + ||numeric||).
template <typename Real>
GradCheckReport grad_check(const std::string& op_name, const std::function<Real()>& objective,
                           const std::function<void()>& analytic, const ParamRefs<Real>& params,
                           GradCheckOptions<Real> options = GradCheckOptions<Real>::defaults());

/// Fourth-order central differences of `objective`, one vector per tensor in `params`.
/// Values are restored afterwards.
template <typename Real>
std::vector<std::vector<double>> numeric_gradient(const std::function<Real()>& objective, const ParamRefs<Real>& params,
                                                  Real step);

/// Relative error per tensor between two gradient sets laid out like `names`.
GradCheckReport compare_gradients(const std::string& op_name, const std::vector<std::string>& names,
                                  const std::vector<std::vector<double>>& analytic,
                                  const std::vector<std::vector<double>>& numeric, double tolerance,
                                  double abs_floor);

}  // namespace loopeval::nn
