#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "stam/errors.hpp"
#include "stam/tensor.hpp"

namespace stam {

struct GradCheckReport {
  double max_rel = 0.0;
  size_t worst_param = 0;
  int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares analytic gradients against central finite differences.
///
/// `f` must be a pure function of the parameter list (same inputs, same
/// output). It is evaluated twice up front; any bit difference means hidden
/// state and the check aborts, because finite differences would be meaningless.
///
/// Returns the maximum relative error max(|a - n| / max(|a|, |n|, floor)).
/// The floor matters: central differences of a loss of order one carry about
/// ulp/(2h) = 1e-11 of cancellation noise, so entries whose true gradient is
/// essentially zero are compared absolutely against the floor rather than
/// letting that noise masquerade as relative error.
template <typename S>
double finite_difference_check(const std::function<S(const std::vector<Tensor<S>>&)>& f,
                               std::vector<Tensor<S>> params,
                               const std::vector<Tensor<S>>& analytic, S h = S(1e-5),
                               GradCheckReport* report = nullptr) {
  if (params.size() != analytic.size()) {
    throw ContractError("finite_difference_check: analytic gradient count mismatch");
  }
  S base1 = f(params);
  S base2 = f(params);
  if (std::memcmp(&base1, &base2, sizeof(S)) != 0) {
    throw ContractError("finite_difference_check: function is not deterministic");
  }
  GradCheckReport local;
  GradCheckReport& rep = report != nullptr ? *report : local;
  const double floor = 1e-6;
  for (size_t p = 0; p < params.size(); ++p) {
    if (!params[p].same_shape(analytic[p])) {
      throw ShapeError("finite_difference_check: gradient " + analytic[p].shape_str() +
                       " does not match parameter " + params[p].shape_str());
    }
    for (int64_t i = 0; i < params[p].numel(); ++i) {
      S saved = params[p][i];
      params[p][i] = saved + h;
      S up = f(params);
      params[p][i] = saved - h;
      S down = f(params);
      params[p][i] = saved;
      double numeric = (double(up) - double(down)) / (2.0 * double(h));
      double a = double(analytic[p][i]);
      double denom = std::max({std::fabs(a), std::fabs(numeric), floor});
      double rel = std::fabs(a - numeric) / denom;
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst_param = p;
        rep.worst_index = i;
        rep.analytic = a;
        rep.numeric = numeric;
      }
    }
  }
  return rep.max_rel;
}

}  // namespace stam
