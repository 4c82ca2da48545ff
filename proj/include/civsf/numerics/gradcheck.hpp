#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "civsf/errors.hpp"
#include "civsf/numerics/autograd.hpp"
#include "civsf/numerics/nn.hpp"
#include "civsf/numerics/rng.hpp"

namespace civsf {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::string worst_name;
  std::size_t checked = 0;
};

// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Central-difference check of `grad` against `f` at `point`. When `coords` is
// empty every coordinate is checked.
inline GradCheckResult grad_check(
    const std::function<double(std::span<const double>)>& f,
    const std::function<std::vector<double>(std::span<const double>)>& grad,
    std::vector<double> point, double eps,
    std::span<const std::size_t> coords = {}) {
  const auto g = grad(point);
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(point.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    coords = all;
  }
  GradCheckResult res;
  for (std::size_t i : coords) {
    const double x0 = point[i];
    point[i] = x0 + eps;
    const double fp = f(point);
    point[i] = x0 - eps;
    const double fm = f(point);
    point[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("grad_check: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    const double err = relative_error(g[i], (fp - fm) / (2.0 * eps));
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
    }
    ++res.checked;
  }
  return res;
}

// Checks the tape gradient of `loss_fn` with respect to every parameter of
// `store` by perturbing parameter values in place. At most
// `per_tensor` coordinates are sampled from each tensor (0 = all).
// Gradients much smaller than `floor` are compared in absolute terms, since
// their central differences are dominated by rounding in the loss.
// With `fourth_order` the five-point central stencil is used, which permits
// a larger `eps` at the same truncation error.
inline GradCheckResult grad_check_params(
    ParamStore<double>& store, const std::function<Var<double>()>& loss_fn,
    double eps, std::size_t per_tensor, RngStream rng, double floor = 1e-8,
    bool fourth_order = false) {
  store.zero_grad();
  auto loss = loss_fn();
  backward(loss);
  GradCheckResult res;
  for (auto& [name, param] : store.entries()) {
    auto p = param;
    const Tensor<double> analytic = p.grad();
    const std::size_t n = p.numel();
    std::vector<std::size_t> coords;
    if (per_tensor == 0 || per_tensor >= n) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      auto perm = rng.permutation(n);
      coords.assign(perm.begin(), perm.begin() + per_tensor);
    }
    for (std::size_t i : coords) {
      auto& val = p.mutable_value();
      const double x0 = val[i];
      auto at = [&](double h) {
        val[i] = x0 + h;
        const double v = loss_fn().value()[0];
        val[i] = x0;
        if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss perturbing " + name);
        return v;
      };
      const double d1 = at(eps) - at(-eps);
      const double numeric = fourth_order
                                 ? (8.0 * d1 - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps)
                                 : d1 / (2.0 * eps);
      const double err = relative_error(analytic[i], numeric, floor);
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_index = i;
        res.worst_name = name;
      }
      ++res.checked;
    }
  }
  return res;
}

}  // namespace civsf
