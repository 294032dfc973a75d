#pragma once

// Central finite-difference checker used by the unit and acceptance suites.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "qpm/autograd.hpp"

namespace qpm::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
  std::size_t failures = 0;
  bool ok() const { return failures == 0; }
};

struct GradCheckOptions {
  double step = 1e-6;
  double rel_tol = 1e-4;
  /// Entries whose analytic and numeric values both sit below this are
  /// compared absolutely instead (relative error is meaningless near 0).
  double abs_floor = 1e-7;
  /// Cap on checked entries per tensor (0 = all); entries are sampled evenly.
  std::size_t max_entries = 0;
};

inline GradCheckResult check_gradients(const std::function<Var()>& loss_fn,
                                       const std::vector<std::pair<std::string, Var>>& params,
                                       GradCheckOptions opt = {}) {
  for (auto [name, p] : params) p.zero_grad();
  Var loss = loss_fn();
  backward(loss);

  GradCheckResult res;
  for (auto [name, p] : params) {
    Tensor analytic = p.grad();
    if (analytic.empty()) analytic = Tensor(p.shape(), 0.0);
    Tensor& value = p.mutable_value();
    const std::size_t n = value.size();
    const std::size_t stride =
        (opt.max_entries == 0 || n <= opt.max_entries) ? 1 : n / opt.max_entries;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = value[i];
      double plus, minus;
      {
        NoGradGuard guard;
        value[i] = orig + opt.step;
        plus = loss_fn().item();
        value[i] = orig - opt.step;
        minus = loss_fn().item();
        value[i] = orig;
      }
      const double numeric = (plus - minus) / (2.0 * opt.step);
      const double a = analytic[i];
      const double diff = std::abs(a - numeric);
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double rel = scale > 0.0 ? diff / scale : 0.0;
      const bool pass = diff <= opt.abs_floor || rel <= opt.rel_tol;
      ++res.checked;
      if (!pass) ++res.failures;
      if (diff > opt.abs_floor && rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(numeric);
      }
      res.max_abs_error = std::max(res.max_abs_error, diff);
    }
  }
  return res;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace qpm::testing
