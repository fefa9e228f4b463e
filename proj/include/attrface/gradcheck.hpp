#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "attrface/rng.hpp"
#include "attrface/tensor.hpp"

namespace attrface {

/// Builds a scalar loss on the supplied tape from the current parameter values.
using ScalarFn = std::function<Tensor<double>(Tape<double>&)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  // Coordinates checked per parameter; all of them when the parameter is smaller.
  std::size_t max_coords_per_param = 64;
  std::uint64_t seed = 7;
  // Scalar whose central differences are compared. Defaults to `f` itself.
  // Set it when the analytic gradient of `f` is, by construction, the gradient
  // of a different scalar (e.g. a composition containing gradient reversal).
  ScalarFn reference;
  // Multiplier applied to the finite-difference gradient before comparison.
  double sign = 1.0;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Compares backward() gradients of `f` with central differences.
/// Relative error is |analytic - fd| / max(1, |fd|).
inline GradCheckReport finite_difference_check(const ScalarFn& f, std::vector<Parameter<double>*> params,
                                               const GradCheckOptions& options) {
  if (!(options.step > 0)) throw ConfigError("step", "must be positive");
  const ScalarFn& ref = options.reference ? options.reference : f;

  auto evaluate = [](const ScalarFn& fn) {
    Tape<double> tape;
    return fn(tape).item();
  };
  if (evaluate(f) != evaluate(f)) throw Error("finite_difference_check: f is not deterministic");
  if (options.reference && evaluate(ref) != evaluate(ref)) {
    throw Error("finite_difference_check: reference is not deterministic");
  }

  for (auto* p : params) p->tensor.zero_grad();
  {
    Tape<double> tape;
    auto loss = f(tape);
    tape.backward(loss);
  }

  GradCheckReport report;
  report.tolerance = options.tolerance;
  Rng rng(options.seed);
  for (auto* p : params) {
    ParamCheck check{p->name, 0.0, 0};
    const std::size_t n = p->tensor.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > options.max_coords_per_param) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    std::vector<double> analytic(n, 0.0);
    if (p->tensor.has_grad()) std::copy(p->tensor.grad().begin(), p->tensor.grad().end(), analytic.begin());
    auto values = p->tensor.mutable_values();
    for (std::size_t i : coords) {
      const double original = values[i];
      values[i] = original + options.step;
      const double up = evaluate(ref);
      values[i] = original - options.step;
      const double down = evaluate(ref);
      values[i] = original;
      const double fd = options.sign * (up - down) / (2.0 * options.step);
      const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
      check.max_rel_error = std::max(check.max_rel_error, err);
      ++check.coords_checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.params.push_back(std::move(check));
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

inline GradCheckReport finite_difference_check(const ScalarFn& f, std::vector<Parameter<double>*> params, double step,
                                               double tolerance) {
  GradCheckOptions options;
  options.step = step;
  options.tolerance = tolerance;
  return finite_difference_check(f, std::move(params), options);
}

}  // namespace attrface
