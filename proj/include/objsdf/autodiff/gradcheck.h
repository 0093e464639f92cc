#pragma once

#include <functional>

#include <Eigen/Core>

#include "objsdf/autodiff/tape.h"

namespace objsdf::ad {

/// A differentiable scalar function: given a fresh tape and the input as an
/// n x 1 leaf, records the computation and returns a 1x1 node.
using ScalarFn = std::function<Var(Tape&, const Var&)>;

struct ValueAndGradient {
  double value = 0.0;
  Eigen::VectorXd gradient;
};

/// One forward and one reverse sweep of f at x.
ValueAndGradient evaluate_with_gradient(const ScalarFn& f, const Eigen::VectorXd& x);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
/// Throws NonFiniteError when an evaluation is not finite.
Eigen::VectorXd finite_difference_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                           const Eigen::VectorXd& x, double h = 1e-4);
Eigen::VectorXd finite_difference_gradient(const ScalarFn& f, const Eigen::VectorXd& x, double h = 1e-4);

struct GradientCheckReport {
  bool pass = false;
  double max_relative_error = 0.0;
  Eigen::Index worst = -1;
  double worst_reverse = 0.0;
  double worst_finite = 0.0;
  Eigen::VectorXd reverse;
  Eigen::VectorXd finite;
};

/// Relative error per coordinate is |a - b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor);

/// Compares reverse-mode and finite-difference gradients. The caller keeps
/// x away from kinks (ties of min/max, zero of abs/relu).
GradientCheckReport gradient_check(const ScalarFn& f, const Eigen::VectorXd& x, double tol, double h = 1e-4,
                                   double floor = 1e-6);

}  // namespace objsdf::ad
