#include "objsdf/autodiff/gradcheck.h"

#include <algorithm>
#include <cmath>

#include "objsdf/common/error.h"

namespace objsdf::ad {

namespace {

Matrix as_column(const Eigen::VectorXd& x) {
  Matrix m(x.size(), 1);
  for (Eigen::Index i = 0; i < x.size(); ++i) m(i, 0) = x(i);
  return m;
}

Var call(const ScalarFn& f, Tape& tape, const Eigen::VectorXd& x) {
  const Var in = tape.leaf(as_column(x));
  const Var out = f(tape, in);
  if (!out.valid() || out.tape() != &tape) throw Error("function returned a node of another tape");
  if (out.rows() != 1 || out.cols() != 1) throw ShapeError("function must return a 1x1 node");
  return out;
}

}  // namespace

ValueAndGradient evaluate_with_gradient(const ScalarFn& f, const Eigen::VectorXd& x) {
  Tape tape;
  const Var in = tape.leaf(as_column(x));
  const Var out = f(tape, in);
  if (!out.valid() || out.tape() != &tape) throw Error("function returned a node of another tape");
  tape.backward(out);
  ValueAndGradient r;
  r.value = out.scalar();
  const Matrix& g = in.grad();
  r.gradient = Eigen::VectorXd::Zero(x.size());
  if (g.size() == x.size()) {
    for (Eigen::Index i = 0; i < x.size(); ++i) r.gradient(i) = g(i, 0);
  }
  return r;
}

Eigen::VectorXd finite_difference_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                           const Eigen::VectorXd& x, double h) {
  if (!(h > 0.0)) throw Error("finite_difference_gradient: step must be positive");
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + h;
    const double fp = f(probe);
    probe(i) = x(i) - h;
    const double fm = f(probe);
    probe(i) = x(i);
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NonFiniteError("coordinate", i, "finite-difference evaluation");
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

Eigen::VectorXd finite_difference_gradient(const ScalarFn& f, const Eigen::VectorXd& x, double h) {
  return finite_difference_gradient(
      [&](const Eigen::VectorXd& p) {
        Tape tape;
        return call(f, tape, p).scalar();
      },
      x, h);
}

double relative_error(double a, double b, double floor) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

GradientCheckReport gradient_check(const ScalarFn& f, const Eigen::VectorXd& x, double tol, double h,
                                   double floor) {
  GradientCheckReport rep;
  rep.reverse = evaluate_with_gradient(f, x).gradient;
  rep.finite = finite_difference_gradient(f, x, h);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double e = relative_error(rep.reverse(i), rep.finite(i), floor);
    if (rep.worst < 0 || e > rep.max_relative_error) {
      rep.max_relative_error = e;
      rep.worst = i;
      rep.worst_reverse = rep.reverse(i);
      rep.worst_finite = rep.finite(i);
    }
  }
  rep.pass = rep.max_relative_error <= tol;
  return rep;
}

}  // namespace objsdf::ad
