#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "objsdf/autodiff/gradcheck.h"
#include "objsdf/autodiff/tape.h"
#include "objsdf/common/error.h"
#include "objsdf/common/rng.h"

using namespace objsdf;
using namespace objsdf::ad;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * (2.0 * uniform01(rng) - 1.0);
  return m;
}

Eigen::VectorXd random_vector(Rng& rng, Eigen::Index n, double lo, double hi) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = lo + (hi - lo) * uniform01(rng);
  return v;
}

// Weighted sum so every output entry contributes a distinct coefficient.
Var weighted(Tape& t, const Var& v, std::uint64_t seed) {
  Rng rng(seed);
  return sum(v * t.constant(random_matrix(rng, v.rows(), v.cols(), 1.0)));
}

struct PrimitiveCase {
  const char* name;
  double lo, hi;
  int n;
  ScalarFn f;
};

std::vector<PrimitiveCase> primitive_cases() {
  std::vector<PrimitiveCase> c;
  auto half = [](Tape&, const Var& x, int i) { return slice_cols(reshape(x, 1, x.rows()), i * (x.rows() / 2), x.rows() / 2); };
  c.push_back({"add", -2, 2, 6, [=](Tape& t, const Var& x) { return weighted(t, half(t, x, 0) + half(t, x, 1), 1); }});
  c.push_back({"sub", -2, 2, 6, [=](Tape& t, const Var& x) { return weighted(t, half(t, x, 0) - half(t, x, 1), 2); }});
  c.push_back({"mul", -2, 2, 6, [=](Tape& t, const Var& x) { return weighted(t, half(t, x, 0) * half(t, x, 1), 3); }});
  c.push_back({"min", -2, 2, 6, [=](Tape& t, const Var& x) { return weighted(t, min(half(t, x, 0), half(t, x, 1)), 4); }});
  c.push_back({"max", -2, 2, 6, [=](Tape& t, const Var& x) { return weighted(t, max(half(t, x, 0), half(t, x, 1)), 5); }});
  c.push_back({"neg", -2, 2, 4, [](Tape& t, const Var& x) { return weighted(t, -x, 6); }});
  c.push_back({"scale", -2, 2, 4, [](Tape& t, const Var& x) { return weighted(t, 3.5 * x, 7); }});
  c.push_back({"add_scalar", -2, 2, 4, [](Tape& t, const Var& x) { return weighted(t, x + 1.25, 8); }});
  c.push_back({"sin", -3, 3, 4, [](Tape& t, const Var& x) { return weighted(t, sin(x), 9); }});
  c.push_back({"cos", -3, 3, 4, [](Tape& t, const Var& x) { return weighted(t, cos(x), 10); }});
  c.push_back({"exp", -2, 2, 4, [](Tape& t, const Var& x) { return weighted(t, exp(x), 11); }});
  c.push_back({"log", 0.2, 3, 4, [](Tape& t, const Var& x) { return weighted(t, log(x), 12); }});
  c.push_back({"reciprocal", 0.3, 3, 4, [](Tape& t, const Var& x) { return weighted(t, reciprocal(x), 13); }});
  c.push_back({"sqrt", 0.2, 3, 4, [](Tape& t, const Var& x) { return weighted(t, sqrt(x), 14); }});
  c.push_back({"square", -2, 2, 4, [](Tape& t, const Var& x) { return weighted(t, square(x), 15); }});
  c.push_back({"abs", 0.1, 2, 4, [](Tape& t, const Var& x) { return weighted(t, abs(-1.0 * x), 16); }});
  c.push_back({"relu", 0.05, 2, 4, [](Tape& t, const Var& x) { return weighted(t, relu(x) + relu(-1.0 * x), 17); }});
  c.push_back({"softplus", -2, 2, 4, [](Tape& t, const Var& x) { return weighted(t, softplus(x, 3.0), 18); }});
  c.push_back({"sigmoid", -2, 2, 4, [](Tape& t, const Var& x) { return weighted(t, sigmoid(x, 2.0), 19); }});
  c.push_back({"matmul", -1, 1, 12, [](Tape& t, const Var& x) {
                 const Var a = reshape(slice_cols(reshape(x, 1, 12), 0, 6), 2, 3);
                 const Var b = reshape(slice_cols(reshape(x, 1, 12), 6, 6), 3, 2);
                 return weighted(t, matmul(a, b), 20);
               }});
  c.push_back({"affine", -1, 1, 11, [](Tape& t, const Var& x) {
                 const Var r = reshape(x, 1, 11);
                 const Var in = reshape(slice_cols(r, 0, 4), 2, 2);
                 const Var w = reshape(slice_cols(r, 4, 6), 2, 3);
                 const Var b = slice_cols(r, 10, 1);
                 return weighted(t, affine(in, w, broadcast(b, 1, 3)), 21);
               }});
  c.push_back({"broadcast", -1, 1, 3, [](Tape& t, const Var& x) {
                 return weighted(t, broadcast(x, 3, 4), 22) + weighted(t, broadcast(reshape(x, 1, 3), 5, 3), 23);
               }});
  c.push_back({"row_col_sum", -1, 1, 6, [](Tape& t, const Var& x) {
                 const Var m = reshape(x, 2, 3);
                 return weighted(t, row_sum(m), 24) + weighted(t, col_sum(m), 25);
               }});
  c.push_back({"mean", -1, 1, 6, [](Tape& t, const Var& x) { return mean(square(x)) + 0.0 * weighted(t, x, 26); }});
  c.push_back({"row_min", -1, 1, 6, [](Tape& t, const Var& x) { return weighted(t, row_min(reshape(x, 2, 3)), 27); }});
  c.push_back({"concat_cols", -1, 1, 4, [](Tape& t, const Var& x) {
                 const Var parts[] = {x, square(x)};
                 return weighted(t, concat_cols(parts), 28);
               }});
  c.push_back({"tile_ops", -1, 1, 8, [](Tape& t, const Var& x) {
                 const Var y = reshape(slice_cols(reshape(x, 1, 8), 0, 2), 1, 2);
                 const Var tall = reshape(x, 4, 2);
                 const Var prod = mul_tiled(tall, y, 4);
                 return weighted(t, sum_tiles(prod, 2), 29) + weighted(t, tile_rows(y, 3), 30) +
                        weighted(t, tile_norm(tall, 2), 31);
               }});
  c.push_back({"cumsum_exclusive", -1, 1, 6, [](Tape& t, const Var& x) {
                 return weighted(t, cumsum_exclusive(reshape(x, 2, 3)), 32);
               }});
  c.push_back({"segment_weighted_sum", -1, 1, 8, [](Tape& t, const Var& x) {
                 const Var r = reshape(x, 1, 8);
                 const Var w = reshape(slice_cols(r, 0, 4), 2, 2);
                 const Var v = reshape(slice_cols(r, 4, 4), 4, 1);
                 const Var vv = concat_cols(std::vector<Var>{v, square(v)});
                 return weighted(t, segment_weighted_sum(w, vv), 33);
               }});
  c.push_back({"gather", -1, 1, 5, [](Tape& t, const Var& x) {
                 return weighted(t, gather(x, {4, 0, 0, 2, 3, 1}, 2, 3), 34);
               }});
  c.push_back({"laplace_density", -0.5, 0.5, 5, [](Tape& t, const Var& x) {
                 const Var r = reshape(x, 1, 5);
                 const Var beta = exp(slice_cols(r, 4, 1)) * t.scalar_constant(0.1);
                 return weighted(t, laplace_density(slice_cols(r, 0, 4), beta), 35);
               }});
  c.push_back({"softmax_cross_entropy", -2, 2, 6, [](Tape& t, const Var& x) {
                 const int labels[] = {2, 0};
                 return weighted(t, softmax_cross_entropy(reshape(x, 2, 3), labels), 36);
               }});
  return c;
}

Var mlp(Tape& t, const Var& x, const std::vector<Matrix>& ws, const std::vector<Matrix>& bs, bool relu_act) {
  Var h = reshape(x, 1, x.rows());
  for (std::size_t l = 0; l < ws.size(); ++l) {
    h = affine(h, t.constant(ws[l]), t.constant(bs[l]));
    if (l + 1 < ws.size()) h = relu_act ? relu(h) : softplus(h, 1.0);
  }
  return sum(h);
}

}  // namespace

TEST_CASE("evaluate_with_gradient on a quadratic") {
  const auto r = evaluate_with_gradient([](Tape&, const Var& x) { return sum(square(x)); },
                                        Eigen::Vector2d(1.0, 2.0));
  CHECK(r.value == 5.0);
  CHECK(r.gradient(0) == 4.0 / 2.0);
  CHECK(r.gradient(1) == 4.0);
}

TEST_CASE("constant function has zero gradient") {
  const auto r = evaluate_with_gradient([](Tape& t, const Var&) { return t.scalar_constant(3.0); },
                                        Eigen::Vector3d(1.0, -2.0, 0.5));
  CHECK(r.value == 3.0);
  CHECK(r.gradient.isZero(0.0));
  const Eigen::VectorXd fd = finite_difference_gradient(
      [](const Eigen::VectorXd&) { return 7.0; }, Eigen::Vector3d(0.1, 0.2, 0.3));
  CHECK(fd.isZero(0.0));
}

TEST_CASE("finite differences on closed forms") {
  Eigen::VectorXd x(1);
  x(0) = 3.0;
  const auto g = finite_difference_gradient([](const Eigen::VectorXd& p) { return p(0) * p(0); }, x, 1e-4);
  CHECK(std::abs(g(0) - 6.0) <= 1e-7);
  x(0) = 0.0;
  const auto e = finite_difference_gradient([](const Eigen::VectorXd& p) { return std::exp(p(0)); }, x, 1e-4);
  CHECK(std::abs(e(0) - 1.0) <= 2e-9);
  CHECK_THROWS_AS(finite_difference_gradient([](const Eigen::VectorXd& p) { return std::log(p(0)); }, x, 1e-4),
                  NonFiniteError);
  CHECK_THROWS(finite_difference_gradient([](const Eigen::VectorXd& p) { return p(0); }, x, 0.0));
}

TEST_CASE("gradient_check passes on smooth functions and flags a corrupted rule") {
  Eigen::VectorXd x(1);
  x(0) = 0.7;
  const auto ok = gradient_check([](Tape&, const Var& v) { return sum(sin(v) + v * square(v)); }, x, 1e-5);
  CHECK(ok.pass);
  x(0) = 1.0;
  CHECK(gradient_check([](Tape&, const Var& v) { return sum(abs(v)); }, x, 1e-5).pass);

  const auto bad = gradient_check(
      [](Tape& t, const Var& v) {
        t.set_backward_fault(OpKind::kSin, 1.5);
        return sum(sin(v) + square(v));
      },
      Eigen::Vector3d(0.1, 0.4, -0.3), 1e-5);
  CHECK_FALSE(bad.pass);
  CHECK(bad.worst >= 0);
  CHECK(bad.max_relative_error > 1e-2);
  CHECK(bad.worst_reverse != doctest::Approx(bad.worst_finite));
}

TEST_CASE("every primitive matches finite differences at 100 random points") {
  Rng rng(1234);
  for (const auto& pc : primitive_cases()) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Eigen::VectorXd x = random_vector(rng, pc.n, pc.lo, pc.hi);
      if (std::string(pc.name) == "min" || std::string(pc.name) == "max" || std::string(pc.name) == "row_min") {
        // Keep clear of ties.
        bool near_tie = true;
        while (near_tie) {
          near_tie = false;
          for (int i = 0; i < pc.n; ++i)
            for (int j = i + 1; j < pc.n; ++j)
              if (std::abs(x(i) - x(j)) < 1e-3) near_tie = true;
          if (near_tie) x = random_vector(rng, pc.n, pc.lo, pc.hi);
        }
      }
      const auto rep = gradient_check(pc.f, x, 1e-5);
      worst = std::max(worst, rep.max_relative_error);
    }
    INFO(pc.name);
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("random softplus MLP gradient matches finite differences") {
  Rng rng(77);
  std::vector<Matrix> ws = {random_matrix(rng, 3, 16, 0.8), random_matrix(rng, 16, 16, 0.5),
                            random_matrix(rng, 16, 1, 0.5)};
  std::vector<Matrix> bs = {random_matrix(rng, 1, 16, 0.1), random_matrix(rng, 1, 16, 0.1),
                            random_matrix(rng, 1, 1, 0.1)};
  for (int trial = 0; trial < 10; ++trial) {
    const auto rep = gradient_check([&](Tape& t, const Var& x) { return mlp(t, x, ws, bs, false); },
                                    random_vector(rng, 3, -1, 1), 1e-5);
    CHECK(rep.pass);
  }
}

TEST_CASE("gradient is linear in the function") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::VectorXd x = random_vector(rng, 4, -1, 1);
    const double a = 2.0 * uniform01(rng) - 1.0, b = 2.0 * uniform01(rng) - 1.0;
    auto f = [](Tape&, const Var& v) { return sum(sin(v) * exp(v)); };
    auto g = [](Tape&, const Var& v) { return sum(softplus(square(v), 2.0)); };
    const auto gf = evaluate_with_gradient(f, x).gradient;
    const auto gg = evaluate_with_gradient(g, x).gradient;
    const auto gl = evaluate_with_gradient([&](Tape& t, const Var& v) { return a * f(t, v) + b * g(t, v); }, x).gradient;
    CHECK((gl - (a * gf + b * gg)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("tape determinism and replay") {
  Rng rng(9);
  std::vector<Matrix> ws = {random_matrix(rng, 3, 32, 0.8), random_matrix(rng, 32, 1, 0.5)};
  std::vector<Matrix> bs = {random_matrix(rng, 1, 32, 0.1), random_matrix(rng, 1, 1, 0.1)};
  const Eigen::VectorXd x = random_vector(rng, 3, -1, 1);
  auto run = [&] {
    Tape t;
    const Var w0 = t.leaf(ws[0]);
    const Var in = t.leaf(Matrix(x.transpose()));
    const Var out = sum(softplus(affine(in, w0, t.constant(bs[0])), 100.0));
    t.backward(out);
    CHECK(t.replay_matches());
    return Matrix(w0.grad());
  };
  const Matrix g1 = run(), g2 = run();
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), sizeof(double) * g1.size()) == 0);
}

TEST_CASE("topological order and error reporting") {
  Tape t;
  const Var a = t.leaf(Matrix::Constant(2, 2, 1.0));
  const Var b = exp(a);
  for (std::size_t i = 0; i < t.size(); ++i)
    for (auto in : t.node(static_cast<std::int32_t>(i)).inputs) CHECK(in < static_cast<std::int32_t>(i));
  CHECK_THROWS_AS(t.record(OpKind::kCount_, std::vector<Var>{a}), Error);
  CHECK_THROWS_AS(a + t.leaf(Matrix::Zero(3, 1)), ShapeError);
  const Var z = t.constant(Matrix::Zero(2, 2));
  try {
    (void)log(z);
    FAIL("expected non-finite error");
  } catch (const NonFiniteError& e) {
    CHECK(e.where() == "node");
    CHECK(e.index() == static_cast<std::int64_t>(t.size()));
  }
  Tape other;
  const Var c = other.leaf(Matrix::Zero(2, 2));
  CHECK_THROWS(b + c);
}

TEST_CASE("ties route the gradient to the lowest index") {
  Tape t;
  const Var a = t.leaf(Matrix::Constant(1, 1, 0.0));
  const Var b = t.leaf(Matrix::Constant(1, 1, 0.0));
  t.backward(sum(min(a, b)));
  CHECK(a.grad()(0, 0) == 1.0);
  CHECK((b.grad().size() == 0 || b.grad()(0, 0) == 0.0));

  Tape t2;
  const Var m = t2.leaf(Matrix::Zero(1, 3));
  t2.backward(sum(row_min(m)));
  CHECK(m.grad()(0, 0) == 1.0);
  CHECK(m.grad()(0, 1) == 0.0);
  CHECK(m.grad()(0, 2) == 0.0);
}

TEST_CASE("softmax cross entropy clamps and stops the gradient") {
  Tape t;
  Matrix logits(1, 2);
  logits << -60.0, 0.0;  // p[0] ~ 8.8e-27, below the floor
  const Var l = t.leaf(logits);
  const int label[] = {0};
  const Var ce = softmax_cross_entropy(l, label);
  CHECK(ce.scalar() == doctest::Approx(-std::log(1e-12)).epsilon(1e-12));
  t.backward(sum(ce));
  CHECK(l.grad().isZero(0.0));
}
