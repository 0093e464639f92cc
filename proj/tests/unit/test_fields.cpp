#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "objsdf/autodiff/gradcheck.h"
#include "objsdf/common/error.h"
#include "objsdf/common/rng.h"
#include "objsdf/fields/field_model.h"

using namespace objsdf;
using namespace objsdf::fields;

namespace {

FieldShape tiny_shape(int k = 3) {
  FieldShape s;
  s.object_count = k;
  s.phi_width = 16;
  s.phi_layers = 3;
  s.feature_dim = 8;
  s.theta_width = 16;
  s.theta_layers = 2;
  return s;
}

Matrix random_points(Rng& rng, int n, double half) {
  Matrix p(n, 3);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = half * (2.0 * uniform01(rng) - 1.0);
  return p;
}

bool same_bits(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("positional encoding closed forms") {
  const Eigen::VectorXd z = positional_encode(Vec3(Vec3::Zero()), 6);
  REQUIRE(z.size() == 39);
  for (int l = 0; l < 6; ++l)
    for (int c = 0; c < 3; ++c) {
      CHECK(z(3 + 6 * l + c) == 0.0);
      CHECK(z(6 + 6 * l + c) == 1.0);
    }
  const Eigen::VectorXd id = positional_encode(Vec3(0.1, -0.2, 0.3), 0);
  CHECK(id.size() == 3);
  CHECK(id(1) == -0.2);
  const Eigen::VectorXd h = positional_encode(Vec3(0.5, 0.0, 0.0), 1);
  CHECK(h(3) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(h(6)) < 1e-15);
  CHECK(positional_encode(Vec3(Vec3::Zero()), 4).size() == 27);
}

TEST_CASE("positional encoding derivative matches finite differences") {
  Rng rng(2);
  const Matrix p = random_points(rng, 5, 1.0);
  for (int axis = 0; axis < 3; ++axis) {
    Matrix pp = p, pm = p;
    pp.col(axis).array() += 1e-6;
    pm.col(axis).array() -= 1e-6;
    const Matrix fd = (positional_encode(pp, 6) - positional_encode(pm, 6)) / 2e-6;
    CHECK((fd - positional_encode_derivative(p, 6, axis)).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("declared input dimensions") {
  const FieldShape d = FieldShape::desk(3);
  CHECK(d.phi_input_dim() == 39);
  CHECK(d.dir_input_dim() == 27);
  CHECK(d.theta_input_dim() == 39 + 3 + 27 + 128);
  CHECK(d.phi_output_dim() == 3 + 128);
  const FieldShape f = FieldShape::full(4);
  CHECK(f.phi_width == 256);
  CHECK(f.feature_dim == 256);
  CHECK(f.phi_layers == 6);
  CHECK(f.theta_layers == 4);
  const FieldModel m = init_geometric(d, 0.5, 1);
  CHECK(m.phi_w.front().rows() == 39);
  CHECK(m.theta_w.front().rows() == d.theta_input_dim());
  CHECK(m.theta_w.back().cols() == 3);
  CHECK(std::abs(m.beta() - 0.1) < 1e-12);
  FieldShape bad = d;
  bad.object_count = 0;
  CHECK_THROWS_AS(init_geometric(bad, 0.5, 1), ConfigError);
  CHECK_THROWS_AS(init_geometric(d, -1.0, 1), ConfigError);
}

TEST_CASE("geometric init approximates a sphere") {
  const double r = 0.5;
  const FieldModel m = init_geometric(FieldShape::desk(3), r, 42);
  Matrix p(7, 3);
  p << 0, 0, 0, 2 * r, 0, 0, -2 * r, 0, 0, 0, 2 * r, 0, 0, -2 * r, 0, 0, 0, 2 * r, 0, 0, -2 * r;
  const PhiOutput o = object_sdf_forward(m, p, false);
  for (int k = 0; k < 3; ++k) {
    CHECK(o.sdf(0, k) < 0.0);
    for (int i = 1; i < 7; ++i) CHECK(o.sdf(i, k) > 0.0);
  }
  Rng rng(3);
  const Matrix box = random_points(rng, 2000, 1.5);
  const PhiOutput g = object_sdf_forward(m, box, true);
  double acc = 0.0;
  for (int k = 0; k < 3; ++k)
    for (Eigen::Index i = 0; i < box.rows(); ++i) {
      const Vec3 v(g.gradient(i, k), g.gradient(box.rows() + i, k), g.gradient(2 * box.rows() + i, k));
      acc += std::abs(v.norm() - 1.0);
    }
  CHECK(acc / (3.0 * box.rows()) <= 0.2);

  const FieldModel m2 = init_geometric(FieldShape::desk(3), r, 42);
  const auto a = m.parameters();
  const auto b = m2.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(same_bits(*a[i], *b[i]));
}

TEST_CASE("forward passes are deterministic and bounded") {
  const FieldModel m = init_geometric(tiny_shape(), 0.5, 7);
  Rng rng(4);
  const Matrix p = random_points(rng, 64, 1.0);
  const PhiOutput a = object_sdf_forward(m, p, true), b = object_sdf_forward(m, p, true);
  CHECK(same_bits(a.sdf, b.sdf));
  CHECK(same_bits(a.gradient, b.gradient));
  Matrix n = random_points(rng, 64, 1.0), d = random_points(rng, 64, 1.0);
  for (Eigen::Index i = 0; i < 64; ++i) {
    n.row(i).normalize();
    d.row(i).normalize();
  }
  Matrix z = 5.0 * random_points(rng, 64, 1.0).leftCols(3).replicate(1, 3).leftCols(8);
  const Matrix c = radiance_forward(m, p, n, d, z);
  CHECK(c.minCoeff() >= 0.0);
  CHECK(c.maxCoeff() <= 1.0);
  CHECK(same_bits(c, radiance_forward(m, p, n, d, z)));
  CHECK_THROWS_AS(radiance_forward(m, p, n, d, z.leftCols(4)), ShapeError);
}

TEST_CASE("forward-mode spatial gradient matches finite differences") {
  const FieldModel m = init_geometric(tiny_shape(), 0.5, 11);
  Rng rng(5);
  const Matrix p = random_points(rng, 20, 1.0);
  const PhiOutput o = object_sdf_forward(m, p, true);
  for (int c = 0; c < 3; ++c) {
    Matrix pp = p, pm = p;
    pp.col(c).array() += 1e-5;
    pm.col(c).array() -= 1e-5;
    const Matrix fd = (object_sdf_forward(m, pp, false).sdf - object_sdf_forward(m, pm, false).sdf) / 2e-5;
    CHECK((fd - o.gradient.middleRows(c * 20, 20)).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("scene_normal through the reverse sweep agrees with both other routes") {
  const FieldModel m = init_geometric(tiny_shape(), 0.5, 13);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 p(uniform01(rng) - 0.5, uniform01(rng) - 0.5, uniform01(rng) - 0.5);
    const Vec3 n = scene_normal(m, p);
    auto scene_sdf = [&](const Eigen::VectorXd& q) {
      Eigen::VectorXd d, z;
      object_sdf_forward(m, Vec3(q(0), q(1), q(2)), d, z);
      return d.minCoeff();
    };
    const Eigen::VectorXd fd = ad::finite_difference_gradient(scene_sdf, Eigen::Vector3d(p), 1e-5);
    for (int c = 0; c < 3; ++c) CHECK(ad::relative_error(n(c), fd(c), 1e-6) <= 1e-4);

    Matrix pm(1, 3);
    pm.row(0) = p.transpose();
    const PhiOutput o = object_sdf_forward(m, pm, true);
    Eigen::Index arg = 0;
    o.sdf.row(0).minCoeff(&arg);
    for (int c = 0; c < 3; ++c) CHECK(std::abs(o.gradient(c, arg) - n(c)) < 1e-10);
  }
}

TEST_CASE("tape graph reproduces the plain forward pass") {
  const FieldModel m = init_geometric(tiny_shape(), 0.5, 17);
  Rng rng(8);
  const Matrix p = random_points(rng, 10, 1.0);
  ad::Tape tape;
  const TapeParams tp = TapeParams::bind(tape, m);
  const PhiGraph g = phi_graph(m, tp, p, true);
  const PhiOutput o = object_sdf_forward(m, p, true);
  CHECK((g.sdf.value() - o.sdf).cwiseAbs().maxCoeff() < 1e-13);
  CHECK((g.feature.value() - o.feature).cwiseAbs().maxCoeff() < 1e-13);
  CHECK((g.gradient.value() - o.gradient).cwiseAbs().maxCoeff() < 1e-13);
  CHECK(tp.all().size() == m.parameters().size());
}

TEST_CASE("Eikonal term is differentiable with respect to the weights") {
  // Second-order check: gradient of mean (|grad d| - 1)^2 with respect to a
  // slice of hidden weights against central differences.
  FieldModel m = init_geometric(tiny_shape(2), 0.5, 19);
  Rng rng(9);
  const Matrix p = random_points(rng, 16, 1.0);
  auto loss_of = [&](const FieldModel& model, ad::Tape& tape, const TapeParams& tp) {
    const PhiGraph g = phi_graph(model, tp, p, true);
    const ad::Var norms = ad::tile_norm(g.gradient, 3);
    return ad::mean(ad::square(norms + -1.0));
  };
  ad::Tape tape;
  const TapeParams tp = TapeParams::bind(tape, m);
  const ad::Var l = loss_of(m, tape, tp);
  tape.backward(l);
  const Matrix grad = tp.phi_w[1].grad();
  for (int k = 0; k < 8; ++k) {
    const Eigen::Index i = k % grad.rows(), j = (3 * k) % grad.cols();
    auto eval = [&](double delta) {
      FieldModel mm = m;
      mm.phi_w[1](i, j) += delta;
      ad::Tape t;
      const TapeParams q = TapeParams::bind(t, mm);
      return loss_of(mm, t, q).scalar();
    };
    const double fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
    CHECK(ad::relative_error(grad(i, j), fd, 1e-7) <= 1e-4);
  }
}

TEST_CASE("checkpoint round trip") {
  FieldModel m = init_geometric(tiny_shape(), 0.5, 23);
  m.gamma = 17.5;
  m.log_beta(0, 0) = std::log(0.05);
  const Matrix extra = Matrix::Constant(2, 3, 1.25);
  const auto path = std::filesystem::temp_directory_path() / "objsdf_ckpt_test.bin";
  save_checkpoint(path.string(), m, {{"iteration", 12}}, {&extra});
  const LoadedCheckpoint c = load_checkpoint(path.string());
  CHECK(c.model.gamma == 17.5);
  CHECK(c.header.at("extra").at("iteration") == 12);
  CHECK(c.header.at("beta").get<double>() == doctest::Approx(0.05));
  REQUIRE(c.extra.size() == 1);
  CHECK(same_bits(c.extra[0], extra));
  const auto a = m.parameters();
  const auto b = c.model.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(same_bits(*a[i], *b[i]));
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  CHECK_THROWS_AS(load_checkpoint(path.string()), IoError);
  std::filesystem::remove(path);
}
