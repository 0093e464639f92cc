#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "objsdf/common/error.h"
#include "objsdf/common/rng.h"
#include "objsdf/evalmesh/evalmesh.h"

using namespace objsdf;

namespace {

const geo::BBox kCube{Vec3::Constant(-1.5), Vec3::Constant(1.5)};

Eigen::VectorXd sphere_values(const Matrix& p) { return p.rowwise().norm().array() - 1.0; }

std::set<std::array<double, 3>> vertex_set(const mesh::TriangleMesh& m) {
  std::set<std::array<double, 3>> s;
  for (const Vec3& v : m.vertices) s.insert({v.x(), v.y(), v.z()});
  return s;
}

Matrix sphere_points(double r, int n, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(n, 3);
  for (int i = 0; i < n; ++i) {
    const Vec3 u = Vec3(normal01(rng), normal01(rng), normal01(rng)).normalized();
    m.row(i) = (r * u).transpose();
  }
  return m;
}

img::LabelMap labels(std::vector<int> v) {
  img::LabelMap m(static_cast<int>(v.size()), 1);
  m.data = std::move(v);
  return m;
}

}  // namespace

TEST_CASE("marching cubes: constant positive field gives an empty mesh") {
  const auto m = mesh::marching_cubes([](const Matrix& p) { return Eigen::VectorXd::Ones(p.rows()); }, kCube, 8);
  CHECK(m.empty());
  CHECK(m.vertices.empty());
  CHECK_THROWS(mesh::marching_cubes(sphere_values, kCube, 1));
}

TEST_CASE("marching cubes: unit sphere at resolution 64") {
  const auto m = mesh::marching_cubes(sphere_values, kCube, 64);
  REQUIRE_FALSE(m.empty());
  m.validate();
  const double cell = 3.0 / 64.0;
  double worst = 0.0;
  for (const Vec3& v : m.vertices) worst = std::max(worst, std::abs(v.norm() - 1.0));
  CHECK(worst <= 2.0 * cell);
  // Residual bound for a 1-Lipschitz field.
  CHECK(worst <= cell);
  // Closed surface: every undirected edge is shared by exactly two triangles,
  // and consistent winding uses each directed edge once.
  std::map<std::pair<int, int>, int> undirected, directed;
  for (const auto& t : m.triangles) {
    for (int c = 0; c < 3; ++c) {
      const int a = t[c], b = t[(c + 1) % 3];
      ++undirected[{std::min(a, b), std::max(a, b)}];
      ++directed[{a, b}];
    }
  }
  for (const auto& [e, n] : undirected) CHECK(n == 2);
  for (const auto& [e, n] : directed) CHECK(n == 1);
  // Outward winding.
  int outward = 0;
  for (const auto& t : m.triangles) {
    const Vec3 a = m.vertices[static_cast<std::size_t>(t[0])], b = m.vertices[static_cast<std::size_t>(t[1])],
               c = m.vertices[static_cast<std::size_t>(t[2])];
    outward += (b - a).cross(c - a).dot(a + b + c) > 0.0;
  }
  CHECK(outward == static_cast<int>(m.triangles.size()));
  CHECK(m.area() == doctest::Approx(4.0 * M_PI).epsilon(0.01));
}

TEST_CASE("marching cubes: sign flip keeps the surface and reverses winding") {
  const auto a = mesh::marching_cubes(sphere_values, kCube, 24);
  const auto b = mesh::marching_cubes([](const Matrix& p) { return Eigen::VectorXd(-sphere_values(p)); }, kCube, 24);
  CHECK(vertex_set(a) == vertex_set(b));
  // Complementary sign patterns may split a crossing quad along the other
  // diagonal, so the areas agree closely but not exactly.
  CHECK(a.area() == doctest::Approx(b.area()).epsilon(1e-3));
  for (const auto& t : b.triangles) {
    const Vec3 p = b.vertices[static_cast<std::size_t>(t[0])], q = b.vertices[static_cast<std::size_t>(t[1])],
               r = b.vertices[static_cast<std::size_t>(t[2])];
    CHECK((q - p).cross(r - p).dot(p + q + r) < 0.0);
  }
}

TEST_CASE("marching cubes: exact zeros at grid corners do not create degenerate triangles") {
  // Plane through grid corners: z = 0 lies exactly on a grid layer.
  const geo::BBox box{Vec3::Constant(-1.0), Vec3::Constant(1.0)};
  const auto m = mesh::marching_cubes([](const Matrix& p) { return Eigen::VectorXd(p.col(2)); }, box, 8);
  m.validate();
  CHECK(m.area() == doctest::Approx(4.0).epsilon(1e-9));
}

TEST_CASE("extraction: analytic stand-in objects and scene") {
  const auto scene = geo::reference_scene();
  const render::AnalyticField field(scene, 0.1, 20.0);
  const int res = 48;
  const auto meshes = mesh::extract_all_meshes(field, scene.bbox, res);
  REQUIRE(meshes.objects.size() == 3);
  const double cell = scene.bbox.size().maxCoeff() / res;
  for (int i = 0; i < 3; ++i) {
    const auto& m = meshes.objects[static_cast<std::size_t>(i)];
    REQUIRE_FALSE(m.empty());
    m.validate();
    double worst = 0.0;
    for (const Vec3& v : m.vertices)
      worst = std::max(worst, std::abs(geo::primitive_sdf(scene.primitives[static_cast<std::size_t>(i)], v)));
    CHECK(worst <= 2.0 * cell);
  }
  double worst = 0.0;
  for (const Vec3& v : meshes.scene.vertices) worst = std::max(worst, std::abs(geo::scene_sdf_analytic(scene, v).d));
  CHECK(worst <= 2.0 * cell);
  const auto single = mesh::extract_object_mesh(field, 0, scene.bbox, res);
  CHECK(single.vertices.size() == meshes.objects[0].vertices.size());
  CHECK_THROWS(mesh::extract_object_mesh(field, 3, scene.bbox, res));
  CHECK_THROWS(mesh::extract_object_mesh(field, -1, scene.bbox, res));
}

template <typename... Args>
concept Extractable = requires(Args... args) { mesh::extract_object_mesh(args...); };

TEST_CASE("extraction: the object API takes no level parameter") {
  CHECK(Extractable<const fields::FieldModel&, int, const geo::BBox&, int>);
  CHECK_FALSE(Extractable<const fields::FieldModel&, int, const geo::BBox&, int, double>);
  CHECK_FALSE(Extractable<const render::ImplicitField&, int, const geo::BBox&, int, double>);
}

TEST_CASE("chamfer: closed-form examples") {
  const Matrix a = sphere_points(1.0, 500, 3);
  CHECK(mesh::chamfer_distance(a, a) == 0.0);
  Matrix p(1, 3), q(1, 3);
  p << 0, 0, 0;
  q << 1, 0, 0;
  CHECK(mesh::chamfer_distance(p, q) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS(mesh::chamfer_distance(Matrix(0, 3), q));
  const Matrix s1 = sphere_points(1.0, 100000, 5), s2 = sphere_points(1.1, 100000, 6);
  const double cd = mesh::chamfer_distance(s1, s2);
  CHECK(std::abs(cd - 0.01) <= 0.001);
}

TEST_CASE("chamfer: symmetry and monotonicity under coincident points") {
  const Matrix a = sphere_points(1.0, 2000, 7), b = sphere_points(1.2, 1500, 8);
  CHECK(mesh::chamfer_distance(a, b) == mesh::chamfer_distance(b, a));
  // Adding points of b to a makes a closer to b.
  Matrix a2(a.rows() + 300, 3);
  a2 << a, b.topRows(300);
  CHECK(mesh::chamfer_distance(a2, b) <= mesh::chamfer_distance(a, b));
}

TEST_CASE("surface sampling: mesh, primitives and scene") {
  const auto m = mesh::marching_cubes(sphere_values, kCube, 32);
  const Matrix s = mesh::sample_surface(m, 5000, 1);
  CHECK(s.rows() == 5000);
  const double cell = 3.0 / 32.0;
  for (Eigen::Index i = 0; i < s.rows(); ++i) CHECK(std::abs(s.row(i).norm() - 1.0) < cell);
  CHECK(mesh::sample_surface(m, 5000, 1) == s);

  const auto scene = geo::reference_scene();
  const geo::BBox crop = scene.bbox.shrunk(0.02);
  for (const auto& prim : scene.primitives) {
    const Matrix p = mesh::sample_primitive_surface(prim, crop, 4000, 2);
    CHECK(p.rows() == 4000);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      CHECK(std::abs(geo::primitive_sdf(prim, p.row(i).transpose())) < 1e-9);
      CHECK(crop.contains(p.row(i).transpose()));
    }
  }
  // Box faces are hit in proportion to their area.
  geo::Primitive box;
  box.kind = geo::PrimitiveKind::kBox;
  box.half_extents = Vec3(1.0, 0.5, 0.25);
  const Matrix pb = mesh::sample_primitive_surface(box, kCube, 70000, 3);
  int on_x = 0;
  for (Eigen::Index i = 0; i < pb.rows(); ++i) on_x += std::abs(std::abs(pb(i, 0)) - 1.0) < 1e-12;
  // Face areas: x 1 * 0.5, y 2 * 0.5, z 2 * 1.
  CHECK(on_x / 70000.0 == doctest::Approx(0.5 / 3.5).epsilon(0.03));

  const Matrix sc = mesh::sample_scene_surface(scene, crop, 6000, 4);
  CHECK(std::abs(sc.rows() - 6000) <= 3);
  for (Eigen::Index i = 0; i < sc.rows(); ++i) CHECK(std::abs(geo::scene_sdf_analytic(scene, sc.row(i).transpose()).d) < 1e-9);
}

TEST_CASE("psnr: closed forms, cap and monotonicity") {
  img::Image a(4, 4, 3, 0.5), b = a;
  CHECK(mesh::psnr(a, b) == mesh::kPsnrCap);
  for (double& v : b.data) v += 0.1;
  CHECK(mesh::psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));
  b = a;
  for (double& v : b.data) v += 0.01;
  CHECK(mesh::psnr(a, b) == doctest::Approx(40.0).epsilon(1e-9));
  CHECK_THROWS(mesh::psnr(a, img::Image(4, 3, 3)));
  Rng rng(3);
  img::Image noise(16, 16, 3);
  for (double& v : noise.data) v = uniform01(rng) - 0.5;
  const img::Image base(16, 16, 3, 0.5);
  double last = 1e9;
  for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    img::Image c = base;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += amp * noise.data[i];
    const double p = mesh::psnr(base, c);
    CHECK(p < last);
    last = p;
  }
}

TEST_CASE("miou: closed forms and permutation invariance") {
  const auto g = labels({1, 1, 1, 1, 0, 0, 0, 0});
  CHECK(mesh::miou(g, g, 2) == 1.0);
  CHECK(mesh::miou(labels({1, 1}), labels({0, 0}), 2) == 0.0);
  const auto p = labels({0, 0, 1, 1, 1, 1, 0, 0});
  const auto r = mesh::iou(p, g, 2);
  CHECK(*r.per_class[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(*r.per_class[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(r.mean == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  // Class 2 is absent from gt and does not count.
  const auto r3 = mesh::iou(labels({2, 0, 1, 1, 1, 1, 0, 0}), g, 3);
  CHECK_FALSE(r3.per_class[2].has_value());
  Rng rng(9);
  std::vector<int> a(200), b(200);
  for (int i = 0; i < 200; ++i) {
    a[static_cast<std::size_t>(i)] = static_cast<int>(uniform_index(rng, 4));
    b[static_cast<std::size_t>(i)] = static_cast<int>(uniform_index(rng, 4));
  }
  const int perm[4] = {2, 0, 3, 1};
  std::vector<int> pa(a), pb(b);
  for (auto& x : pa) x = perm[x];
  for (auto& x : pb) x = perm[x];
  CHECK(mesh::miou(labels(pa), labels(pb), 4) == doctest::Approx(mesh::miou(labels(a), labels(b), 4)).epsilon(1e-15));
}

TEST_CASE("ply: binary round trip") {
  const auto m = mesh::marching_cubes(sphere_values, kCube, 12);
  const auto path = (std::filesystem::temp_directory_path() / ("objsdf_mesh_" + std::to_string(::getpid()) + ".ply")).string();
  mesh::write_ply(path, m);
  const auto back = mesh::read_ply(path);
  REQUIRE(back.vertices.size() == m.vertices.size());
  CHECK(back.triangles == m.triangles);
  for (std::size_t i = 0; i < m.vertices.size(); ++i) CHECK((back.vertices[i] - m.vertices[i]).norm() < 1e-6);
  std::filesystem::remove(path);
}

TEST_CASE("crop: keeps rows inside the box") {
  Matrix p(3, 3);
  p << 0, 0, 0, 2, 0, 0, 0.5, -0.5, 0.9;
  const Matrix c = mesh::crop_points(p, geo::BBox{Vec3::Constant(-1), Vec3::Constant(1)});
  CHECK(c.rows() == 2);
}
