#include <cmath>
#include <vector>

#include "doctest.h"
#include "objsdf/autodiff/gradcheck.h"
#include "objsdf/common/error.h"
#include "objsdf/common/rng.h"
#include "objsdf/geometry/geometry.h"

using namespace objsdf;
using namespace objsdf::geo;

namespace {

Vec3 random_vec(Rng& rng, double half) {
  return Vec3(half * (2 * uniform01(rng) - 1), half * (2 * uniform01(rng) - 1), half * (2 * uniform01(rng) - 1));
}

Eigen::Quaterniond random_rotation(Rng& rng) {
  Eigen::Quaterniond q(normal01(rng), normal01(rng), normal01(rng), normal01(rng));
  return q.normalized();
}

Primitive random_primitive(Rng& rng, int id) {
  Primitive p;
  const auto k = uniform_index(rng, 3);
  p.kind = k == 0 ? PrimitiveKind::kSphere : (k == 1 ? PrimitiveKind::kBox : PrimitiveKind::kHalfSpace);
  p.pose = Pose::from_quaternion(random_rotation(rng), random_vec(rng, 1.0));
  p.radius = 0.1 + uniform01(rng);
  p.half_extents = Vec3(0.1 + uniform01(rng), 0.1 + uniform01(rng), 0.1 + uniform01(rng));
  p.object_id = id;
  return p;
}

}  // namespace

TEST_CASE("primitive signed distances") {
  Primitive s;
  s.kind = PrimitiveKind::kSphere;
  s.radius = 1.0;
  CHECK(primitive_sdf(s, Vec3(2, 0, 0)) == 1.0);
  CHECK(primitive_sdf(s, Vec3(0, 0, 0)) == -1.0);
  Primitive h;
  h.kind = PrimitiveKind::kHalfSpace;
  CHECK(primitive_sdf(h, Vec3(5, 5, 0.25)) == 0.25);
  Primitive b;
  b.kind = PrimitiveKind::kBox;
  b.half_extents = Vec3(1, 2, 3);
  CHECK(primitive_sdf(b, Vec3(0, 0, 0)) == -1.0);
  CHECK(primitive_sdf(b, Vec3(2, 0, 0)) == 1.0);
  CHECK(primitive_sdf(b, Vec3(4, 6, 3)) == doctest::Approx(5.0));
}

TEST_CASE("compose_min examples and errors") {
  const double a[] = {0.5, -0.2, 1.0};
  CHECK(compose_min(a).d == -0.2);
  CHECK(compose_min(a).label == 1);
  const double one[] = {0.3};
  CHECK(compose_min(one).label == 0);
  const double tie[] = {0.0, 0.0};
  CHECK(compose_min(tie).label == 0);
  CHECK_THROWS(compose_min(std::span<const double>()));
}

TEST_CASE("compose_min is a lower bound attained at the argmin") {
  Rng rng(1);
  for (int t = 0; t < 2000; ++t) {
    const int k = 1 + static_cast<int>(uniform_index(rng, 8));
    std::vector<double> d(static_cast<std::size_t>(k));
    for (double& v : d) v = std::round(4.0 * (2 * uniform01(rng) - 1)) / 4.0;  // frequent ties
    const Composed c = compose_min(d);
    for (int i = 0; i < k; ++i) {
      CHECK(c.d <= d[static_cast<std::size_t>(i)]);
      if (i < c.label) CHECK(d[static_cast<std::size_t>(i)] > c.d);
    }
    CHECK(d[static_cast<std::size_t>(c.label)] == c.d);
  }
}

TEST_CASE("reference scene examples") {
  SceneSpec s;
  Primitive sphere;
  sphere.radius = 0.4;
  Primitive floor;
  floor.kind = PrimitiveKind::kHalfSpace;
  floor.pose.translation = Vec3(0, 0, -0.5);
  floor.object_id = 1;
  s.primitives = {sphere, floor};
  s.validate();
  const Composed c0 = scene_sdf_analytic(s, Vec3(0, 0, 0));
  CHECK(c0.d == doctest::Approx(-0.4));
  CHECK(c0.label == 0);
  const Composed c1 = scene_sdf_analytic(s, Vec3(0, 0, -0.5));
  CHECK(c1.d == 0.0);
  CHECK(c1.label == 1);
  const Composed c2 = scene_sdf_analytic(s, Vec3(0, 0, 10));
  CHECK(c2.d == doctest::Approx(9.6));
  CHECK(c2.label == 0);

  const SceneSpec ref = reference_scene();
  ref.validate();
  CHECK(ref.object_count() == 3);
  CHECK(ref.background_id() == 2);
  CHECK(ref.primitives[2].kind == PrimitiveKind::kHalfSpace);
}

TEST_CASE("sphere SDF has unit gradient away from its center") {
  Primitive s;
  s.radius = 0.7;
  s.pose.translation = Vec3(0.1, 0.2, 0.3);
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    Vec3 p = random_vec(rng, 2.0);
    if ((p - s.pose.translation).norm() < 0.05) continue;
    const Eigen::VectorXd g = ad::finite_difference_gradient(
        [&](const Eigen::VectorXd& q) { return primitive_sdf(s, Vec3(q(0), q(1), q(2))); }, Eigen::Vector3d(p), 1e-5);
    CHECK(std::abs(g.norm() - 1.0) <= 1e-6);
    CHECK((Vec3(g) - primitive_gradient(s, p)).norm() <= 1e-6);
  }
}

TEST_CASE("analytic gradients match finite differences for every kind") {
  Rng rng(3);
  for (int t = 0; t < 300; ++t) {
    const Primitive prim = random_primitive(rng, 0);
    const Vec3 p = random_vec(rng, 2.0);
    const Eigen::VectorXd g = ad::finite_difference_gradient(
        [&](const Eigen::VectorXd& q) { return primitive_sdf(prim, Vec3(q(0), q(1), q(2))); }, Eigen::Vector3d(p),
        1e-7);
    // Skip points on the box's medial surfaces, where the SDF has a kink.
    if (std::abs(g.norm() - 1.0) > 1e-5) continue;
    CHECK((Vec3(g) - primitive_gradient(prim, p)).norm() <= 1e-5);
  }
}

TEST_CASE("rigid motion of primitive and query leaves the SDF unchanged") {
  Rng rng(4);
  for (int t = 0; t < 500; ++t) {
    Primitive prim = random_primitive(rng, 0);
    const Vec3 p = random_vec(rng, 2.0);
    const double before = primitive_sdf(prim, p);
    const Pose motion = Pose::from_quaternion(random_rotation(rng), random_vec(rng, 1.0));
    Primitive moved = prim;
    moved.pose.rotation = motion.rotation * prim.pose.rotation;
    moved.pose.translation = motion.to_world(prim.pose.translation);
    CHECK(std::abs(primitive_sdf(moved, motion.to_world(p)) - before) <= 1e-12);
  }
}

TEST_CASE("scene validation and JSON round trip") {
  const SceneSpec ref = reference_scene();
  const SceneSpec back = scene_from_json(scene_to_json(ref));
  REQUIRE(back.object_count() == ref.object_count());
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const Vec3 p = random_vec(rng, 1.5);
    const Composed a = scene_sdf_analytic(ref, p), b = scene_sdf_analytic(back, p);
    CHECK(std::abs(a.d - b.d) < 1e-12);
    CHECK(a.label == b.label);
  }
  SceneSpec bad = ref;
  bad.primitives[0].object_id = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ref;
  bad.primitives[0].pose.rotation(0, 0) = 1.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ref;
  bad.primitives[0].radius = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  nlohmann::json j = scene_to_json(ref);
  j["primitives"][0]["kind"] = "torus";
  CHECK_THROWS_AS(scene_from_json(j), ConfigError);
}
