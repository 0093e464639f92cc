#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "objsdf/common/types.h"
#include "json.hpp"

namespace objsdf::geo {

enum class PrimitiveKind { kSphere, kBox, kHalfSpace };

std::string kind_name(PrimitiveKind kind);
PrimitiveKind kind_from_name(const std::string& name);

/// Rigid transform from the primitive's local frame to world.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose from_quaternion(const Eigen::Quaterniond& q, const Vec3& t);
  Vec3 to_local(const Vec3& p) const { return rotation.transpose() * (p - translation); }
  Vec3 to_world(const Vec3& p) const { return rotation * p + translation; }
  bool orthonormal(double tol = 1e-9) const;
};

/// Sphere: radius around the local origin. Box: half extents along the
/// local axes. Half-space: the region local z <= 0.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kSphere;
  Pose pose;
  double radius = 1.0;
  Vec3 half_extents = Vec3::Ones();
  Vec3 albedo = Vec3::Constant(0.5);
  int object_id = 0;
};

double primitive_sdf(const Primitive& prim, const Vec3& p);
/// Analytic gradient of primitive_sdf. Ties inside a box go to the lowest axis.
Vec3 primitive_gradient(const Primitive& prim, const Vec3& p);

struct Composed {
  double d = 0.0;
  int label = 0;
};

/// Minimum over the entries; ties go to the lowest index.
Composed compose_min(std::span<const double> d);

struct BBox {
  Vec3 lo = Vec3::Constant(-1.0);
  Vec3 hi = Vec3::Constant(1.0);

  Vec3 size() const { return hi - lo; }
  Vec3 center() const { return 0.5 * (lo + hi); }
  bool contains(const Vec3& p) const;
  /// Shrinks every side by `fraction` of the box size.
  BBox shrunk(double fraction) const;
};

struct Light {
  Vec3 direction = Vec3(0.3, 0.2, 1.0).normalized();  // towards the light
  double ambient = 0.3;
  double diffuse = 0.7;
  double specular = 0.0;
  double shininess = 32.0;
};

/// Analytic scene. primitives[i].object_id == i; the last primitive is the
/// background.
struct SceneSpec {
  std::vector<Primitive> primitives;
  BBox bbox;
  Light light;
  Vec3 background_color = Vec3::Zero();

  int object_count() const { return static_cast<int>(primitives.size()); }
  int background_id() const { return object_count() - 1; }
  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
};

void object_sdfs(const SceneSpec& scene, const Vec3& p, std::span<double> out);
Composed scene_sdf_analytic(const SceneSpec& scene, const Vec3& p);
Vec3 scene_gradient_analytic(const SceneSpec& scene, const Vec3& p);

/// Albedo of `label` under the scene light: ambient plus Lambertian, plus an
/// optional specular lobe towards `view_dir` (direction from the eye).
/// Clamped to [0,1].
Vec3 shade(const SceneSpec& scene, int label, const Vec3& normal, const Vec3& view_dir);

/// Sphere r=0.4 and a box of half extent 0.3 on a floor half-space, which is
/// the background object.
SceneSpec reference_scene();

nlohmann::json scene_to_json(const SceneSpec& scene);
SceneSpec scene_from_json(const nlohmann::json& j);
SceneSpec load_scene(const std::string& path);
void save_scene(const SceneSpec& scene, const std::string& path);

}  // namespace objsdf::geo
