#include "objsdf/geometry/geometry.h"

#include <algorithm>
#include <cmath>

#include "objsdf/common/error.h"
#include "objsdf/common/fs.h"

namespace objsdf::geo {

std::string kind_name(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::kSphere:
      return "sphere";
    case PrimitiveKind::kBox:
      return "box";
    case PrimitiveKind::kHalfSpace:
      return "half_space";
  }
  return "unknown";
}

PrimitiveKind kind_from_name(const std::string& name) {
  if (name == "sphere") return PrimitiveKind::kSphere;
  if (name == "box") return PrimitiveKind::kBox;
  if (name == "half_space") return PrimitiveKind::kHalfSpace;
  throw ConfigError("unknown primitive kind '" + name + "'");
}

Pose Pose::from_quaternion(const Eigen::Quaterniond& q, const Vec3& t) {
  Pose p;
  p.rotation = q.normalized().toRotationMatrix();
  p.translation = t;
  return p;
}

bool Pose::orthonormal(double tol) const {
  return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(rotation.determinant() - 1.0) <= tol;
}

double primitive_sdf(const Primitive& prim, const Vec3& p) {
  const Vec3 q = prim.pose.to_local(p);
  switch (prim.kind) {
    case PrimitiveKind::kSphere:
      return q.norm() - prim.radius;
    case PrimitiveKind::kBox: {
      const Vec3 e = q.cwiseAbs() - prim.half_extents;
      return e.cwiseMax(0.0).norm() + std::min(e.maxCoeff(), 0.0);
    }
    case PrimitiveKind::kHalfSpace:
      return q.z();
  }
  return 0.0;
}

Vec3 primitive_gradient(const Primitive& prim, const Vec3& p) {
  const Vec3 q = prim.pose.to_local(p);
  Vec3 g = Vec3::Zero();
  switch (prim.kind) {
    case PrimitiveKind::kSphere: {
      const double n = q.norm();
      g = n > 0.0 ? Vec3(q / n) : Vec3::UnitX();
      break;
    }
    case PrimitiveKind::kBox: {
      const Vec3 e = q.cwiseAbs() - prim.half_extents;
      const Vec3 sgn(q.x() < 0.0 ? -1.0 : 1.0, q.y() < 0.0 ? -1.0 : 1.0, q.z() < 0.0 ? -1.0 : 1.0);
      const Vec3 outside = e.cwiseMax(0.0);
      const double len = outside.norm();
      if (len > 0.0) {
        g = (outside / len).cwiseProduct(sgn);
      } else {
        int axis = 0;
        for (int k = 1; k < 3; ++k)
          if (e(k) > e(axis)) axis = k;
        g(axis) = sgn(axis);
      }
      break;
    }
    case PrimitiveKind::kHalfSpace:
      g = Vec3::UnitZ();
      break;
  }
  return prim.pose.rotation * g;
}

Composed compose_min(std::span<const double> d) {
  if (d.empty()) throw Error("compose_min: empty input");
  Composed c{d[0], 0};
  for (std::size_t i = 1; i < d.size(); ++i) {
    if (d[i] < c.d) {
      c.d = d[i];
      c.label = static_cast<int>(i);
    }
  }
  return c;
}

bool BBox::contains(const Vec3& p) const {
  return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
}

BBox BBox::shrunk(double fraction) const {
  const Vec3 m = fraction * size();
  return BBox{lo + m, hi - m};
}

void SceneSpec::validate() const {
  if (primitives.empty()) throw ConfigError("scene: at least one primitive (the background) is required");
  for (std::size_t i = 0; i < primitives.size(); ++i) {
    const Primitive& p = primitives[i];
    const std::string where = "scene: primitive " + std::to_string(i);
    if (p.object_id != static_cast<int>(i)) throw ConfigError(where + ": object ids must be 0..K-1 in order");
    if (!p.pose.orthonormal()) throw ConfigError(where + ": rotation is not orthonormal");
    if (p.kind == PrimitiveKind::kSphere && !(p.radius > 0.0)) throw ConfigError(where + ": radius must be positive");
    if (p.kind == PrimitiveKind::kBox && !(p.half_extents.minCoeff() > 0.0))
      throw ConfigError(where + ": half extents must be positive");
    if ((p.albedo.array() < 0.0).any() || (p.albedo.array() > 1.0).any())
      throw ConfigError(where + ": albedo must lie in [0,1]");
  }
  if (!(bbox.size().minCoeff() > 0.0)) throw ConfigError("scene: empty bounding box");
}

void object_sdfs(const SceneSpec& scene, const Vec3& p, std::span<double> out) {
  if (out.size() != scene.primitives.size()) throw ShapeError("object_sdfs: output size mismatch");
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = primitive_sdf(scene.primitives[i], p);
}

Composed scene_sdf_analytic(const SceneSpec& scene, const Vec3& p) {
  double buf[64];
  std::vector<double> heap;
  std::span<double> d;
  if (scene.primitives.size() <= 64) {
    d = std::span<double>(buf, scene.primitives.size());
  } else {
    heap.resize(scene.primitives.size());
    d = heap;
  }
  object_sdfs(scene, p, d);
  return compose_min(d);
}

Vec3 scene_gradient_analytic(const SceneSpec& scene, const Vec3& p) {
  const Composed c = scene_sdf_analytic(scene, p);
  return primitive_gradient(scene.primitives[static_cast<std::size_t>(c.label)], p);
}

SceneSpec reference_scene() {
  SceneSpec s;
  Primitive sphere;
  sphere.kind = PrimitiveKind::kSphere;
  sphere.radius = 0.4;
  sphere.pose.translation = Vec3(-0.35, -0.05, -0.1);
  sphere.albedo = Vec3(0.85, 0.2, 0.15);
  sphere.object_id = 0;

  Primitive box;
  box.kind = PrimitiveKind::kBox;
  box.half_extents = Vec3::Constant(0.3);
  box.pose = Pose::from_quaternion(Eigen::Quaterniond(Eigen::AngleAxisd(0.35, Vec3::UnitZ())), Vec3(0.5, 0.05, -0.2));
  box.albedo = Vec3(0.15, 0.45, 0.85);
  box.object_id = 1;

  Primitive floor;
  floor.kind = PrimitiveKind::kHalfSpace;
  floor.pose.translation = Vec3(0.0, 0.0, -0.5);
  floor.albedo = Vec3(0.75, 0.7, 0.55);
  floor.object_id = 2;

  s.primitives = {sphere, box, floor};
  s.bbox = BBox{Vec3(-1.5, -1.5, -0.6), Vec3(1.5, 1.5, 0.9)};
  s.background_color = Vec3::Zero();
  return s;
}

namespace {

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

Vec3 json_vec(const nlohmann::json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("scene: '" + key + "' must be an array of 3 numbers");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

}  // namespace

nlohmann::json scene_to_json(const SceneSpec& scene) {
  nlohmann::json prims = nlohmann::json::array();
  for (const Primitive& p : scene.primitives) {
    const Eigen::Quaterniond q(p.pose.rotation);
    nlohmann::json j = {
        {"kind", kind_name(p.kind)},
        {"object_id", p.object_id},
        {"rotation_wxyz", {q.w(), q.x(), q.y(), q.z()}},
        {"translation", vec_json(p.pose.translation)},
        {"albedo", vec_json(p.albedo)},
    };
    if (p.kind == PrimitiveKind::kSphere) j["radius"] = p.radius;
    if (p.kind == PrimitiveKind::kBox) j["half_extents"] = vec_json(p.half_extents);
    prims.push_back(std::move(j));
  }
  return {
      {"schema_version", 1},
      {"primitives", prims},
      {"bbox", {{"min", vec_json(scene.bbox.lo)}, {"max", vec_json(scene.bbox.hi)}}},
      {"light",
       {{"direction", vec_json(scene.light.direction)},
        {"ambient", scene.light.ambient},
        {"diffuse", scene.light.diffuse},
        {"specular", scene.light.specular},
        {"shininess", scene.light.shininess}}},
      {"background_color", vec_json(scene.background_color)},
  };
}

SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  try {
    for (const auto& pj : j.at("primitives")) {
      Primitive p;
      p.kind = kind_from_name(pj.at("kind").get<std::string>());
      p.object_id = pj.at("object_id").get<int>();
      const auto& q = pj.at("rotation_wxyz");
      if (!q.is_array() || q.size() != 4) throw ConfigError("scene: 'rotation_wxyz' must have 4 entries");
      const Eigen::Quaterniond quat(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(), q[3].get<double>());
      if (std::abs(quat.norm() - 1.0) > 1e-6) throw ConfigError("scene: rotation quaternion is not unit length");
      p.pose = Pose::from_quaternion(quat, json_vec(pj.at("translation"), "translation"));
      p.albedo = json_vec(pj.at("albedo"), "albedo");
      if (p.kind == PrimitiveKind::kSphere) p.radius = pj.at("radius").get<double>();
      if (p.kind == PrimitiveKind::kBox) p.half_extents = json_vec(pj.at("half_extents"), "half_extents");
      s.primitives.push_back(p);
    }
    s.bbox.lo = json_vec(j.at("bbox").at("min"), "bbox.min");
    s.bbox.hi = json_vec(j.at("bbox").at("max"), "bbox.max");
    if (j.contains("light")) {
      const auto& l = j.at("light");
      s.light.direction = json_vec(l.at("direction"), "light.direction").normalized();
      s.light.ambient = l.value("ambient", s.light.ambient);
      s.light.diffuse = l.value("diffuse", s.light.diffuse);
      s.light.specular = l.value("specular", s.light.specular);
      s.light.shininess = l.value("shininess", s.light.shininess);
    }
    if (j.contains("background_color")) s.background_color = json_vec(j.at("background_color"), "background_color");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scene: ") + e.what());
  }
  s.validate();
  return s;
}

SceneSpec load_scene(const std::string& path) {
  try {
    return scene_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void save_scene(const SceneSpec& scene, const std::string& path) {
  write_file_atomic(path, scene_to_json(scene).dump(2) + "\n");
}

}  // namespace objsdf::geo

namespace objsdf::geo {

Vec3 shade(const SceneSpec& scene, int label, const Vec3& normal, const Vec3& view_dir) {
  const Primitive& p = scene.primitives.at(static_cast<std::size_t>(label));
  const Light& l = scene.light;
  const Vec3 n = normal.normalized();
  const double lambert = std::max(0.0, n.dot(l.direction));
  Vec3 c = p.albedo * (l.ambient + l.diffuse * lambert);
  if (l.specular > 0.0) {
    const Vec3 r = view_dir - 2.0 * view_dir.dot(n) * n;
    c += Vec3::Constant(l.specular * std::pow(std::max(0.0, r.dot(l.direction)), l.shininess));
  }
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

}  // namespace objsdf::geo
