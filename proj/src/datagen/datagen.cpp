#include "objsdf/datagen/datagen.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>

#include "objsdf/common/error.h"
#include "objsdf/common/fs.h"
#include "objsdf/common/parallel.h"
#include "objsdf/common/rng.h"

namespace objsdf::data {

namespace fs = std::filesystem;

Intrinsics Intrinsics::from_fov(int width, int height, double fov_y_deg) {
  if (width < 1 || height < 1) throw ConfigError("image size must be positive");
  if (!(fov_y_deg > 0.0 && fov_y_deg < 180.0)) throw ConfigError("field of view must lie in (0, 180) degrees");
  Intrinsics k;
  k.width = width;
  k.height = height;
  k.fy = 0.5 * height / std::tan(0.5 * fov_y_deg * std::numbers::pi / 180.0);
  k.fx = k.fy;
  k.cx = 0.5 * width;
  k.cy = 0.5 * height;
  return k;
}

Camera Camera::look_at(const Intrinsics& k, const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 f = (target - eye).normalized();
  Vec3 r = f.cross(up);
  if (r.norm() < 1e-12) r = f.cross(Vec3::UnitY());
  r.normalize();
  const Vec3 d = f.cross(r);
  Camera c;
  c.intrinsics = k;
  c.rotation.col(0) = r;
  c.rotation.col(1) = d;
  c.rotation.col(2) = f;
  c.center = eye;
  return c;
}

Eigen::Matrix4d Camera::pose() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = center;
  return m;
}

Camera Camera::from_pose(const Intrinsics& k, const Eigen::Matrix4d& pose) {
  Camera c;
  c.intrinsics = k;
  c.rotation = pose.topLeftCorner<3, 3>();
  c.center = pose.topRightCorner<3, 1>();
  if ((c.rotation.transpose() * c.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9)
    throw ConfigError("camera rotation is not orthonormal");
  return c;
}

render::Ray camera_ray(const Camera& cam, double u, double v, const geo::BBox& box) {
  const Intrinsics& k = cam.intrinsics;
  const Vec3 local((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
  return render::make_ray(cam.center, cam.rotation * local, box);
}

render::Ray pixel_ray(const Camera& cam, int px, int py, const geo::BBox& box) {
  return camera_ray(cam, px + 0.5, py + 0.5, box);
}

Eigen::Vector2d project(const Camera& cam, const Vec3& p) {
  const Vec3 q = cam.rotation.transpose() * (p - cam.center);
  const Intrinsics& k = cam.intrinsics;
  return Eigen::Vector2d(k.fx * q.x() / q.z() + k.cx, k.fy * q.y() / q.z() + k.cy);
}

Hit sphere_trace(const geo::SceneSpec& scene, const render::Ray& ray) {
  Hit h;
  if (ray.vacuum) return h;
  double t = ray.near;
  for (int i = 0; i < kSphereTraceMaxIterations; ++i) {
    h.iterations = i + 1;
    const Vec3 p = ray.origin + t * ray.dir;
    const geo::Composed c = geo::scene_sdf_analytic(scene, p);
    if (std::abs(c.d) < kSphereTraceTolerance) {
      // The march stops up to tol / cos(incidence) short of the surface.
      // A few guarded Newton steps along the ray remove that bias for
      // oblique hits.
      double d = c.d;
      for (int k = 0; k < 4 && d != 0.0; ++k) {
        const Vec3 g = geo::scene_gradient_analytic(scene, ray.origin + t * ray.dir);
        const double slope = g.dot(ray.dir);
        if (std::abs(slope) < 1e-3) break;
        const double tn = t - d / slope;
        const double dn = geo::scene_sdf_analytic(scene, ray.origin + tn * ray.dir).d;
        if (!(std::abs(dn) < std::abs(d))) break;
        t = tn;
        d = dn;
      }
      const Vec3 hp = ray.origin + t * ray.dir;
      h.hit = true;
      h.t = t;
      h.label = geo::scene_sdf_analytic(scene, hp).label;
      h.normal = geo::primitive_gradient(scene.primitives[static_cast<std::size_t>(h.label)], hp);
      return h;
    }
    t += c.d;
    if (t > ray.far) return h;
  }
  h.exhausted = true;
  return h;
}

GroundTruth render_ground_truth(const geo::SceneSpec& scene, const Camera& cam) {
  const int w = cam.intrinsics.width, hgt = cam.intrinsics.height;
  GroundTruth gt;
  gt.rgb = img::Image(w, hgt, 3);
  gt.mask = img::LabelMap(w, hgt, scene.background_id());
  gt.depth.assign(static_cast<std::size_t>(w) * hgt, std::numeric_limits<double>::infinity());
  for (int y = 0; y < hgt; ++y) {
    for (int x = 0; x < w; ++x) {
      const render::Ray ray = pixel_ray(cam, x, y, scene.bbox);
      const Hit h = sphere_trace(scene, ray);
      if (h.exhausted) ++gt.exhausted_rays;
      Vec3 c = scene.background_color;
      if (h.hit) {
        c = geo::shade(scene, h.label, h.normal, ray.dir);
        gt.mask.at(x, y) = h.label;
        gt.depth[static_cast<std::size_t>(y) * w + x] = h.t;
      }
      for (int ch = 0; ch < 3; ++ch) gt.rgb.at(x, y, ch) = c(ch);
    }
  }
  return gt;
}

img::LabelMap morph_mask(const img::LabelMap& mask, int radius, int background_id) {
  if (radius == 0) return mask;
  const int r = std::abs(radius);
  img::LabelMap out = mask;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const int here = mask.at(x, y);
      int best = -1;
      bool differs = false;
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= mask.width || yy >= mask.height) continue;
          const int l = mask.at(xx, yy);
          if (l != here) differs = true;
          if (l != background_id && (best < 0 || l < best)) best = l;
        }
      }
      if (radius > 0 && here == background_id && best >= 0) out.at(x, y) = best;
      if (radius < 0 && here != background_id && differs) out.at(x, y) = background_id;
    }
  }
  return out;
}

std::vector<const View*> Dataset::split(const std::string& name) const {
  std::vector<const View*> out;
  for (const View& v : views)
    if (v.split == name) out.push_back(&v);
  return out;
}

namespace {

std::string view_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03d", id);
  return buf;
}

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

Vec3 json_vec(const nlohmann::json& j) { return Vec3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()); }

nlohmann::json intrinsics_json(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

Intrinsics json_intrinsics(const nlohmann::json& j) {
  Intrinsics k;
  k.fx = j.at("fx").get<double>();
  k.fy = j.at("fy").get<double>();
  k.cx = j.at("cx").get<double>();
  k.cy = j.at("cy").get<double>();
  k.width = j.at("width").get<int>();
  k.height = j.at("height").get<int>();
  return k;
}

}  // namespace

Dataset generate_dataset(const geo::SceneSpec& scene, const DatagenConfig& cfg, const std::string& out_dir) {
  scene.validate();
  if (cfg.views < 1) throw ConfigError("datagen.views must be >= 1");
  if (!(cfg.distance_min > 0.0) || cfg.distance_max < cfg.distance_min)
    throw ConfigError("datagen: invalid camera distance range");
  if (cfg.elevation_min_deg < 0.0 || cfg.elevation_max_deg > 90.0 || cfg.elevation_max_deg < cfg.elevation_min_deg)
    throw ConfigError("datagen: elevations must satisfy 0 <= min <= max <= 90");
  if (!(cfg.test_fraction >= 0.0 && cfg.test_fraction < 1.0)) throw ConfigError("datagen.test_fraction must lie in [0,1)");

  geo::SceneSpec sc = scene;
  if (!cfg.specular) sc.light.specular = 0.0;
  else if (sc.light.specular <= 0.0) sc.light.specular = 0.3;

  Dataset ds;
  ds.root = out_dir;
  ds.object_count = sc.object_count();
  ds.background_id = sc.background_id();
  ds.bbox = sc.bbox;
  ds.intrinsics = Intrinsics::from_fov(cfg.width, cfg.height, cfg.fov_deg);
  ds.background_color = sc.background_color;
  ds.scene_file = "scene.json";

  Vec3 centroid = Vec3::Zero();
  if (sc.object_count() > 1) {
    for (int i = 0; i + 1 < sc.object_count(); ++i) centroid += sc.primitives[static_cast<std::size_t>(i)].pose.translation;
    centroid /= sc.object_count() - 1;
  } else {
    centroid = sc.bbox.center();
  }

  Rng rng(derive_seed(cfg.seed, 0xCA3E7A));
  ds.views.resize(static_cast<std::size_t>(cfg.views));
  for (int i = 0; i < cfg.views; ++i) {
    const double az = 2.0 * std::numbers::pi * uniform01(rng);
    const double el = (cfg.elevation_min_deg + (cfg.elevation_max_deg - cfg.elevation_min_deg) * uniform01(rng)) *
                      std::numbers::pi / 180.0;
    const double dist = cfg.distance_min + (cfg.distance_max - cfg.distance_min) * uniform01(rng);
    const Vec3 eye = centroid + dist * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    View& v = ds.views[static_cast<std::size_t>(i)];
    v.id = i;
    v.camera = Camera::look_at(ds.intrinsics, eye, centroid);
    v.rgb_file = "rgb/" + view_name(i) + ".png";
    v.mask_file = "mask/" + view_name(i) + ".png";
    v.depth_file = "depth/" + view_name(i) + ".f32";
    v.split = "train";
  }
  std::vector<int> order(static_cast<std::size_t>(cfg.views));
  for (int i = 0; i < cfg.views; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int i = cfg.views - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)], order[uniform_index(rng, static_cast<std::uint64_t>(i) + 1)]);
  const int n_test = static_cast<int>(std::lround(cfg.test_fraction * cfg.views));
  for (int i = 0; i < n_test; ++i) ds.views[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])].split = "test";

  std::vector<std::vector<char>> seen(static_cast<std::size_t>(cfg.views),
                                      std::vector<char>(static_cast<std::size_t>(ds.object_count), 0));
  parallel_for(static_cast<std::size_t>(cfg.views), [&](std::size_t i) {
    View& v = ds.views[i];
    GroundTruth gt = render_ground_truth(sc, v.camera);
    for (int l : gt.mask.data) seen[i][static_cast<std::size_t>(l)] = 1;
    v.rgb = std::move(gt.rgb);
    v.mask = morph_mask(gt.mask, cfg.mask_morph, ds.background_id);
    v.depth.assign(gt.depth.begin(), gt.depth.end());
    img::write_png8((fs::path(out_dir) / v.rgb_file).string(), v.rgb);
    img::write_label_png((fs::path(out_dir) / v.mask_file).string(), v.mask);
    img::write_float_raster((fs::path(out_dir) / v.depth_file).string(), v.depth);
  });
  ds.visible_views.assign(static_cast<std::size_t>(ds.object_count), 0);
  for (const auto& s : seen)
    for (int k = 0; k < ds.object_count; ++k) ds.visible_views[static_cast<std::size_t>(k)] += s[static_cast<std::size_t>(k)];
  for (int k = 0; k < ds.object_count; ++k) {
    if (ds.visible_views[static_cast<std::size_t>(k)] < cfg.min_visible_fraction * cfg.views)
      throw Error("datagen: object " + std::to_string(k) + " is visible in only " +
                  std::to_string(ds.visible_views[static_cast<std::size_t>(k)]) + " of " + std::to_string(cfg.views) +
                  " views");
  }

  geo::save_scene(sc, (fs::path(out_dir) / ds.scene_file).string());
  nlohmann::json views = nlohmann::json::array();
  for (const View& v : ds.views) {
    const Eigen::Matrix4d pose = v.camera.pose();
    nlohmann::json pj = nlohmann::json::array();
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) pj.push_back(pose(r, c));
    views.push_back({{"id", v.id},
                     {"pose", pj},
                     {"rgb", v.rgb_file},
                     {"mask", v.mask_file},
                     {"depth", v.depth_file},
                     {"split", v.split}});
  }
  const nlohmann::json manifest = {
      {"schema_version", kManifestSchemaVersion},
      {"object_count", ds.object_count},
      {"background_id", ds.background_id},
      {"bbox", {{"min", vec_json(ds.bbox.lo)}, {"max", vec_json(ds.bbox.hi)}}},
      {"intrinsics", intrinsics_json(ds.intrinsics)},
      {"background_color", vec_json(ds.background_color)},
      {"scene", ds.scene_file},
      {"visible_views", ds.visible_views},
      {"depth_format", "float32 little-endian, row-major, +inf on miss"},
      {"views", views},
  };
  write_file_atomic(fs::path(out_dir) / kManifestName, manifest.dump(2) + "\n");
  return ds;
}

Dataset load_dataset(const std::string& manifest_path) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(manifest_path + ": " + e.what());
  }
  const fs::path root = fs::path(manifest_path).parent_path();
  Dataset ds;
  try {
    if (m.at("schema_version").get<int>() != kManifestSchemaVersion)
      throw IoError(manifest_path + ": unsupported manifest schema version");
    ds.root = root.string();
    ds.object_count = m.at("object_count").get<int>();
    ds.background_id = m.at("background_id").get<int>();
    ds.bbox.lo = json_vec(m.at("bbox").at("min"));
    ds.bbox.hi = json_vec(m.at("bbox").at("max"));
    ds.intrinsics = json_intrinsics(m.at("intrinsics"));
    ds.background_color = json_vec(m.at("background_color"));
    ds.scene_file = m.value("scene", std::string());
    ds.visible_views = m.value("visible_views", std::vector<int>());
    for (const auto& vj : m.at("views")) {
      View v;
      v.id = vj.at("id").get<int>();
      const auto& pj = vj.at("pose");
      if (pj.size() != 16) throw IoError(manifest_path + ": pose must have 16 entries");
      Eigen::Matrix4d pose;
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) pose(r, c) = pj.at(static_cast<std::size_t>(r * 4 + c)).get<double>();
      v.camera = Camera::from_pose(ds.intrinsics, pose);
      v.split = vj.at("split").get<std::string>();
      v.rgb_file = vj.at("rgb").get<std::string>();
      v.mask_file = vj.at("mask").get<std::string>();
      v.depth_file = vj.value("depth", std::string());
      ds.views.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest_path + ": " + e.what());
  }
  for (View& v : ds.views) {
    v.rgb = img::read_png8((root / v.rgb_file).string());
    v.mask = img::read_label_png((root / v.mask_file).string());
    if (v.rgb.width != ds.intrinsics.width || v.rgb.height != ds.intrinsics.height || v.rgb.channels != 3)
      throw IoError(v.rgb_file + ": image size does not match the intrinsics");
    if (v.mask.width != ds.intrinsics.width || v.mask.height != ds.intrinsics.height)
      throw IoError(v.mask_file + ": mask size does not match the intrinsics");
    for (int l : v.mask.data)
      if (l >= ds.object_count) throw IoError(v.mask_file + ": label outside [0,K)");
    if (!v.depth_file.empty())
      v.depth = img::read_float_raster((root / v.depth_file).string(),
                                       static_cast<std::size_t>(ds.intrinsics.width) * ds.intrinsics.height);
  }
  return ds;
}

}  // namespace objsdf::data
