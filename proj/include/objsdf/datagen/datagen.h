#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "objsdf/common/types.h"
#include "objsdf/datagen/image_io.h"
#include "objsdf/geometry/geometry.h"
#include "objsdf/rendering/rendering.h"

namespace objsdf::data {

struct Intrinsics {
  double fx = 64.0;
  double fy = 64.0;
  double cx = 32.0;
  double cy = 32.0;
  int width = 64;
  int height = 64;

  static Intrinsics from_fov(int width, int height, double fov_y_deg);
};

/// Pinhole camera. Camera frame: x right, y down, z forward. `rotation`
/// maps camera axes to world axes, `center` is the eye position.
struct Camera {
  Intrinsics intrinsics;
  Mat3 rotation = Mat3::Identity();
  Vec3 center = Vec3::Zero();

  static Camera look_at(const Intrinsics& k, const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ());
  /// 4x4 camera-to-world, row-major.
  Eigen::Matrix4d pose() const;
  static Camera from_pose(const Intrinsics& k, const Eigen::Matrix4d& pose);
  Vec3 optical_axis() const { return rotation.col(2); }
};

/// Ray through continuous image coordinates (u, v); pixel (i, j) has its
/// center at (i + 0.5, j + 0.5). Near/far come from the box; misses are
/// vacuum rays.
render::Ray camera_ray(const Camera& cam, double u, double v, const geo::BBox& box);
render::Ray pixel_ray(const Camera& cam, int px, int py, const geo::BBox& box);
/// Image coordinates of a world point in front of the camera.
Eigen::Vector2d project(const Camera& cam, const Vec3& p);

struct Hit {
  bool hit = false;
  double t = 0.0;
  int label = -1;
  Vec3 normal = Vec3::Zero();
  int iterations = 0;
  /// Set when the iteration guard stopped the march.
  bool exhausted = false;
};

constexpr int kSphereTraceMaxIterations = 512;
constexpr double kSphereTraceTolerance = 1e-5;

Hit sphere_trace(const geo::SceneSpec& scene, const render::Ray& ray);

struct GroundTruth {
  img::Image rgb;
  img::LabelMap mask;
  std::vector<double> depth;  // +inf on miss
  int exhausted_rays = 0;
};

/// Per pixel sphere trace; colour is the shaded albedo, the mask holds the
/// hit label (background id on miss), depth is the ray parameter.
GroundTruth render_ground_truth(const geo::SceneSpec& scene, const Camera& cam);

/// Grows (radius > 0) or shrinks (radius < 0) every non-background region
/// by |radius| pixels (Chebyshev distance). Ties go to the lowest label.
img::LabelMap morph_mask(const img::LabelMap& mask, int radius, int background_id);

struct DatagenConfig {
  int views = 40;
  int width = 64;
  int height = 64;
  double fov_deg = 45.0;
  double distance_min = 2.6;
  double distance_max = 3.0;
  double elevation_min_deg = 30.0;
  double elevation_max_deg = 70.0;
  double test_fraction = 0.2;
  int mask_morph = 0;
  bool specular = false;
  /// Generation fails when an object is visible in fewer views than this
  /// fraction of all views.
  double min_visible_fraction = 0.75;
  std::uint64_t seed = 0;
};

struct View {
  int id = 0;
  Camera camera;
  std::string split;  // "train" or "test"
  std::string rgb_file;
  std::string mask_file;
  std::string depth_file;
  img::Image rgb;
  img::LabelMap mask;
  std::vector<float> depth;
};

struct Dataset {
  std::string root;
  int object_count = 0;
  int background_id = 0;
  geo::BBox bbox;
  Intrinsics intrinsics;
  Vec3 background_color = Vec3::Zero();
  std::string scene_file;
  std::vector<View> views;
  std::vector<int> visible_views;  // per object

  std::vector<const View*> split(const std::string& name) const;
};

/// Renders `cfg.views` views from a randomized upper hemisphere looking at
/// the centroid of the non-background objects and writes images, masks,
/// depth rasters, the scene and a manifest under `out_dir`.
Dataset generate_dataset(const geo::SceneSpec& scene, const DatagenConfig& cfg, const std::string& out_dir);
/// Reads a manifest and every referenced file.
Dataset load_dataset(const std::string& manifest_path);

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr int kManifestSchemaVersion = 1;

}  // namespace objsdf::data
