#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "objsdf/common/types.h"
#include "objsdf/datagen/datagen.h"
#include "objsdf/datagen/image_io.h"
#include "objsdf/fields/field_model.h"
#include "objsdf/geometry/geometry.h"
#include "objsdf/rendering/rendering.h"

namespace objsdf::mesh {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::int32_t, 3>> triangles;

  bool empty() const { return triangles.empty(); }
  double area() const;
  /// Throws when an index is out of range or a triangle has zero area.
  void validate() const;
};

/// Values of a scalar field at the rows of an N x 3 matrix.
using BatchField = std::function<Eigen::VectorXd(const Matrix& points)>;
/// Several channels at once: N x 3 -> N x C.
using MultiField = std::function<Matrix(const Matrix& points)>;

/// Field samples on the (res+1)^3 corners of a regular grid over `box`,
/// x fastest. `resolution` counts cells per axis.
struct Grid {
  geo::BBox box;
  int resolution = 0;
  Matrix values;  // corners x channels

  Vec3 cell_size() const { return box.size() / resolution; }
  Vec3 corner(int i, int j, int k) const;
};

Grid sample_grid(const MultiField& field, const geo::BBox& box, int resolution);

/// Zero level set of one grid channel (inside is value < 0). Vertices on
/// shared edges are welded; triangles face increasing field values.
TriangleMesh marching_cubes(const Grid& grid, int channel = 0);
TriangleMesh marching_cubes(const BatchField& field, const geo::BBox& box, int resolution);

/// Mesh of one object channel alone, the full surface including parts that
/// no view observes. The level is always zero.
TriangleMesh extract_object_mesh(const fields::FieldModel& model, int object_id, const geo::BBox& box,
                                 int resolution);
TriangleMesh extract_object_mesh(const render::ImplicitField& field, int object_id, const geo::BBox& box,
                                 int resolution);

struct ExtractedMeshes {
  std::vector<TriangleMesh> objects;
  TriangleMesh scene;  // zero level of min_i d_i
};
/// Every object channel and the composed scene from one grid evaluation.
ExtractedMeshes extract_all_meshes(const render::ImplicitField& field, const geo::BBox& box, int resolution);

/// `n` points uniform by area over the mesh.
Matrix sample_surface(const TriangleMesh& mesh, int n, std::uint64_t seed);
/// Rows of `points` inside `box`.
Matrix crop_points(const Matrix& points, const geo::BBox& box);

/// Area-uniform samples of the true surface of one primitive inside `crop`
/// (the complete surface, hidden parts included). Roughly `n` points.
Matrix sample_primitive_surface(const geo::Primitive& prim, const geo::BBox& crop, int n, std::uint64_t seed);
/// Samples of the composed scene surface: points of each primitive's surface
/// that no other object contains.
Matrix sample_scene_surface(const geo::SceneSpec& scene, const geo::BBox& crop, int n, std::uint64_t seed);

/// Symmetric mean squared nearest-neighbour distance:
/// (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2) / 2.
double chamfer_distance(const Matrix& a, const Matrix& b);

/// -10 log10(MSE), 99 dB when MSE < 1e-10.
double psnr(const img::Image& a, const img::Image& b);
constexpr double kPsnrCap = 99.0;

struct IouReport {
  std::vector<std::optional<double>> per_class;  // empty for classes absent from gt
  double mean = 0.0;
};
/// Mean IoU over the classes present in `gt`.
IouReport iou(const img::LabelMap& pred, const img::LabelMap& gt, int k);
double miou(const img::LabelMap& pred, const img::LabelMap& gt, int k);

void write_ply(const std::string& path, const TriangleMesh& mesh);
TriangleMesh read_ply(const std::string& path);

struct RenderedView {
  img::Image rgb;
  img::LabelMap labels;
  img::Image depth;    // 1 channel
  img::Image opacity;  // 1 channel
  std::vector<img::Image> object_opacity;  // per object, when requested
};
/// Deterministic (stratum midpoint) render of a full camera view.
RenderedView render_view(const render::ImplicitField& field, const data::Camera& cam, const geo::BBox& box,
                         const render::RenderConfig& cfg, bool per_object = false);

struct EvalConfig {
  int resolution = 128;
  int surface_samples = 100000;
  double crop_margin = 0.02;
  std::uint64_t seed = 0;
  int n_coarse = 64;
  int n_fine = 64;
  std::string split = "test";
};

struct Metrics {
  std::vector<double> psnr_per_view;
  double psnr = 0.0;
  std::vector<std::optional<double>> iou_per_class;
  double miou = 0.0;
  std::vector<std::optional<double>> cd_per_object;  // empty for an empty mesh
  std::optional<double> cd_scene;
  std::vector<std::optional<double>> cd_rms_per_object;
  std::optional<double> cd_rms_scene;
  double eikonal_deviation = 0.0;

  nlohmann::json to_json() const;
};

/// Renders the views of `split`, extracts meshes and compares against the
/// analytic scene.
Metrics evaluate(const fields::FieldModel& model, const data::Dataset& ds, const geo::SceneSpec& truth,
                 const EvalConfig& cfg, ExtractedMeshes* meshes_out = nullptr);

}  // namespace objsdf::mesh
