#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "objsdf/autodiff/tape.h"
#include "objsdf/common/types.h"
#include "objsdf/fields/field_model.h"
#include "objsdf/geometry/geometry.h"

namespace objsdf::render {

/// Laplace-CDF density, high inside: (1/beta)(1 - exp(d/beta)/2) for d <= 0,
/// exp(-d/beta)/(2 beta) for d > 0. `printed_variant` evaluates the mirrored
/// branch assignment, which equals the default at -d.
double density_from_sdf(double d, double beta, bool printed_variant = false);
/// gamma / (1 + exp(gamma d)), evaluated without overflow.
double semantic_from_sdf(double d, double gamma);
/// d/dd of semantic_from_sdf.
double semantic_derivative(double d, double gamma);

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 dir = Vec3::UnitZ();
  double near = 0.0;
  double far = 1.0;
  /// Set when the ray misses the scene bounds; such rays render as vacuum.
  bool vacuum = false;
};

/// Slab intersection of a ray with a box, clipped to t >= 0. Returns false
/// when the ray misses.
bool intersect_bbox(const Vec3& origin, const Vec3& dir, const geo::BBox& box, double& t0, double& t1);
/// A ray from `origin` along `dir` (normalized here) with near/far taken
/// from the box. Misses are flagged vacuum with near == far.
Ray make_ray(const Vec3& origin, const Vec3& dir, const geo::BBox& box);

struct Quadrature {
  Eigen::VectorXd transmittance;
  Eigen::VectorXd weights;
  double opacity = 0.0;
};

/// T_j = exp(-sum_{k<j} sigma_k delta_k), w_j = T_j (1 - exp(-sigma_j delta_j)).
Quadrature quadrature_weights(const Eigen::VectorXd& sigma, const Eigen::VectorXd& delta);
/// delta_j = v_{j+1} - v_j, and far - v_last for the last sample.
Eigen::VectorXd segment_lengths(const Eigen::VectorXd& depths, double far);

/// Softmax of a rendered semantic vector.
Eigen::VectorXd semantic_probabilities(const Eigen::VectorXd& semantic);

/// Anything the renderer can query: K object SDFs, their spatial
/// gradients and a colour per sample.
struct FieldSamples {
  ad::Var sdf;       // N x K
  ad::Var gradient;  // 3N x K, block c = d/dp_c
  ad::Var rgb;       // N x 3
  ad::Var beta;      // 1 x 1
};

/// Tape-free counterpart of FieldSamples: sdf N x K, gradient 3N x K,
/// rgb N x 3.
struct PlainSamples {
  Matrix sdf;
  Matrix gradient;
  Matrix rgb;
};

class ImplicitField {
 public:
  virtual ~ImplicitField() = default;
  virtual int object_count() const = 0;
  virtual double beta() const = 0;
  virtual double gamma() const = 0;
  /// Plain object SDFs, N x K.
  virtual Matrix object_sdf(const Matrix& points) const = 0;
  /// Records SDFs, gradients and colours for the given points and view
  /// directions on `tape`. Colours use the normal of `channel`, or of the
  /// argmin channel when channel < 0.
  virtual FieldSamples record(ad::Tape& tape, const Matrix& points, const Matrix& dirs, int channel = -1) const = 0;
  /// The values of record() without building a graph. The default goes
  /// through a scratch tape.
  virtual PlainSamples evaluate(const Matrix& points, const Matrix& dirs, int channel = -1) const;
};

/// The learned model. Without bound parameters every record() binds fresh
/// leaves; training binds once per tape so gradients land in one place.
class NeuralField : public ImplicitField {
 public:
  explicit NeuralField(const fields::FieldModel& model) : model_(model) {}
  NeuralField(const fields::FieldModel& model, const fields::TapeParams& bound) : model_(model), bound_(&bound) {}

  int object_count() const override { return model_.shape.object_count; }
  double beta() const override { return model_.beta(); }
  double gamma() const override { return model_.gamma; }
  Matrix object_sdf(const Matrix& points) const override;
  FieldSamples record(ad::Tape& tape, const Matrix& points, const Matrix& dirs, int channel = -1) const override;
  PlainSamples evaluate(const Matrix& points, const Matrix& dirs, int channel = -1) const override;

  const fields::FieldModel& model() const { return model_; }

 private:
  const fields::FieldModel& model_;
  const fields::TapeParams* bound_ = nullptr;
};

/// Analytic scene used as a stand-in model. Colour is the scene's shaded
/// albedo of the argmin object.
class AnalyticField : public ImplicitField {
 public:
  AnalyticField(geo::SceneSpec scene, double beta, double gamma) : scene_(std::move(scene)), beta_(beta), gamma_(gamma) {}

  int object_count() const override { return scene_.object_count(); }
  double beta() const override { return beta_; }
  double gamma() const override { return gamma_; }
  Matrix object_sdf(const Matrix& points) const override;
  FieldSamples record(ad::Tape& tape, const Matrix& points, const Matrix& dirs, int channel = -1) const override;

  const geo::SceneSpec& scene() const { return scene_; }

 private:
  geo::SceneSpec scene_;
  double beta_;
  double gamma_;
};

struct RenderConfig {
  int n_coarse = 64;
  int n_fine = 64;
  /// Jittered strata when true (training); stratum midpoints otherwise.
  bool jitter = true;
  Vec3 background_color = Vec3::Zero();
  double depth_epsilon = 1e-6;
  bool printed_density_variant = false;
  /// Also compute per-object depth and opacity (costs K extra quadratures).
  bool object_outputs = false;
  /// Render a single object: density, colour normals and depth use only
  /// this channel. Negative renders the whole scene.
  int only_object = -1;
  /// Opacity below which a rendered label falls back to the background id.
  double label_opacity_threshold = 0.5;
};

/// Stratified coarse depths plus importance-resampled fine depths, sorted
/// and strictly increasing. `rng` drives both stages.
Eigen::VectorXd sample_ray(const Ray& ray, int n_coarse, int n_fine, const ImplicitField& field, bool jitter,
                           std::uint64_t seed, bool printed_density_variant = false);
/// Batched form; ray i uses derive_seed(seed, i + id_offset).
Matrix sample_rays(const std::vector<Ray>& rays, const RenderConfig& cfg, const ImplicitField& field,
                   std::uint64_t seed, std::uint64_t id_offset = 0);

struct RenderGraph {
  ad::Var color;          // R x 3
  ad::Var semantic;       // R x K
  ad::Var depth;          // R x 1
  ad::Var opacity;        // R x 1
  ad::Var weights;        // R x S
  ad::Var object_depth;   // R x K, only with object_outputs
  ad::Var object_opacity; // R x K, only with object_outputs
  FieldSamples samples;   // R*S rows
  Matrix points;          // R*S x 3
};

/// Differentiable render of a batch whose sample depths are fixed
/// (R x S, S equal for all rays).
RenderGraph render_graph(ad::Tape& tape, const ImplicitField& field, const std::vector<Ray>& rays,
                         const Matrix& depths, const RenderConfig& cfg);

struct RenderOutput {
  Vec3 color = Vec3::Zero();
  Eigen::VectorXd semantic;
  double depth = 0.0;
  Eigen::VectorXd object_depth;
  Eigen::VectorXd object_opacity;
  double opacity = 0.0;
};

RenderOutput render_ray(const ImplicitField& field, const Ray& ray, const RenderConfig& cfg, std::uint64_t seed = 0);
/// Renders many rays in parallel chunks; results are independent of the
/// worker count.
std::vector<RenderOutput> render_rays(const ImplicitField& field, const std::vector<Ray>& rays,
                                      const RenderConfig& cfg, std::uint64_t seed = 0);

/// Argmax of the rendered semantics; background id when opacity is below
/// the threshold.
int semantic_label(const RenderOutput& out, int background_id, double opacity_threshold = 0.5);
/// Object with the smallest normalized per-object depth among objects whose
/// own opacity reaches the threshold; falls back to semantic_label.
int nearest_depth_label(const RenderOutput& out, int background_id, double opacity_threshold = 0.5);

}  // namespace objsdf::render
