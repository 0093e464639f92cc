#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "objsdf/autodiff/tape.h"
#include "objsdf/common/types.h"

namespace objsdf::fields {

/// Layer layout of both networks. `phi_layers` and `theta_layers` count
/// hidden layers; each network has one more affine output layer.
struct FieldShape {
  int object_count = 3;
  int phi_width = 128;
  int phi_layers = 6;
  int feature_dim = 128;
  int theta_width = 128;
  int theta_layers = 4;
  int pe_levels_pos = 6;
  int pe_levels_dir = 4;
  double softplus_sharpness = 100.0;

  int phi_input_dim() const { return 3 + 6 * pe_levels_pos; }
  int phi_output_dim() const { return object_count + feature_dim; }
  int dir_input_dim() const { return 3 + 6 * pe_levels_dir; }
  /// encoded p, raw normal, encoded direction, raw feature
  int theta_input_dim() const { return phi_input_dim() + 3 + dir_input_dim() + feature_dim; }

  /// Throws ConfigError on a non-positive dimension.
  void validate() const;

  static FieldShape desk(int object_count);
  static FieldShape full(int object_count);
};

/// Weights of the SDF network f_phi and the radiance network f_theta plus
/// the learnable density sharpness beta = exp(log_beta).
struct FieldModel {
  FieldShape shape;
  std::vector<Matrix> phi_w, phi_b;
  std::vector<Matrix> theta_w, theta_b;
  Matrix log_beta = Matrix::Constant(1, 1, -2.302585092994046);  // beta = 0.1
  double gamma = 20.0;

  double beta() const;

  /// All trainable tensors in a fixed order: phi (w, b) per layer, theta
  /// (w, b) per layer, log_beta.
  std::vector<Matrix*> parameters();
  std::vector<const Matrix*> parameters() const;
  std::int64_t parameter_count() const;

  /// Checks that the layer shapes chain as declared by `shape`.
  void check_shapes() const;
};

/// concat(x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x))
/// applied row-wise to an N x 3 matrix. Column order: raw xyz, then per level
/// the three sines followed by the three cosines.
Matrix positional_encode(const Matrix& x, int levels);
Eigen::VectorXd positional_encode(const Vec3& x, int levels);
/// Derivative of positional_encode with respect to coordinate `axis`.
Matrix positional_encode_derivative(const Matrix& x, int levels, int axis);

/// SDF channels approximate a sphere of `radius` at the origin; radiance
/// weights get a He-normal draw. Deterministic in `seed`.
FieldModel init_geometric(const FieldShape& shape, double radius, std::uint64_t seed);

struct PhiOutput {
  Matrix sdf;       // N x K
  Matrix feature;   // N x F
  Matrix gradient;  // 3N x K, block c holds d/dp_c; empty when not requested
};

/// Plain batched evaluation of f_phi. Throws NonFiniteError("layer", l) on
/// a non-finite activation.
PhiOutput object_sdf_forward(const FieldModel& model, const Matrix& points, bool with_gradient);
/// Single point convenience form.
void object_sdf_forward(const FieldModel& model, const Vec3& p, Eigen::VectorXd& d, Eigen::VectorXd& z);

/// Plain batched evaluation of f_theta; rows of the result lie in [0,1]^3.
Matrix radiance_forward(const FieldModel& model, const Matrix& points, const Matrix& normals, const Matrix& dirs,
                        const Matrix& features);
Vec3 radiance_forward(const FieldModel& model, const Vec3& p, const Vec3& n, const Vec3& dir,
                      const Eigen::VectorXd& z);

/// Gradient of min_i d_i at p through a reverse sweep of the tape. At a tie
/// the lowest-index channel's gradient is returned.
Vec3 scene_normal(const FieldModel& model, const Vec3& p);
/// Gradient of channel `object_id` at p through a reverse sweep.
Vec3 object_gradient(const FieldModel& model, const Vec3& p, int object_id);

/// Tape leaves bound to the current weights of a model.
struct TapeParams {
  std::vector<ad::Var> phi_w, phi_b, theta_w, theta_b;
  ad::Var log_beta;

  static TapeParams bind(ad::Tape& tape, const FieldModel& model);
  /// Leaves in the order of FieldModel::parameters().
  std::vector<ad::Var> all() const;
};

struct PhiGraph {
  ad::Var sdf;       // N x K
  ad::Var feature;   // N x F
  ad::Var gradient;  // 3N x K
};

/// f_phi recorded on a tape together with its forward-mode spatial tangent,
/// so the returned gradient is itself differentiable with respect to the
/// weights.
PhiGraph phi_graph(const FieldModel& model, const TapeParams& params, const Matrix& points, bool with_gradient);
/// f_theta on a tape. `normals` is N x 3.
ad::Var theta_graph(const FieldModel& model, const TapeParams& params, const Matrix& points, const ad::Var& normals,
                    const Matrix& dirs, const ad::Var& features);

/// Binary checkpoint: "OSDFCKPT", u32 version, u64 header length, JSON
/// header, then little-endian float64 payload (model tensors followed by
/// `extra`).
void save_checkpoint(const std::string& path, const FieldModel& model, const nlohmann::json& extra_header = {},
                     const std::vector<const Matrix*>& extra = {});
struct LoadedCheckpoint {
  FieldModel model;
  nlohmann::json header;
  std::vector<Matrix> extra;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

nlohmann::json shape_to_json(const FieldShape& shape);
FieldShape shape_from_json(const nlohmann::json& j);

}  // namespace objsdf::fields
