#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "objsdf/common/error.h"
#include "objsdf/common/types.h"
#include "objsdf/datagen/datagen.h"
#include "objsdf/fields/field_model.h"
#include "objsdf/rendering/rendering.h"

namespace objsdf::train {

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m, v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam step. The state is sized on first use.
void adam_update(std::span<Matrix* const> weights, std::span<const Matrix> grads, AdamState& state, double lr,
                 const AdamParams& p = {});

/// Mean over rays of the per-ray L1 distance (summed over channels).
double loss_rec(const Matrix& pred, const Matrix& gt);
/// Mean of -log(max(p[label], floor)) over rows.
double loss_semantic(const Matrix& probs, std::span<const int> labels, double floor = 1e-12);
/// sum over channels of mean over points of (|grad d_k| - 1)^2, from a
/// 3N x K block-stacked gradient.
double loss_eikonal(const Matrix& gradient);
double loss_eikonal(const render::ImplicitField& field, const Matrix& points);

struct TrainConfig {
  double lambda_semantic = 0.04;
  double lambda_eikonal = 0.1;
  int rays_per_batch = 1024;
  int iterations = 5000;
  double lr = 5e-4;
  double lr_final = 5e-5;
  AdamParams adam;
  double beta_floor = 1e-4;
  /// Uniform box points per Eikonal batch; negative means one per ray sample.
  int eikonal_uniform = -1;
  /// Rays per tape; bounds memory and is the unit of parallel work.
  int chunk_rays = 32;
  /// Pixels whose ground truth ray hits nothing are kept out of the
  /// cross-entropy unless this is set.
  bool semantic_on_miss = false;
  double init_radius = 0.5;
  double beta_init = 0.1;
  /// Sharpness of the SDF to semantic transform.
  double gamma = 20.0;
  std::uint64_t seed = 0;
  int checkpoint_every = 1000;
  int log_every = 1;
  int validate_every = 0;
  render::RenderConfig render;
  fields::FieldShape shape;

  void validate() const;
};

nlohmann::json config_to_json(const TrainConfig& cfg);

struct LossReport {
  std::int64_t iteration = 0;
  double rec = 0.0;
  double semantic = 0.0;
  double eikonal = 0.0;
  double total = 0.0;
  double beta = 0.0;
  double lr = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

/// Every training pixel of a dataset as a ray with its targets.
struct RayPool {
  std::vector<render::Ray> rays;
  Matrix colors;  // N x 3
  std::vector<int> labels;
  std::vector<char> hit;  // ground truth ray hits a surface
  geo::BBox bbox;
  Vec3 background_color = Vec3::Zero();
  int object_count = 0;
  int background_id = 0;

  std::size_t size() const { return rays.size(); }
};

RayPool make_ray_pool(const data::Dataset& ds, const std::string& split = "train");

/// Everything a step needs with the random choices already made. Sample
/// depths are constants of the step.
struct Batch {
  std::vector<render::Ray> rays;
  Matrix colors;
  std::vector<int> labels;
  std::vector<char> semantic_mask;
  Matrix depths;          // R x S
  Matrix uniform_points;  // U x 3
};

Batch sample_batch(const RayPool& pool, const fields::FieldModel& model, const TrainConfig& cfg,
                   std::int64_t iteration);

struct LossEvaluation {
  double rec = 0.0;
  double semantic = 0.0;
  double eikonal = 0.0;
  double total = 0.0;
  /// d total / d parameter, in FieldModel::parameters() order.
  std::vector<Matrix> gradient;
};

/// Loss of a fixed batch and, optionally, its gradient. Chunks are reduced
/// in a fixed order, so the result does not depend on the worker count.
LossEvaluation evaluate_loss(const fields::FieldModel& model, const Batch& batch, const TrainConfig& cfg,
                             bool with_gradient);

/// Thrown by train() when a step aborts; carries the offending report.
class TrainingAborted : public Error {
 public:
  explicit TrainingAborted(LossReport report)
      : Error("training aborted at iteration " + std::to_string(report.iteration) + ": " + report.abort_reason),
        report_(std::move(report)) {}
  const LossReport& report() const { return report_; }

 private:
  LossReport report_;
};

struct TrainState {
  fields::FieldModel model;
  AdamState adam;
  std::int64_t iteration = 0;  // completed steps
};

TrainState init_state(const TrainConfig& cfg, int object_count);
double learning_rate(const TrainConfig& cfg, std::int64_t iteration);

/// One optimisation step on `batch`. On a non-finite loss or gradient the
/// state is left untouched and the report is flagged as aborted.
LossReport train_step(TrainState& state, const Batch& batch, const TrainConfig& cfg);

/// Mean |(|grad d_k|) - 1| over `n` uniform box points and all channels.
double eikonal_deviation(const fields::FieldModel& model, const geo::BBox& box, int n, std::uint64_t seed);

struct TrainHooks {
  /// Called every validate_every steps; the value lands in the log.
  std::function<double(const fields::FieldModel&)> validate;
  std::function<void(const LossReport&)> on_report;
};

struct TrainResult {
  TrainState state;
  std::vector<LossReport> reports;
};

/// Full loop with CSV log (log.csv) and checkpoints under `out_dir`
/// (empty disables all output). Resumes from `resume` when given.
TrainResult train(const RayPool& pool, const TrainConfig& cfg, const std::string& out_dir,
                  const std::string& resume = {}, const TrainHooks& hooks = {});

void save_state(const std::string& path, const TrainState& state, const TrainConfig& cfg);
TrainState load_state(const std::string& path);

}  // namespace objsdf::train
