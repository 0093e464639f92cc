#include "objsdf/training/training.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "objsdf/autodiff/tape.h"
#include "objsdf/common/parallel.h"
#include "objsdf/common/rng.h"
#include "objsdf/common/vecmath.h"

namespace objsdf::train {

using ad::Tape;
using ad::Var;
namespace fs = std::filesystem;

void adam_update(std::span<Matrix* const> weights, std::span<const Matrix> grads, AdamState& state, double lr,
                 const AdamParams& p) {
  if (weights.size() != grads.size()) throw ShapeError("adam: weight and gradient counts differ");
  if (state.m.empty()) {
    for (const Matrix* w : weights) {
      state.m.push_back(Matrix::Zero(w->rows(), w->cols()));
      state.v.push_back(Matrix::Zero(w->rows(), w->cols()));
    }
  }
  if (state.m.size() != weights.size()) throw ShapeError("adam: state does not match the parameter list");
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (grads[i].rows() != weights[i]->rows() || grads[i].cols() != weights[i]->cols() ||
        state.m[i].rows() != weights[i]->rows() || state.m[i].cols() != weights[i]->cols())
      throw ShapeError("adam: shape mismatch for parameter " + std::to_string(i));
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < weights.size(); ++i) {
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    m = p.beta1 * m + (1.0 - p.beta1) * grads[i];
    v = p.beta2 * v + (1.0 - p.beta2) * grads[i].cwiseProduct(grads[i]);
    weights[i]->array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + p.eps);
  }
}

double loss_rec(const Matrix& pred, const Matrix& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw ShapeError("loss_rec: shape mismatch");
  if (pred.rows() == 0) return 0.0;
  if (!all_finite(pred) || !all_finite(gt)) throw NonFiniteError("loss_rec", 0, "input");
  return (pred - gt).cwiseAbs().rowwise().sum().mean();
}

double loss_semantic(const Matrix& probs, std::span<const int> labels, double floor) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) throw ShapeError("loss_semantic: label count");
  if (labels.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l < 0 || l >= probs.cols()) throw Error("loss_semantic: label " + std::to_string(l) + " outside [0,K)");
    s += -std::log(std::max(probs(static_cast<Eigen::Index>(i), l), floor));
  }
  return s / static_cast<double>(labels.size());
}

double loss_eikonal(const Matrix& gradient) {
  if (gradient.rows() % 3 != 0) throw ShapeError("loss_eikonal: gradient rows must be a multiple of 3");
  const Eigen::Index n = gradient.rows() / 3;
  if (n == 0) return 0.0;
  if (!all_finite(gradient)) throw NonFiniteError("eikonal", 0, "gradient");
  const Matrix norm = (gradient.topRows(n).cwiseAbs2() + gradient.middleRows(n, n).cwiseAbs2() +
                       gradient.bottomRows(n).cwiseAbs2())
                          .cwiseSqrt();
  return (norm.array() - 1.0).square().colwise().mean().sum();
}

double loss_eikonal(const render::ImplicitField& field, const Matrix& points) {
  Tape tape;
  const Matrix dirs = Matrix::Zero(points.rows(), 3);
  return loss_eikonal(field.record(tape, points, dirs).gradient.value());
}

void TrainConfig::validate() const {
  if (!(lambda_semantic >= 0.0) || !(lambda_eikonal >= 0.0)) throw ConfigError("loss weights must be >= 0");
  if (rays_per_batch < 1) throw ConfigError("train.rays_per_batch must be >= 1");
  if (iterations < 0) throw ConfigError("train.iterations must be >= 0");
  if (!(lr > 0.0) || !(lr_final > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(beta_floor > 0.0)) throw ConfigError("train.beta_floor must be positive");
  if (chunk_rays < 1) throw ConfigError("train.chunk_rays must be >= 1");
  if (render.n_coarse < 1 || render.n_fine < 0) throw ConfigError("render sample counts must be positive");
  if (!(init_radius > 0.0)) throw ConfigError("train.init_radius must be positive");
  if (!(beta_init >= beta_floor)) throw ConfigError("train.beta_init must be >= train.beta_floor");
  if (!(gamma > 0.0)) throw ConfigError("train.gamma must be positive");
  shape.validate();
}

nlohmann::json config_to_json(const TrainConfig& c) {
  return {
      {"lambda_semantic", c.lambda_semantic},
      {"lambda_eikonal", c.lambda_eikonal},
      {"rays_per_batch", c.rays_per_batch},
      {"iterations", c.iterations},
      {"lr", c.lr},
      {"lr_final", c.lr_final},
      {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
      {"beta_floor", c.beta_floor},
      {"eikonal_uniform", c.eikonal_uniform},
      {"chunk_rays", c.chunk_rays},
      {"semantic_on_miss", c.semantic_on_miss},
      {"init_radius", c.init_radius},
      {"beta_init", c.beta_init},
      {"gamma", c.gamma},
      {"seed", c.seed},
      {"checkpoint_every", c.checkpoint_every},
      {"validate_every", c.validate_every},
      {"render",
       {{"n_coarse", c.render.n_coarse},
        {"n_fine", c.render.n_fine},
        {"printed_density_variant", c.render.printed_density_variant}}},
      {"shape", fields::shape_to_json(c.shape)},
  };
}

RayPool make_ray_pool(const data::Dataset& ds, const std::string& split) {
  RayPool pool;
  pool.bbox = ds.bbox;
  pool.background_color = ds.background_color;
  pool.object_count = ds.object_count;
  pool.background_id = ds.background_id;
  const auto views = ds.split(split);
  const int w = ds.intrinsics.width, h = ds.intrinsics.height;
  const std::size_t n = views.size() * static_cast<std::size_t>(w) * h;
  pool.rays.reserve(n);
  pool.colors.resize(static_cast<Eigen::Index>(n), 3);
  pool.labels.reserve(n);
  pool.hit.reserve(n);
  for (const data::View* v : views) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const auto row = static_cast<Eigen::Index>(pool.rays.size());
        pool.rays.push_back(data::pixel_ray(v->camera, x, y, ds.bbox));
        for (int c = 0; c < 3; ++c) pool.colors(row, c) = v->rgb.at(x, y, c);
        pool.labels.push_back(v->mask.at(x, y));
        const std::size_t pix = static_cast<std::size_t>(y) * w + x;
        pool.hit.push_back(v->depth.empty() ? 1 : static_cast<char>(std::isfinite(v->depth[pix])));
      }
    }
  }
  return pool;
}

Batch sample_batch(const RayPool& pool, const fields::FieldModel& model, const TrainConfig& cfg,
                   std::int64_t iteration) {
  if (pool.size() == 0) throw Error("sample_batch: empty ray pool");
  const auto it = static_cast<std::uint64_t>(iteration);
  Rng rng(derive_seed(cfg.seed, 0xBA7C, it));
  Batch b;
  const auto r = static_cast<Eigen::Index>(cfg.rays_per_batch);
  b.colors.resize(r, 3);
  b.rays.reserve(static_cast<std::size_t>(r));
  for (Eigen::Index i = 0; i < r; ++i) {
    const std::size_t k = uniform_index(rng, pool.size());
    b.rays.push_back(pool.rays[k]);
    b.colors.row(i) = pool.colors.row(static_cast<Eigen::Index>(k));
    b.labels.push_back(pool.labels[k]);
    b.semantic_mask.push_back(static_cast<char>(pool.hit[k] || cfg.semantic_on_miss));
  }
  render::RenderConfig rc = cfg.render;
  rc.jitter = true;
  b.depths = render::sample_rays(b.rays, rc, render::NeuralField(model), derive_seed(cfg.seed, 0x5A3D, it));

  Eigen::Index live = 0;
  for (const auto& ray : b.rays) live += ray.vacuum ? 0 : 1;
  const Eigen::Index u = cfg.eikonal_uniform >= 0 ? cfg.eikonal_uniform : live * b.depths.cols();
  Rng urng(derive_seed(cfg.seed, 0xE1C0, it));
  b.uniform_points.resize(u, 3);
  const Vec3 size = pool.bbox.size();
  for (Eigen::Index i = 0; i < u; ++i)
    for (int c = 0; c < 3; ++c) b.uniform_points(i, c) = pool.bbox.lo(c) + size(c) * uniform01(urng);
  return b;
}

namespace {

struct ChunkResult {
  double rec = 0.0, semantic = 0.0, eikonal = 0.0;
  std::vector<Matrix> gradient;
};

// Sum of (|grad| - 1)^2 over the rows of a 3N x K gradient whose ray is live.
Var eikonal_sum(const Var& gradient, const std::vector<char>& live_rows) {
  const Eigen::Index n = gradient.rows() / 3;
  const Eigen::Index k = gradient.cols();
  Var g = gradient;
  const auto live = static_cast<Eigen::Index>(std::count(live_rows.begin(), live_rows.end(), 1));
  if (live == 0) return gradient.tape()->scalar_constant(0.0);
  if (live != n) {
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<std::size_t>(3 * live * k));
    for (int c = 0; c < 3; ++c)
      for (Eigen::Index i = 0; i < n; ++i)
        if (live_rows[static_cast<std::size_t>(i)])
          for (Eigen::Index j = 0; j < k; ++j) idx.push_back((c * n + i) * k + j);
    g = ad::gather(gradient, std::move(idx), 3 * live, k);
  }
  return ad::sum(ad::square(ad::tile_norm(g, 3) + -1.0));
}

}  // namespace

LossEvaluation evaluate_loss(const fields::FieldModel& model, const Batch& batch, const TrainConfig& cfg,
                             bool with_gradient) {
  const auto r = static_cast<Eigen::Index>(batch.rays.size());
  if (r == 0) throw Error("evaluate_loss: empty batch");
  if (batch.depths.rows() != r || batch.colors.rows() != r || batch.labels.size() != batch.rays.size() ||
      batch.semantic_mask.size() != batch.rays.size())
    throw ShapeError("evaluate_loss: batch fields disagree in size");
  const Eigen::Index s = batch.depths.cols();

  Eigen::Index live = 0;
  for (const auto& ray : batch.rays) live += ray.vacuum ? 0 : 1;
  const auto sem_rows = std::count(batch.semantic_mask.begin(), batch.semantic_mask.end(), 1);
  const Eigen::Index u = batch.uniform_points.rows();
  const double inv_rays = 1.0 / static_cast<double>(r);
  const double inv_sem = sem_rows > 0 ? 1.0 / static_cast<double>(sem_rows) : 0.0;
  const Eigen::Index eik_points = live * s + u;
  const double inv_eik = eik_points > 0 ? 1.0 / static_cast<double>(eik_points) : 0.0;

  const Eigen::Index chunk = cfg.chunk_rays;
  const Eigen::Index n_chunks = (r + chunk - 1) / chunk;
  std::vector<ChunkResult> results(static_cast<std::size_t>(n_chunks));

  parallel_for(static_cast<std::size_t>(n_chunks), [&](std::size_t ci) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(ci) * chunk;
    const Eigen::Index cn = std::min(chunk, r - c0);
    // Uniform points are split over chunks in proportion to their rays.
    const Eigen::Index u0 = u * c0 / r, u1 = u * (c0 + cn) / r;

    Tape tape;
    const fields::TapeParams params = fields::TapeParams::bind(tape, model);
    const render::NeuralField field(model, params);
    const std::vector<render::Ray> rays(batch.rays.begin() + c0, batch.rays.begin() + c0 + cn);
    render::RenderConfig rc = cfg.render;
    rc.object_outputs = false;
    rc.only_object = -1;
    const render::RenderGraph g = render::render_graph(tape, field, rays, batch.depths.middleRows(c0, cn), rc);

    const Var rec = ad::sum(ad::row_sum(ad::abs(g.color - tape.constant(batch.colors.middleRows(c0, cn)))));

    const std::span<const int> labels(batch.labels.data() + c0, static_cast<std::size_t>(cn));
    Matrix mask(cn, 1);
    for (Eigen::Index i = 0; i < cn; ++i) mask(i, 0) = batch.semantic_mask[static_cast<std::size_t>(c0 + i)] ? 1.0 : 0.0;
    const Var sem = ad::sum(ad::softmax_cross_entropy(g.semantic, labels) * tape.constant(mask));

    std::vector<char> live_rows(static_cast<std::size_t>(cn * s));
    for (Eigen::Index i = 0; i < cn; ++i)
      std::fill_n(live_rows.begin() + i * s, s, static_cast<char>(!rays[static_cast<std::size_t>(i)].vacuum));
    Var eik = eikonal_sum(g.samples.gradient, live_rows);
    if (u1 > u0) {
      const fields::PhiGraph pu = fields::phi_graph(model, params, batch.uniform_points.middleRows(u0, u1 - u0), true);
      eik = eik + eikonal_sum(pu.gradient, std::vector<char>(static_cast<std::size_t>(u1 - u0), 1));
    }

    ChunkResult& out = results[ci];
    out.rec = rec.scalar();
    out.semantic = sem.scalar();
    out.eikonal = eik.scalar();
    if (!with_gradient) return;

    Var loss = inv_rays * rec;
    if (cfg.lambda_semantic > 0.0 && sem_rows > 0) loss = loss + (cfg.lambda_semantic * inv_sem) * sem;
    if (cfg.lambda_eikonal > 0.0) loss = loss + (cfg.lambda_eikonal * inv_eik) * eik;
    tape.backward(loss);
    for (const Var& p : params.all()) {
      const Matrix& gr = p.grad();
      out.gradient.push_back(gr.size() == 0 ? Matrix(Matrix::Zero(p.rows(), p.cols())) : gr);
    }
  });

  LossEvaluation ev;
  for (const ChunkResult& c : results) {
    ev.rec += c.rec;
    ev.semantic += c.semantic;
    ev.eikonal += c.eikonal;
  }
  ev.rec *= inv_rays;
  ev.semantic *= inv_sem;
  ev.eikonal *= inv_eik;
  ev.total = ev.rec + cfg.lambda_semantic * ev.semantic + cfg.lambda_eikonal * ev.eikonal;
  if (with_gradient) {
    ev.gradient = std::move(results[0].gradient);
    for (std::size_t c = 1; c < results.size(); ++c)
      for (std::size_t i = 0; i < ev.gradient.size(); ++i) ev.gradient[i] += results[c].gradient[i];
  }
  return ev;
}

TrainState init_state(const TrainConfig& cfg, int object_count) {
  fields::FieldShape shape = cfg.shape;
  shape.object_count = object_count;
  TrainState st;
  st.model = fields::init_geometric(shape, cfg.init_radius, cfg.seed);
  st.model.log_beta(0, 0) = std::log(cfg.beta_init);
  st.model.gamma = cfg.gamma;
  return st;
}

double learning_rate(const TrainConfig& cfg, std::int64_t iteration) {
  const double t = cfg.iterations > 0
                       ? std::clamp(static_cast<double>(iteration) / static_cast<double>(cfg.iterations), 0.0, 1.0)
                       : 1.0;
  return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * t));
}

LossReport train_step(TrainState& state, const Batch& batch, const TrainConfig& cfg) {
  LossReport rep;
  rep.iteration = state.iteration + 1;
  rep.lr = learning_rate(cfg, state.iteration);
  rep.beta = state.model.beta();
  LossEvaluation ev;
  try {
    ev = evaluate_loss(state.model, batch, cfg, true);
  } catch (const NonFiniteError& e) {
    rep.aborted = true;
    rep.abort_reason = e.what();
    return rep;
  }
  rep.rec = ev.rec;
  rep.semantic = ev.semantic;
  rep.eikonal = ev.eikonal;
  rep.total = ev.total;
  if (!std::isfinite(ev.total)) {
    rep.aborted = true;
    rep.abort_reason = "non-finite loss";
    return rep;
  }
  for (std::size_t i = 0; i < ev.gradient.size(); ++i) {
    if (!all_finite(ev.gradient[i])) {
      rep.aborted = true;
      rep.abort_reason = "non-finite gradient in parameter tensor " + std::to_string(i);
      return rep;
    }
  }
  const std::vector<Matrix*> weights = state.model.parameters();
  adam_update(weights, ev.gradient, state.adam, rep.lr, cfg.adam);
  const double floor = std::log(cfg.beta_floor);
  if (state.model.log_beta(0, 0) < floor) state.model.log_beta(0, 0) = floor;
  ++state.iteration;
  return rep;
}

double eikonal_deviation(const fields::FieldModel& model, const geo::BBox& box, int n, std::uint64_t seed) {
  if (n < 1) throw Error("eikonal_deviation: n must be >= 1");
  Rng rng(derive_seed(seed, 0xDE71));
  Matrix pts(n, 3);
  const Vec3 size = box.size();
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) pts(i, c) = box.lo(c) + size(c) * uniform01(rng);
  const Matrix g = fields::object_sdf_forward(model, pts, true).gradient;
  const Matrix norm =
      (g.topRows(n).cwiseAbs2() + g.middleRows(n, n).cwiseAbs2() + g.bottomRows(n).cwiseAbs2()).cwiseSqrt();
  return (norm.array() - 1.0).abs().mean();
}

void save_state(const std::string& path, const TrainState& state, const TrainConfig& cfg) {
  std::vector<const Matrix*> extra;
  for (const Matrix& m : state.adam.m) extra.push_back(&m);
  for (const Matrix& v : state.adam.v) extra.push_back(&v);
  const nlohmann::json header = {
      {"iteration", state.iteration},
      {"adam_step", state.adam.step},
      {"train_config", config_to_json(cfg)},
  };
  fields::save_checkpoint(path, state.model, header, extra);
}

TrainState load_state(const std::string& path) {
  fields::LoadedCheckpoint ck = fields::load_checkpoint(path);
  TrainState st;
  st.model = std::move(ck.model);
  const nlohmann::json& extra = ck.header.contains("extra") ? ck.header.at("extra") : nlohmann::json::object();
  st.iteration = extra.value("iteration", std::int64_t{0});
  st.adam.step = extra.value("adam_step", std::int64_t{0});
  if (!ck.extra.empty()) {
    if (ck.extra.size() % 2 != 0) throw IoError(path + ": optimiser state is incomplete");
    const std::size_t half = ck.extra.size() / 2;
    st.adam.m.assign(ck.extra.begin(), ck.extra.begin() + static_cast<std::ptrdiff_t>(half));
    st.adam.v.assign(ck.extra.begin() + static_cast<std::ptrdiff_t>(half), ck.extra.end());
  }
  return st;
}

namespace {

std::string csv_row(const LossReport& r, const double* val) {
  std::ostringstream os;
  os << std::setprecision(17) << r.iteration << ',' << r.rec << ',' << r.semantic << ',' << r.eikonal << ','
     << r.total << ',' << r.beta << ',' << r.lr << ',';
  if (val) os << *val;
  os << '\n';
  return os.str();
}

std::string checkpoint_name(std::int64_t it) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "checkpoint_%06lld.bin", static_cast<long long>(it));
  return buf;
}

}  // namespace

TrainResult train(const RayPool& pool, const TrainConfig& cfg, const std::string& out_dir, const std::string& resume,
                  const TrainHooks& hooks) {
  cfg.validate();
  TrainResult res;
  res.state = resume.empty() ? init_state(cfg, pool.object_count) : load_state(resume);
  if (res.state.model.shape.object_count != pool.object_count)
    throw ConfigError("model has " + std::to_string(res.state.model.shape.object_count) +
                      " object channels, dataset has " + std::to_string(pool.object_count));
  TrainConfig run = cfg;
  run.render.background_color = pool.background_color;

  std::ofstream log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const fs::path log_path = fs::path(out_dir) / "log.csv";
    const bool append = !resume.empty() && fs::exists(log_path);
    log.open(log_path, append ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open " + log_path.string());
    if (!append) log << "iteration,rec,semantic,eikonal,total,beta,lr,psnr_val\n";
  }

  while (res.state.iteration < run.iterations) {
    const Batch batch = sample_batch(pool, res.state.model, run, res.state.iteration);
    LossReport rep = train_step(res.state, batch, run);
    if (rep.aborted) {
      if (log) log << csv_row(rep, nullptr) << std::flush;
      if (!out_dir.empty()) save_state((fs::path(out_dir) / "aborted.bin").string(), res.state, run);
      throw TrainingAborted(rep);
    }
    std::optional<double> val;
    if (hooks.validate && run.validate_every > 0 && res.state.iteration % run.validate_every == 0)
      val = hooks.validate(res.state.model);
    if (log && (run.log_every <= 1 || res.state.iteration % run.log_every == 0 || val))
      log << csv_row(rep, val ? &*val : nullptr) << std::flush;
    if (hooks.on_report) hooks.on_report(rep);
    res.reports.push_back(rep);
    const bool last = res.state.iteration == run.iterations;
    if (!out_dir.empty() && ((run.checkpoint_every > 0 && res.state.iteration % run.checkpoint_every == 0) || last)) {
      save_state((fs::path(out_dir) / checkpoint_name(res.state.iteration)).string(), res.state, run);
      save_state((fs::path(out_dir) / "checkpoint.bin").string(), res.state, run);
    }
  }
  return res;
}

}  // namespace objsdf::train
