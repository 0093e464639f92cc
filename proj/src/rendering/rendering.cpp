#include "objsdf/rendering/rendering.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "objsdf/common/error.h"
#include "objsdf/common/parallel.h"
#include "objsdf/common/rng.h"

namespace objsdf::render {

using ad::Var;

double density_from_sdf(double d, double beta, bool printed_variant) {
  if (printed_variant) d = -d;
  const double a = 1.0 / beta;
  if (d <= 0.0) return a * (1.0 - 0.5 * std::exp(d * a));
  return 0.5 * a * std::exp(-d * a);
}

double semantic_from_sdf(double d, double gamma) {
  const double t = gamma * d;
  if (t > 0.0) {
    const double e = std::exp(-t);
    return gamma * e / (1.0 + e);
  }
  return gamma / (1.0 + std::exp(t));
}

double semantic_derivative(double d, double gamma) {
  const double sig = semantic_from_sdf(d, gamma) / gamma;
  return -gamma * gamma * sig * (1.0 - sig);
}

bool intersect_bbox(const Vec3& origin, const Vec3& dir, const geo::BBox& box, double& t0, double& t1) {
  t0 = 0.0;
  t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (dir(a) == 0.0) {
      if (origin(a) < box.lo(a) || origin(a) > box.hi(a)) return false;
      continue;
    }
    double ta = (box.lo(a) - origin(a)) / dir(a);
    double tb = (box.hi(a) - origin(a)) / dir(a);
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t1 > t0;
}

Ray make_ray(const Vec3& origin, const Vec3& dir, const geo::BBox& box) {
  Ray r;
  r.origin = origin;
  r.dir = dir.normalized();
  double t0 = 0.0, t1 = 0.0;
  if (intersect_bbox(r.origin, r.dir, box, t0, t1)) {
    r.near = t0;
    r.far = t1;
  } else {
    r.vacuum = true;
    r.near = r.far = 0.0;
  }
  return r;
}

Quadrature quadrature_weights(const Eigen::VectorXd& sigma, const Eigen::VectorXd& delta) {
  if (sigma.size() != delta.size()) throw ShapeError("quadrature_weights: length mismatch");
  Quadrature q;
  const Eigen::Index n = sigma.size();
  q.transmittance.resize(n);
  q.weights.resize(n);
  double acc = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double sd = sigma(j) * delta(j);
    q.transmittance(j) = std::exp(-acc);
    q.weights(j) = q.transmittance(j) * -std::expm1(-sd);
    acc += sd;
  }
  q.opacity = q.weights.sum();
  return q;
}

Eigen::VectorXd segment_lengths(const Eigen::VectorXd& depths, double far) {
  const Eigen::Index n = depths.size();
  Eigen::VectorXd d(n);
  for (Eigen::Index j = 0; j + 1 < n; ++j) d(j) = depths(j + 1) - depths(j);
  if (n > 0) d(n - 1) = far - depths(n - 1);
  return d;
}

Eigen::VectorXd semantic_probabilities(const Eigen::VectorXd& semantic) {
  const double mx = semantic.maxCoeff();
  Eigen::VectorXd p = (semantic.array() - mx).exp().matrix();
  return p / p.sum();
}

// ---------------------------------------------------------------------------
// Fields

namespace {

std::vector<std::int64_t> argmin_rows(const Matrix& sdf) {
  std::vector<std::int64_t> arg(static_cast<std::size_t>(sdf.rows()));
  for (Eigen::Index i = 0; i < sdf.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < sdf.cols(); ++k)
      if (sdf(i, k) < sdf(i, best)) best = k;
    arg[static_cast<std::size_t>(i)] = best;
  }
  return arg;
}

}  // namespace

PlainSamples ImplicitField::evaluate(const Matrix& points, const Matrix& dirs, int channel) const {
  ad::Tape tape;
  const FieldSamples f = record(tape, points, dirs, channel);
  return {f.sdf.value(), f.gradient.value(), f.rgb.value()};
}

PlainSamples NeuralField::evaluate(const Matrix& points, const Matrix& dirs, int channel) const {
  const int k = model_.shape.object_count;
  if (channel >= k) throw Error("object id out of range");
  fields::PhiOutput phi = fields::object_sdf_forward(model_, points, true);
  const Eigen::Index n = points.rows();
  const std::vector<std::int64_t> arg = channel < 0 ? argmin_rows(phi.sdf) : std::vector<std::int64_t>();
  Matrix normals(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto c = channel < 0 ? static_cast<Eigen::Index>(arg[static_cast<std::size_t>(i)]) : channel;
    const Vec3 g(phi.gradient(i, c), phi.gradient(n + i, c), phi.gradient(2 * n + i, c));
    normals.row(i) = (g / std::sqrt(g.squaredNorm() + 1e-12)).transpose();
  }
  PlainSamples s;
  s.rgb = fields::radiance_forward(model_, points, normals, dirs, phi.feature);
  s.sdf = std::move(phi.sdf);
  s.gradient = std::move(phi.gradient);
  return s;
}

Matrix NeuralField::object_sdf(const Matrix& points) const {
  return fields::object_sdf_forward(model_, points, false).sdf;
}

FieldSamples NeuralField::record(ad::Tape& tape, const Matrix& points, const Matrix& dirs, int channel) const {
  fields::TapeParams local;
  const fields::TapeParams* tp = bound_;
  if (tp == nullptr) {
    local = fields::TapeParams::bind(tape, model_);
    tp = &local;
  } else if (tp->log_beta.tape() != &tape) {
    throw Error("NeuralField: parameters are bound to another tape");
  }
  const fields::PhiGraph g = fields::phi_graph(model_, *tp, points, true);
  const Eigen::Index n = points.rows();
  const int k = model_.shape.object_count;
  std::vector<std::int64_t> ch;
  if (channel < 0) {
    ch = argmin_rows(g.sdf.value());
  } else {
    if (channel >= k) throw Error("object id out of range");
    ch.assign(static_cast<std::size_t>(n), channel);
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(3 * n));
  for (Eigen::Index i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) idx[static_cast<std::size_t>(i * 3 + c)] = (c * n + i) * k + ch[static_cast<std::size_t>(i)];
  const Var raw = ad::gather(g.gradient, std::move(idx), n, 3);
  const Var inv = ad::reciprocal(ad::sqrt(ad::row_sum(ad::square(raw)) + 1e-12));
  const Var normals = raw * ad::broadcast(inv, n, 3);
  FieldSamples s;
  s.sdf = g.sdf;
  s.gradient = g.gradient;
  s.rgb = fields::theta_graph(model_, *tp, points, normals, dirs, g.feature);
  s.beta = ad::exp(tp->log_beta);
  return s;
}

Matrix AnalyticField::object_sdf(const Matrix& points) const {
  Matrix out(points.rows(), scene_.object_count());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const Vec3 p = points.row(i).transpose();
    geo::object_sdfs(scene_, p, std::span<double>(out.row(i).data(), static_cast<std::size_t>(out.cols())));
  }
  return out;
}

FieldSamples AnalyticField::record(ad::Tape& tape, const Matrix& points, const Matrix& dirs, int channel) const {
  const Eigen::Index n = points.rows();
  const int k = scene_.object_count();
  const Matrix sdf = object_sdf(points);
  Matrix grad(3 * n, k);
  Matrix rgb(n, 3);
  const auto arg = argmin_rows(sdf);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 p = points.row(i).transpose();
    for (int o = 0; o < k; ++o) {
      const Vec3 g = geo::primitive_gradient(scene_.primitives[static_cast<std::size_t>(o)], p);
      for (int c = 0; c < 3; ++c) grad(c * n + i, o) = g(c);
    }
    const int label = channel >= 0 ? channel : static_cast<int>(arg[static_cast<std::size_t>(i)]);
    const Vec3 nrm(grad(i, label), grad(n + i, label), grad(2 * n + i, label));
    rgb.row(i) = geo::shade(scene_, label, nrm, dirs.row(i).transpose()).transpose();
  }
  FieldSamples s;
  s.sdf = tape.constant(sdf);
  s.gradient = tape.constant(std::move(grad));
  s.rgb = tape.constant(std::move(rgb));
  s.beta = tape.scalar_constant(beta_);
  return s;
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

Eigen::VectorXd coarse_depths(const Ray& ray, int n, bool jitter, Rng& rng) {
  Eigen::VectorXd v(n);
  const double step = (ray.far - ray.near) / n;
  for (int j = 0; j < n; ++j) v(j) = ray.near + (j + (jitter ? uniform01(rng) : 0.5)) * step;
  return v;
}

Eigen::VectorXd finish_ray(const Ray& ray, const Eigen::VectorXd& coarse, const Eigen::VectorXd* scene_sdf,
                           int n_fine, double beta, bool printed, Rng& rng) {
  const Eigen::Index nc = coarse.size();
  Eigen::VectorXd all(nc + n_fine);
  all.head(nc) = coarse;
  if (n_fine > 0) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(nc);
    if (scene_sdf != nullptr) {
      Eigen::VectorXd sigma(nc);
      for (Eigen::Index j = 0; j < nc; ++j) sigma(j) = density_from_sdf((*scene_sdf)(j), beta, printed);
      w = quadrature_weights(sigma, segment_lengths(coarse, ray.far)).weights;
    }
    const double total = w.sum();
    if (!(total > 0.0) || !std::isfinite(total)) {
      for (int i = 0; i < n_fine; ++i) all(nc + i) = ray.near + uniform01(rng) * (ray.far - ray.near);
    } else {
      Eigen::VectorXd cdf(nc + 1);
      cdf(0) = 0.0;
      for (Eigen::Index j = 0; j < nc; ++j) cdf(j + 1) = cdf(j) + w(j) / total;
      for (int i = 0; i < n_fine; ++i) {
        const double u = uniform01(rng);
        Eigen::Index j = 0;
        while (j + 1 < nc && cdf(j + 1) <= u) ++j;
        while (j + 1 < nc && w(j) <= 0.0) ++j;
        const double lo = coarse(j);
        const double hi = j + 1 < nc ? coarse(j + 1) : ray.far;
        const double frac = w(j) > 0.0 ? std::clamp((u - cdf(j)) * total / w(j), 0.0, 1.0) : 0.5;
        all(nc + i) = lo + frac * (hi - lo);
      }
    }
  }
  std::sort(all.data(), all.data() + all.size());
  const double bump = 1e-9 * (ray.far - ray.near);
  for (Eigen::Index j = 1; j < all.size(); ++j)
    if (all(j) <= all(j - 1)) all(j) = all(j - 1) + std::max(bump, std::numeric_limits<double>::min());
  return all;
}

}  // namespace

Eigen::VectorXd sample_ray(const Ray& ray, int n_coarse, int n_fine, const ImplicitField& field, bool jitter,
                           std::uint64_t seed, bool printed_density_variant) {
  if (n_coarse < 2) throw Error("sample_ray: n_coarse must be >= 2");
  if (n_fine < 0) throw Error("sample_ray: n_fine must be >= 0");
  Rng rng(seed);
  const Eigen::VectorXd coarse = coarse_depths(ray, n_coarse, jitter, rng);
  if (n_fine == 0 || ray.vacuum) return finish_ray(ray, coarse, nullptr, n_fine, field.beta(), false, rng);
  Matrix pts(n_coarse, 3);
  for (int j = 0; j < n_coarse; ++j) pts.row(j) = (ray.origin + coarse(j) * ray.dir).transpose();
  const Eigen::VectorXd d = field.object_sdf(pts).rowwise().minCoeff();
  return finish_ray(ray, coarse, &d, n_fine, field.beta(), printed_density_variant, rng);
}

Matrix sample_rays(const std::vector<Ray>& rays, const RenderConfig& cfg, const ImplicitField& field,
                   std::uint64_t seed, std::uint64_t id_offset) {
  if (cfg.n_coarse < 2) throw Error("sample_rays: n_coarse must be >= 2");
  const auto r = static_cast<Eigen::Index>(rays.size());
  const int nc = cfg.n_coarse;
  std::vector<Rng> rngs;
  rngs.reserve(rays.size());
  Matrix coarse(r, nc);
  for (Eigen::Index i = 0; i < r; ++i) {
    rngs.emplace_back(derive_seed(seed, id_offset + static_cast<std::uint64_t>(i)));
    coarse.row(i) = coarse_depths(rays[static_cast<std::size_t>(i)], nc, cfg.jitter, rngs.back()).transpose();
  }
  Matrix scene_d;
  if (cfg.n_fine > 0) {
    Matrix pts(r * nc, 3);
    for (Eigen::Index i = 0; i < r; ++i) {
      const Ray& ray = rays[static_cast<std::size_t>(i)];
      for (int j = 0; j < nc; ++j) pts.row(i * nc + j) = (ray.origin + coarse(i, j) * ray.dir).transpose();
    }
    const Matrix sdf = field.object_sdf(pts);
    scene_d = cfg.only_object >= 0 ? Matrix(sdf.col(cfg.only_object)) : Matrix(sdf.rowwise().minCoeff());
  }
  Matrix out(r, nc + cfg.n_fine);
  for (Eigen::Index i = 0; i < r; ++i) {
    const Ray& ray = rays[static_cast<std::size_t>(i)];
    const Eigen::VectorXd c = coarse.row(i).transpose();
    Eigen::VectorXd d;
    const Eigen::VectorXd* dp = nullptr;
    if (cfg.n_fine > 0 && !ray.vacuum) {
      d = scene_d.middleRows(i * nc, nc).col(0);
      dp = &d;
    }
    out.row(i) = finish_ray(ray, c, dp, cfg.n_fine, field.beta(), cfg.printed_density_variant,
                            rngs[static_cast<std::size_t>(i)])
                     .transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable render

namespace {

struct Composite {
  Var weights;  // R x S
  Var opacity;  // R x 1
  Var depth;    // R x 1
};

Composite composite(ad::Tape& tape, const Var& sigma, const Matrix& delta, const Matrix& depths, double eps) {
  const Var sd = sigma * tape.constant(delta);
  const Var trans = ad::exp(-ad::cumsum_exclusive(sd));
  const Var w = trans * (1.0 - ad::exp(-sd));
  Composite c;
  c.weights = w;
  c.opacity = ad::row_sum(w);
  const Var den = ad::max(c.opacity, tape.constant(Matrix::Constant(depths.rows(), 1, eps)));
  c.depth = ad::row_sum(w * tape.constant(depths)) * ad::reciprocal(den);
  return c;
}

}  // namespace

RenderGraph render_graph(ad::Tape& tape, const ImplicitField& field, const std::vector<Ray>& rays,
                         const Matrix& depths, const RenderConfig& cfg) {
  const auto r = static_cast<Eigen::Index>(rays.size());
  if (depths.rows() != r || depths.cols() < 1) throw ShapeError("render_graph: depth matrix does not match rays");
  const Eigen::Index s = depths.cols();
  const int k = field.object_count();
  if (cfg.only_object >= k) throw Error("render: object id out of range");

  RenderGraph g;
  g.points.resize(r * s, 3);
  Matrix dirs(r * s, 3);
  Matrix delta(r, s);
  for (Eigen::Index i = 0; i < r; ++i) {
    const Ray& ray = rays[static_cast<std::size_t>(i)];
    const Eigen::VectorXd v = depths.row(i).transpose();
    delta.row(i) = ray.vacuum ? Eigen::RowVectorXd::Zero(s) : Eigen::RowVectorXd(segment_lengths(v, ray.far).transpose());
    for (Eigen::Index j = 0; j < s; ++j) {
      g.points.row(i * s + j) = (ray.origin + v(j) * ray.dir).transpose();
      dirs.row(i * s + j) = ray.dir.transpose();
    }
  }
  g.samples = field.record(tape, g.points, dirs, cfg.only_object);
  const double gamma = field.gamma();

  Var d = cfg.only_object >= 0 ? ad::slice_cols(g.samples.sdf, cfg.only_object, 1) : ad::row_min(g.samples.sdf);
  if (cfg.printed_density_variant) d = -d;
  const Var sigma = ad::reshape(ad::laplace_density(d, g.samples.beta), r, s);
  const Composite c = composite(tape, sigma, delta, depths, cfg.depth_epsilon);
  g.weights = c.weights;
  g.opacity = c.opacity;
  g.depth = c.depth;

  Matrix bg(1, 3);
  bg.row(0) = cfg.background_color.transpose();
  g.color = ad::segment_weighted_sum(c.weights, g.samples.rgb) + ad::matmul(1.0 - c.opacity, tape.constant(bg));
  g.semantic = ad::segment_weighted_sum(c.weights, gamma * ad::sigmoid(g.samples.sdf, -gamma));

  if (cfg.object_outputs) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(k * r * s));
    for (int o = 0; o < k; ++o)
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < s; ++j) idx[static_cast<std::size_t>((o * r + i) * s + j)] = (i * s + j) * k + o;
    Var dk = ad::gather(g.samples.sdf, std::move(idx), k * r, s);
    if (cfg.printed_density_variant) dk = -dk;
    const Var sk = ad::laplace_density(dk, g.samples.beta);
    const Composite ck = composite(tape, sk, delta.replicate(k, 1), depths.replicate(k, 1), cfg.depth_epsilon);
    std::vector<std::int64_t> back(static_cast<std::size_t>(r * k));
    for (Eigen::Index i = 0; i < r; ++i)
      for (int o = 0; o < k; ++o) back[static_cast<std::size_t>(i * k + o)] = o * r + i;
    g.object_depth = ad::gather(ck.depth, back, r, k);
    g.object_opacity = ad::gather(ck.opacity, back, r, k);
  }
  return g;
}

namespace {

// Presents precomputed samples as constants so inference composites through
// the same graph code without recording the networks.
class FrozenField : public ImplicitField {
 public:
  explicit FrozenField(const ImplicitField& inner) : inner_(inner) {}
  int object_count() const override { return inner_.object_count(); }
  double beta() const override { return inner_.beta(); }
  double gamma() const override { return inner_.gamma(); }
  Matrix object_sdf(const Matrix& points) const override { return inner_.object_sdf(points); }
  FieldSamples record(ad::Tape& tape, const Matrix& points, const Matrix& dirs, int channel) const override {
    PlainSamples p = inner_.evaluate(points, dirs, channel);
    FieldSamples s;
    s.sdf = tape.constant(std::move(p.sdf));
    s.gradient = tape.constant(std::move(p.gradient));
    s.rgb = tape.constant(std::move(p.rgb));
    s.beta = tape.scalar_constant(inner_.beta());
    return s;
  }

 private:
  const ImplicitField& inner_;
};

std::vector<RenderOutput> render_chunk(const ImplicitField& field, const std::vector<Ray>& rays,
                                       const RenderConfig& cfg, std::uint64_t seed, std::uint64_t offset) {
  const Matrix depths = sample_rays(rays, cfg, field, seed, offset);
  ad::Tape tape;
  const RenderGraph g = render_graph(tape, FrozenField(field), rays, depths, cfg);
  std::vector<RenderOutput> out(rays.size());
  for (std::size_t i = 0; i < rays.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    RenderOutput& o = out[i];
    o.color = g.color.value().row(r).transpose();
    o.semantic = g.semantic.value().row(r).transpose();
    o.depth = g.depth.value()(r, 0);
    o.opacity = g.opacity.value()(r, 0);
    if (cfg.object_outputs) {
      o.object_depth = g.object_depth.value().row(r).transpose();
      o.object_opacity = g.object_opacity.value().row(r).transpose();
    }
  }
  return out;
}

}  // namespace

RenderOutput render_ray(const ImplicitField& field, const Ray& ray, const RenderConfig& cfg, std::uint64_t seed) {
  return render_chunk(field, {ray}, cfg, seed, 0).front();
}

std::vector<RenderOutput> render_rays(const ImplicitField& field, const std::vector<Ray>& rays,
                                      const RenderConfig& cfg, std::uint64_t seed) {
  constexpr std::size_t kChunk = 256;
  const std::size_t chunks = (rays.size() + kChunk - 1) / kChunk;
  std::vector<RenderOutput> out(rays.size());
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t b = c * kChunk, e = std::min(rays.size(), b + kChunk);
    const std::vector<Ray> part(rays.begin() + static_cast<std::ptrdiff_t>(b), rays.begin() + static_cast<std::ptrdiff_t>(e));
    try {
      auto res = render_chunk(field, part, cfg, seed, b);
      std::move(res.begin(), res.end(), out.begin() + static_cast<std::ptrdiff_t>(b));
    } catch (const NonFiniteError& err) {
      throw NonFiniteError("ray", static_cast<std::int64_t>(b), err.what());
    }
  });
  return out;
}

int semantic_label(const RenderOutput& out, int background_id, double opacity_threshold) {
  if (out.opacity < opacity_threshold || out.semantic.size() == 0) return background_id;
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < out.semantic.size(); ++k)
    if (out.semantic(k) > out.semantic(best)) best = k;
  return static_cast<int>(best);
}

int nearest_depth_label(const RenderOutput& out, int background_id, double opacity_threshold) {
  int best = -1;
  for (Eigen::Index k = 0; k < out.object_depth.size(); ++k) {
    if (out.object_opacity(k) < opacity_threshold) continue;
    if (best < 0 || out.object_depth(k) < out.object_depth(best)) best = static_cast<int>(k);
  }
  return best >= 0 ? best : semantic_label(out, background_id, opacity_threshold);
}

}  // namespace objsdf::render
