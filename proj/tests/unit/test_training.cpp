#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>

#include "objsdf/autodiff/tape.h"
#include "objsdf/common/error.h"
#include "objsdf/common/rng.h"
#include "objsdf/training/training.h"

using namespace objsdf;
namespace fs = std::filesystem;

namespace {

geo::SceneSpec smoke_scene() {
  geo::SceneSpec s;
  geo::Primitive sphere;
  sphere.kind = geo::PrimitiveKind::kSphere;
  sphere.radius = 0.35;
  sphere.pose.translation = Vec3(0.0, 0.0, -0.15);
  sphere.albedo = Vec3(0.9, 0.25, 0.2);
  sphere.object_id = 0;
  geo::Primitive floor;
  floor.kind = geo::PrimitiveKind::kHalfSpace;
  floor.pose.translation = Vec3(0.0, 0.0, -0.5);
  floor.albedo = Vec3(0.7, 0.7, 0.6);
  floor.object_id = 1;
  s.primitives = {sphere, floor};
  s.bbox = geo::BBox{Vec3(-1.0, -1.0, -0.6), Vec3(1.0, 1.0, 0.6)};
  return s;
}

const data::Dataset& smoke_dataset() {
  static const data::Dataset ds = [] {
    data::DatagenConfig cfg;
    cfg.views = 10;
    cfg.width = cfg.height = 16;
    cfg.fov_deg = 50.0;
    cfg.distance_min = 2.0;
    cfg.distance_max = 2.3;
    cfg.min_visible_fraction = 0.0;
    cfg.seed = 4;
    const fs::path dir = fs::temp_directory_path() / ("objsdf_train_ds_" + std::to_string(::getpid()));
    auto d = data::generate_dataset(smoke_scene(), cfg, dir.string());
    fs::remove_all(dir);
    return d;
  }();
  return ds;
}

train::TrainConfig tiny_config() {
  train::TrainConfig c;
  c.shape.object_count = 2;
  c.shape.phi_width = 16;
  c.shape.phi_layers = 2;
  c.shape.feature_dim = 8;
  c.shape.theta_width = 16;
  c.shape.theta_layers = 2;
  c.shape.pe_levels_pos = 2;
  c.shape.pe_levels_dir = 1;
  c.rays_per_batch = 12;
  c.render.n_coarse = 8;
  c.render.n_fine = 4;
  c.chunk_rays = 5;
  c.iterations = 10;
  c.checkpoint_every = 0;
  c.seed = 17;
  return c;
}

// Wraps an analytic scene and scales selected channels.
class ScaledField : public render::ImplicitField {
 public:
  ScaledField(geo::SceneSpec s, std::vector<double> scale) : base_(std::move(s), 0.1, 20.0), scale_(std::move(scale)) {}
  int object_count() const override { return base_.object_count(); }
  double beta() const override { return base_.beta(); }
  double gamma() const override { return base_.gamma(); }
  Matrix object_sdf(const Matrix& p) const override { return base_.object_sdf(p) * scale_matrix(); }
  render::FieldSamples record(ad::Tape& tape, const Matrix& p, const Matrix& d, int channel) const override {
    render::FieldSamples s = base_.record(tape, p, d, channel);
    s.sdf = tape.constant(s.sdf.value() * scale_matrix());
    s.gradient = tape.constant(s.gradient.value() * scale_matrix());
    return s;
  }

 private:
  Matrix scale_matrix() const {
    Matrix m = Matrix::Zero(static_cast<Eigen::Index>(scale_.size()), static_cast<Eigen::Index>(scale_.size()));
    for (std::size_t i = 0; i < scale_.size(); ++i) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = scale_[i];
    return m;
  }
  render::AnalyticField base_;
  std::vector<double> scale_;
};

Matrix off_center_points(int n, std::uint64_t seed) {
  Rng rng(seed);
  Matrix p(n, 3);
  for (int i = 0; i < n; ++i) {
    p(i, 0) = 0.6 + 0.3 * uniform01(rng);
    p(i, 1) = 2.0 * uniform01(rng) - 1.0;
    p(i, 2) = 0.8 * uniform01(rng) - 0.4;
  }
  return p;
}

bool same_model(const fields::FieldModel& a, const fields::FieldModel& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (*pa[i] != *pb[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("loss_rec: examples") {
  Matrix gt(2, 3);
  gt << 0.1, 0.2, 0.3, 0.6, 0.5, 0.4;
  CHECK(train::loss_rec(gt, gt) == 0.0);
  const Matrix shifted = gt.array() + 0.1;
  CHECK(train::loss_rec(shifted, gt) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(train::loss_rec(Matrix::Zero(1, 3), Matrix::Ones(1, 3)) == 3.0);
  CHECK_THROWS_AS(train::loss_rec(Matrix::Zero(2, 3), Matrix::Zero(3, 3)), ShapeError);
}

TEST_CASE("loss_semantic: examples") {
  Matrix one_hot = Matrix::Zero(2, 3);
  one_hot(0, 1) = 1.0;
  one_hot(1, 2) = 1.0;
  const std::vector<int> labels{1, 2};
  CHECK(train::loss_semantic(one_hot, labels) == 0.0);
  const Matrix uniform = Matrix::Constant(1, 4, 0.25);
  const std::vector<int> l0{3};
  CHECK(train::loss_semantic(uniform, l0) == doctest::Approx(1.3862943611198906).epsilon(1e-14));
  Matrix tiny(1, 2);
  tiny << 1e-20, 1.0 - 1e-20;
  const std::vector<int> l1{0};
  CHECK(train::loss_semantic(tiny, l1) == doctest::Approx(27.631021115928547).epsilon(1e-14));
  const std::vector<int> bad{4};
  CHECK_THROWS(train::loss_semantic(uniform, bad));
}

TEST_CASE("loss_eikonal: exact, scaled and constant channels") {
  const auto scene = geo::reference_scene();
  const Matrix p = off_center_points(200, 1);
  CHECK(train::loss_eikonal(render::AnalyticField(scene, 0.1, 20.0), p) < 1e-10);
  CHECK(train::loss_eikonal(ScaledField(scene, {1.0, 2.0, 1.0}), p) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(train::loss_eikonal(ScaledField(scene, {0.0, 1.0, 1.0}), p) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(train::loss_eikonal(ScaledField(scene, {0.0, 2.0, 1.0}), p) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("adam: zero gradient, sign asymptote, symmetry and shapes") {
  Matrix w = Matrix::Constant(2, 2, 0.7);
  const Matrix w0 = w;
  train::AdamState st;
  std::vector<Matrix*> ws{&w};
  std::vector<Matrix> g{Matrix::Zero(2, 2)};
  for (int i = 0; i < 5; ++i) train::adam_update(ws, g, st, 1e-2);
  CHECK(w == w0);

  Matrix a = Matrix::Zero(1, 2);
  train::AdamState sa;
  std::vector<Matrix*> wa{&a};
  std::vector<Matrix> ga{Matrix(1, 2)};
  ga[0] << 0.3, -0.3;
  Matrix before;
  for (int i = 0; i < 3000; ++i) {
    before = a;
    train::adam_update(wa, ga, sa, 1e-3);
  }
  CHECK((a - before)(0, 0) == doctest::Approx(-1e-3).epsilon(1e-6));
  CHECK((a - before)(0, 1) == doctest::Approx(1e-3).epsilon(1e-6));
  CHECK(a(0, 0) == -a(0, 1));

  std::vector<Matrix> wrong{Matrix::Zero(3, 1)};
  train::AdamState s2;
  CHECK_THROWS_AS(train::adam_update(wa, wrong, s2, 1e-3), ShapeError);
}

TEST_CASE("learning rate: cosine from lr to lr_final") {
  train::TrainConfig c;
  c.iterations = 100;
  CHECK(train::learning_rate(c, 0) == doctest::Approx(5e-4).epsilon(1e-15));
  CHECK(train::learning_rate(c, 50) == doctest::Approx(2.75e-4).epsilon(1e-12));
  CHECK(train::learning_rate(c, 100) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(train::learning_rate(c, 200) == doctest::Approx(5e-5).epsilon(1e-12));
}

TEST_CASE("evaluate_loss: total identity against independently recomputed parts") {
  const auto& ds = smoke_dataset();
  auto cfg = tiny_config();
  cfg.render.background_color = ds.background_color;
  const auto pool = train::make_ray_pool(ds);
  const auto st = train::init_state(cfg, ds.object_count);
  const auto batch = train::sample_batch(pool, st.model, cfg, 3);
  const auto ev = train::evaluate_loss(st.model, batch, cfg, false);

  ad::Tape tape;
  const render::NeuralField field(st.model);
  const auto g = render::render_graph(tape, field, batch.rays, batch.depths, cfg.render);
  const double rec = train::loss_rec(g.color.value(), batch.colors);
  Matrix probs(0, ds.object_count);
  std::vector<int> kept;
  for (std::size_t i = 0; i < batch.rays.size(); ++i) {
    if (!batch.semantic_mask[i]) continue;
    const Eigen::RowVectorXd s = g.semantic.value().row(static_cast<Eigen::Index>(i));
    const Eigen::RowVectorXd e = (s.array() - s.maxCoeff()).exp();
    probs.conservativeResize(probs.rows() + 1, Eigen::NoChange);
    probs.row(probs.rows() - 1) = e / e.sum();
    kept.push_back(batch.labels[i]);
  }
  const double sem = train::loss_semantic(probs, kept);
  const Matrix gu = fields::object_sdf_forward(st.model, batch.uniform_points, true).gradient;
  const Matrix gr = g.samples.gradient.value();
  const Eigen::Index nr = gr.rows() / 3, nu = gu.rows() / 3;
  Matrix all(3 * (nr + nu), gr.cols());
  for (int c = 0; c < 3; ++c) {
    all.middleRows(c * (nr + nu), nr) = gr.middleRows(c * nr, nr);
    all.middleRows(c * (nr + nu) + nr, nu) = gu.middleRows(c * nu, nu);
  }
  const double eik = train::loss_eikonal(all);

  CHECK(std::abs(ev.rec - rec) < 1e-9);
  CHECK(std::abs(ev.semantic - sem) < 1e-9);
  CHECK(std::abs(ev.eikonal - eik) < 1e-9);
  CHECK(std::abs(ev.total - (rec + cfg.lambda_semantic * sem + cfg.lambda_eikonal * eik)) < 1e-9);
  CHECK(ev.rec >= 0.0);
  CHECK(ev.semantic >= 0.0);
  CHECK(ev.eikonal >= 0.0);
  CHECK(batch.uniform_points.rows() == static_cast<Eigen::Index>(batch.rays.size()) * batch.depths.cols());
}

TEST_CASE("evaluate_loss: gradient matches finite differences on a parameter slice") {
  const auto& ds = smoke_dataset();
  auto cfg = tiny_config();
  cfg.render.background_color = ds.background_color;
  cfg.eikonal_uniform = 40;
  const auto pool = train::make_ray_pool(ds);
  auto model = train::init_state(cfg, ds.object_count).model;
  const auto batch = train::sample_batch(pool, model, cfg, 1);
  const auto ev = train::evaluate_loss(model, batch, cfg, true);

  Rng rng(77);
  const auto params = model.parameters();
  int checked = 0;
  double worst = 0.0;
  while (checked < 10) {
    const std::size_t t = uniform_index(rng, params.size());
    Matrix& w = *params[t];
    const auto e = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(w.size())));
    const double analytic = ev.gradient[t].data()[e];
    const double x0 = w.data()[e];
    const double h = 1e-6;
    w.data()[e] = x0 + h;
    const double up = train::evaluate_loss(model, batch, cfg, false).total;
    w.data()[e] = x0 - h;
    const double dn = train::evaluate_loss(model, batch, cfg, false).total;
    w.data()[e] = x0;
    const double fd = (up - dn) / (2.0 * h);
    if (std::max(std::abs(fd), std::abs(analytic)) < 1e-6) continue;  // dead unit, nothing to compare
    worst = std::max(worst, std::abs(fd - analytic) / std::max(std::abs(fd), std::abs(analytic)));
    ++checked;
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("evaluate_loss: ablation switches") {
  const auto& ds = smoke_dataset();
  auto cfg = tiny_config();
  cfg.render.background_color = ds.background_color;
  const auto pool = train::make_ray_pool(ds);
  const auto model = train::init_state(cfg, ds.object_count).model;
  auto batch = train::sample_batch(pool, model, cfg, 2);

  SUBCASE("lambda_semantic = 0 makes labels irrelevant") {
    cfg.lambda_semantic = 0.0;
    const auto a = train::evaluate_loss(model, batch, cfg, true);
    for (int& l : batch.labels) l = (l + 1) % ds.object_count;
    const auto b = train::evaluate_loss(model, batch, cfg, true);
    for (std::size_t i = 0; i < a.gradient.size(); ++i) CHECK(a.gradient[i] == b.gradient[i]);
    cfg.lambda_semantic = 0.04;
    const auto c = train::evaluate_loss(model, batch, cfg, true);
    bool differs = false;
    for (std::size_t i = 0; i < a.gradient.size(); ++i) differs = differs || a.gradient[i] != c.gradient[i];
    CHECK(differs);
  }
  SUBCASE("lambda_eikonal = 0 makes box samples irrelevant and training still runs") {
    cfg.lambda_eikonal = 0.0;
    const auto a = train::evaluate_loss(model, batch, cfg, true);
    batch.uniform_points.array() *= 0.5;
    const auto b = train::evaluate_loss(model, batch, cfg, true);
    for (std::size_t i = 0; i < a.gradient.size(); ++i) CHECK(a.gradient[i] == b.gradient[i]);
    CHECK(a.eikonal != b.eikonal);
    auto st = train::init_state(cfg, ds.object_count);
    for (int i = 0; i < 3; ++i) CHECK_FALSE(train::train_step(st, train::sample_batch(pool, st.model, cfg, i), cfg).aborted);
  }
}

TEST_CASE("train_step: zero-gradient batch leaves weights unchanged") {
  const auto& ds = smoke_dataset();
  auto cfg = tiny_config();
  cfg.render.background_color = ds.background_color;
  cfg.lambda_semantic = 0.0;
  cfg.lambda_eikonal = 0.0;
  cfg.chunk_rays = cfg.rays_per_batch;  // same GEMM shapes as the reference render below
  const auto pool = train::make_ray_pool(ds);
  auto st = train::init_state(cfg, ds.object_count);
  auto batch = train::sample_batch(pool, st.model, cfg, 0);
  ad::Tape tape;
  batch.colors = render::render_graph(tape, render::NeuralField(st.model), batch.rays, batch.depths, cfg.render).color.value();
  const auto before = st.model;
  const auto rep = train::train_step(st, batch, cfg);
  CHECK_FALSE(rep.aborted);
  CHECK(rep.rec == 0.0);
  CHECK(same_model(before, st.model));
  CHECK(st.iteration == 1);
}

TEST_CASE("train_step: deterministic reports") {
  const auto& ds = smoke_dataset();
  auto cfg = tiny_config();
  cfg.render.background_color = ds.background_color;
  const auto pool = train::make_ray_pool(ds);
  auto run = [&] {
    auto st = train::init_state(cfg, ds.object_count);
    std::vector<train::LossReport> reps;
    for (int i = 0; i < 3; ++i) reps.push_back(train::train_step(st, train::sample_batch(pool, st.model, cfg, i), cfg));
    return std::make_pair(reps, st);
  };
  const auto [ra, sa] = run();
  const auto [rb, sb] = run();
  for (std::size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].total == rb[i].total);
    CHECK(ra[i].rec == rb[i].rec);
    CHECK(ra[i].semantic == rb[i].semantic);
    CHECK(ra[i].eikonal == rb[i].eikonal);
    CHECK(ra[i].beta == rb[i].beta);
  }
  CHECK(same_model(sa.model, sb.model));
  // Chunking changes only the reduction grouping, not the math.
  auto cfg2 = cfg;
  cfg2.chunk_rays = 12;
  auto s2 = train::init_state(cfg2, ds.object_count);
  const auto r2 = train::train_step(s2, train::sample_batch(pool, s2.model, cfg2, 0), cfg2);
  CHECK(r2.total == doctest::Approx(ra[0].total).epsilon(1e-12));
}

TEST_CASE("train_step: beta floor and abort on non-finite weights") {
  const auto& ds = smoke_dataset();
  auto cfg = tiny_config();
  cfg.render.background_color = ds.background_color;
  const auto pool = train::make_ray_pool(ds);
  auto st = train::init_state(cfg, ds.object_count);
  cfg.beta_floor = 0.25;
  train::train_step(st, train::sample_batch(pool, st.model, cfg, 0), cfg);
  CHECK(st.model.beta() == doctest::Approx(0.25).epsilon(1e-14));

  auto bad = train::init_state(cfg, ds.object_count);
  const auto batch = train::sample_batch(pool, bad.model, cfg, 0);
  bad.model.phi_w[1](0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto snapshot = bad.model.log_beta;
  const auto rep = train::train_step(bad, batch, cfg);
  CHECK(rep.aborted);
  CHECK_FALSE(rep.abort_reason.empty());
  CHECK(bad.iteration == 0);
  CHECK(bad.adam.step == 0);
  CHECK(bad.model.log_beta == snapshot);
}

TEST_CASE("train: smoke descent on a sphere over a floor") {
  const auto& ds = smoke_dataset();
  train::TrainConfig cfg;
  cfg.shape.object_count = 2;
  cfg.shape.phi_width = 32;
  cfg.shape.phi_layers = 3;
  cfg.shape.feature_dim = 16;
  cfg.shape.theta_width = 32;
  cfg.shape.theta_layers = 2;
  cfg.rays_per_batch = 64;
  cfg.render.n_coarse = 16;
  cfg.render.n_fine = 8;
  cfg.iterations = 200;
  cfg.lr = 5e-3;
  cfg.lr_final = 5e-4;
  cfg.checkpoint_every = 0;
  cfg.seed = 3;
  const auto res = train::train(train::make_ray_pool(ds), cfg, "");
  REQUIRE(res.reports.size() == 200);
  CHECK(res.reports.back().total < 0.5 * res.reports.front().total);
}

TEST_CASE("train: log, checkpoints and bit-identical resume") {
  const auto& ds = smoke_dataset();
  auto cfg = tiny_config();
  cfg.iterations = 6;
  cfg.checkpoint_every = 3;
  const auto pool = train::make_ray_pool(ds);
  const fs::path a = fs::temp_directory_path() / ("objsdf_train_a_" + std::to_string(::getpid()));
  const fs::path b = fs::temp_directory_path() / ("objsdf_train_b_" + std::to_string(::getpid()));
  fs::remove_all(a);
  fs::remove_all(b);
  const auto full = train::train(pool, cfg, a.string());
  CHECK(fs::exists(a / "checkpoint_000003.bin"));
  CHECK(fs::exists(a / "checkpoint_000006.bin"));
  std::ifstream log(a / "log.csv");
  std::string line;
  int rows = 0;
  std::getline(log, line);
  CHECK(line == "iteration,rec,semantic,eikonal,total,beta,lr,psnr_val");
  while (std::getline(log, line)) ++rows;
  CHECK(rows == 6);

  const auto resumed = train::train(pool, cfg, b.string(), (a / "checkpoint_000003.bin").string());
  CHECK(resumed.state.iteration == 6);
  CHECK(same_model(resumed.state.model, full.state.model));
  const auto loaded = train::load_state((a / "checkpoint.bin").string());
  CHECK(same_model(loaded.model, full.state.model));
  CHECK(loaded.adam.step == 6);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("train config: validation") {
  train::TrainConfig c;
  c.rays_per_batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lambda_eikonal = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
