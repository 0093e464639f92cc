#include "objsdf/fields/field_model.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>

#include "objsdf/common/error.h"
#include "objsdf/common/vecmath.h"
#include "objsdf/common/fs.h"
#include "objsdf/common/rng.h"

namespace objsdf::fields {

using ad::Var;

namespace {

using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_finite(const Matrix& m, std::int64_t layer, const char* net) {
  if (!all_finite(m)) throw NonFiniteError("layer", layer, net);
}

Matrix softplus_plain(const Matrix& h, double s) {
  return softplus_array(h.array(), s).matrix();
}

Matrix sigmoid_plain(const Matrix& h, double s) { return (1.0 / (1.0 + (-s * h.array()).exp())).matrix(); }

Matrix normal_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double mean, double stddev) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = mean + stddev * normal01(rng);
  return m;
}

}  // namespace

void FieldShape::validate() const {
  if (object_count < 1) throw ConfigError("model.object_count must be >= 1");
  if (phi_width < 1 || phi_layers < 1 || theta_width < 1 || theta_layers < 1)
    throw ConfigError("model: widths and layer counts must be >= 1");
  if (feature_dim < 0) throw ConfigError("model.feature_dim must be >= 0");
  if (pe_levels_pos < 0 || pe_levels_dir < 0) throw ConfigError("model: encoding levels must be >= 0");
  if (!(softplus_sharpness > 0.0)) throw ConfigError("model.softplus_sharpness must be positive");
}

FieldShape FieldShape::desk(int object_count) {
  FieldShape s;
  s.object_count = object_count;
  s.phi_width = s.feature_dim = s.theta_width = 128;
  return s;
}

FieldShape FieldShape::full(int object_count) {
  FieldShape s;
  s.object_count = object_count;
  s.phi_width = s.feature_dim = s.theta_width = 256;
  return s;
}

double FieldModel::beta() const { return std::exp(log_beta(0, 0)); }

std::vector<Matrix*> FieldModel::parameters() {
  std::vector<Matrix*> out;
  for (std::size_t l = 0; l < phi_w.size(); ++l) {
    out.push_back(&phi_w[l]);
    out.push_back(&phi_b[l]);
  }
  for (std::size_t l = 0; l < theta_w.size(); ++l) {
    out.push_back(&theta_w[l]);
    out.push_back(&theta_b[l]);
  }
  out.push_back(&log_beta);
  return out;
}

std::vector<const Matrix*> FieldModel::parameters() const {
  std::vector<const Matrix*> out;
  for (Matrix* m : const_cast<FieldModel*>(this)->parameters()) out.push_back(m);
  return out;
}

std::int64_t FieldModel::parameter_count() const {
  std::int64_t n = 0;
  for (const Matrix* m : parameters()) n += m->size();
  return n;
}

void FieldModel::check_shapes() const {
  shape.validate();
  auto expect = [](const Matrix& m, Eigen::Index r, Eigen::Index c, const std::string& what) {
    if (m.rows() != r || m.cols() != c)
      throw ShapeError(what + ": expected " + std::to_string(r) + "x" + std::to_string(c) + ", got " +
                       std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  };
  const auto np = static_cast<std::size_t>(shape.phi_layers + 1);
  const auto nt = static_cast<std::size_t>(shape.theta_layers + 1);
  if (phi_w.size() != np || phi_b.size() != np) throw ShapeError("phi: wrong layer count");
  if (theta_w.size() != nt || theta_b.size() != nt) throw ShapeError("theta: wrong layer count");
  int in = shape.phi_input_dim();
  for (std::size_t l = 0; l < np; ++l) {
    const int out = l + 1 == np ? shape.phi_output_dim() : shape.phi_width;
    expect(phi_w[l], in, out, "phi weight " + std::to_string(l));
    expect(phi_b[l], 1, out, "phi bias " + std::to_string(l));
    in = out;
  }
  in = shape.theta_input_dim();
  for (std::size_t l = 0; l < nt; ++l) {
    const int out = l + 1 == nt ? 3 : shape.theta_width;
    expect(theta_w[l], in, out, "theta weight " + std::to_string(l));
    expect(theta_b[l], 1, out, "theta bias " + std::to_string(l));
    in = out;
  }
  expect(log_beta, 1, 1, "log_beta");
  if (!(gamma > 0.0)) throw ConfigError("model.gamma must be positive");
}

Matrix positional_encode(const Matrix& x, int levels) {
  if (x.cols() != 3) throw ShapeError("positional_encode: expected N x 3 input");
  if (levels < 0) throw Error("positional_encode: levels must be >= 0");
  Matrix out(x.rows(), 3 + 6 * levels);
  out.leftCols(3) = x;
  for (int l = 0; l < levels; ++l) {
    const double f = std::ldexp(std::numbers::pi, l);
    const Array a = f * x.array();
    out.middleCols(3 + 6 * l, 3) = a.sin().matrix();
    out.middleCols(6 + 6 * l, 3) = a.cos().matrix();
  }
  return out;
}

Eigen::VectorXd positional_encode(const Vec3& x, int levels) {
  Matrix m(1, 3);
  m.row(0) = x.transpose();
  return positional_encode(m, levels).row(0).transpose();
}

Matrix positional_encode_derivative(const Matrix& x, int levels, int axis) {
  Matrix out = Matrix::Zero(x.rows(), 3 + 6 * levels);
  out.col(axis).setOnes();
  for (int l = 0; l < levels; ++l) {
    const double f = std::ldexp(std::numbers::pi, l);
    const Array a = f * x.col(axis).array();
    out.col(3 + 6 * l + axis) = (f * a.cos()).matrix();
    out.col(6 + 6 * l + axis) = (-f * a.sin()).matrix();
  }
  return out;
}

FieldModel init_geometric(const FieldShape& shape, double radius, std::uint64_t seed) {
  shape.validate();
  if (!(radius > 0.0)) throw ConfigError("init radius must be positive");
  FieldModel m;
  m.shape = shape;
  Rng rng(derive_seed(seed, 0x1417));
  int in = shape.phi_input_dim();
  for (int l = 0; l <= shape.phi_layers; ++l) {
    const bool last = l == shape.phi_layers;
    const int out = last ? shape.phi_output_dim() : shape.phi_width;
    Matrix w;
    Matrix b = Matrix::Zero(1, out);
    if (last) {
      w = normal_matrix(rng, in, out, std::sqrt(std::numbers::pi) / std::sqrt(in), 1e-4);
      b.setConstant(-radius);
    } else {
      w = normal_matrix(rng, in, out, 0.0, std::sqrt(2.0) / std::sqrt(out));
      if (l == 0) w.bottomRows(in - 3).setZero();
    }
    m.phi_w.push_back(std::move(w));
    m.phi_b.push_back(std::move(b));
    in = out;
  }
  in = shape.theta_input_dim();
  for (int l = 0; l <= shape.theta_layers; ++l) {
    const bool last = l == shape.theta_layers;
    const int out = last ? 3 : shape.theta_width;
    m.theta_w.push_back(normal_matrix(rng, in, out, 0.0, std::sqrt((last ? 1.0 : 2.0) / in)));
    m.theta_b.push_back(Matrix::Zero(1, out));
    in = out;
  }
  m.check_shapes();
  return m;
}

PhiOutput object_sdf_forward(const FieldModel& model, const Matrix& points, bool with_gradient) {
  if (points.cols() != 3) throw ShapeError("object_sdf_forward: expected N x 3 points");
  const FieldShape& s = model.shape;
  const Eigen::Index n = points.rows();
  Matrix x = positional_encode(points, s.pe_levels_pos);
  Matrix t;
  if (with_gradient) {
    t.resize(3 * n, x.cols());
    for (int c = 0; c < 3; ++c) t.middleRows(c * n, n) = positional_encode_derivative(points, s.pe_levels_pos, c);
  }
  const auto layers = model.phi_w.size();
  for (std::size_t l = 0; l + 1 < layers; ++l) {
    Matrix h(n, model.phi_w[l].cols());
    h.noalias() = x * model.phi_w[l];
    h.rowwise() += model.phi_b[l].row(0);
    check_finite(h, static_cast<std::int64_t>(l), "phi");
    if (with_gradient) {
      Matrix th(3 * n, h.cols());
      th.noalias() = t * model.phi_w[l];
      const Matrix sg = sigmoid_plain(h, s.softplus_sharpness);
      for (int c = 0; c < 3; ++c) th.middleRows(c * n, n).array() *= sg.array();
      t = std::move(th);
    }
    x = softplus_plain(h, s.softplus_sharpness);
  }
  const Matrix& wl = model.phi_w.back();
  Matrix o(n, wl.cols());
  o.noalias() = x * wl;
  o.rowwise() += model.phi_b.back().row(0);
  check_finite(o, static_cast<std::int64_t>(layers - 1), "phi");
  PhiOutput out;
  out.sdf = o.leftCols(s.object_count);
  out.feature = o.rightCols(s.feature_dim);
  if (with_gradient) {
    out.gradient.resize(3 * n, s.object_count);
    out.gradient.noalias() = t * wl.leftCols(s.object_count);
    check_finite(out.gradient, static_cast<std::int64_t>(layers - 1), "phi gradient");
  }
  return out;
}

void object_sdf_forward(const FieldModel& model, const Vec3& p, Eigen::VectorXd& d, Eigen::VectorXd& z) {
  Matrix m(1, 3);
  m.row(0) = p.transpose();
  const PhiOutput o = object_sdf_forward(model, m, false);
  d = o.sdf.row(0).transpose();
  z = o.feature.row(0).transpose();
}

Matrix radiance_forward(const FieldModel& model, const Matrix& points, const Matrix& normals, const Matrix& dirs,
                        const Matrix& features) {
  const FieldShape& s = model.shape;
  const Eigen::Index n = points.rows();
  if (normals.rows() != n || dirs.rows() != n || features.rows() != n || normals.cols() != 3 || dirs.cols() != 3 ||
      features.cols() != s.feature_dim)
    throw ShapeError("radiance_forward: inconsistent input shapes");
  Matrix x(n, s.theta_input_dim());
  const int pe = s.phi_input_dim(), de = s.dir_input_dim();
  x.leftCols(pe) = positional_encode(points, s.pe_levels_pos);
  x.middleCols(pe, 3) = normals;
  x.middleCols(pe + 3, de) = positional_encode(dirs, s.pe_levels_dir);
  x.rightCols(s.feature_dim) = features;
  for (std::size_t l = 0; l < model.theta_w.size(); ++l) {
    Matrix h(n, model.theta_w[l].cols());
    h.noalias() = x * model.theta_w[l];
    h.rowwise() += model.theta_b[l].row(0);
    check_finite(h, static_cast<std::int64_t>(l), "theta");
    x = l + 1 < model.theta_w.size() ? Matrix(h.cwiseMax(0.0)) : sigmoid_plain(h, 1.0);
  }
  return x;
}

Vec3 radiance_forward(const FieldModel& model, const Vec3& p, const Vec3& n, const Vec3& dir,
                      const Eigen::VectorXd& z) {
  Matrix pm(1, 3), nm(1, 3), dm(1, 3), zm(1, z.size());
  pm.row(0) = p.transpose();
  nm.row(0) = n.transpose();
  dm.row(0) = dir.transpose();
  zm.row(0) = z.transpose();
  return radiance_forward(model, pm, nm, dm, zm).row(0).transpose();
}

namespace {

// f_phi with the point itself as a differentiable leaf, weights constant.
Var phi_of_point(ad::Tape& tape, const FieldModel& model, const Var& x) {
  const FieldShape& s = model.shape;
  std::vector<Var> parts{x};
  for (int l = 0; l < s.pe_levels_pos; ++l) {
    const Var a = std::ldexp(std::numbers::pi, l) * x;
    parts.push_back(ad::sin(a));
    parts.push_back(ad::cos(a));
  }
  Var h = ad::concat_cols(parts);
  for (std::size_t l = 0; l < model.phi_w.size(); ++l) {
    h = ad::affine(h, tape.constant(model.phi_w[l]), tape.constant(model.phi_b[l]));
    if (l + 1 < model.phi_w.size()) h = ad::softplus(h, s.softplus_sharpness);
  }
  return ad::slice_cols(h, 0, s.object_count);
}

Vec3 reverse_gradient(const FieldModel& model, const Vec3& p, int object_id) {
  ad::Tape tape;
  Matrix pm(1, 3);
  pm.row(0) = p.transpose();
  const Var x = tape.leaf(pm);
  const Var d = phi_of_point(tape, model, x);
  const Var root = object_id < 0 ? ad::row_min(d) : ad::slice_cols(d, object_id, 1);
  tape.backward(ad::sum(root));
  const Matrix& g = x.grad();
  const Vec3 out(g(0, 0), g(0, 1), g(0, 2));
  if (!all_finite(out)) throw NonFiniteError("point", 0, "scene normal");
  return out;
}

}  // namespace

Vec3 scene_normal(const FieldModel& model, const Vec3& p) { return reverse_gradient(model, p, -1); }

Vec3 object_gradient(const FieldModel& model, const Vec3& p, int object_id) {
  if (object_id < 0 || object_id >= model.shape.object_count) throw Error("object id out of range");
  return reverse_gradient(model, p, object_id);
}

TapeParams TapeParams::bind(ad::Tape& tape, const FieldModel& model) {
  TapeParams p;
  for (std::size_t l = 0; l < model.phi_w.size(); ++l) {
    p.phi_w.push_back(tape.leaf(model.phi_w[l]));
    p.phi_b.push_back(tape.leaf(model.phi_b[l]));
  }
  for (std::size_t l = 0; l < model.theta_w.size(); ++l) {
    p.theta_w.push_back(tape.leaf(model.theta_w[l]));
    p.theta_b.push_back(tape.leaf(model.theta_b[l]));
  }
  p.log_beta = tape.leaf(model.log_beta);
  return p;
}

std::vector<Var> TapeParams::all() const {
  std::vector<Var> out;
  for (std::size_t l = 0; l < phi_w.size(); ++l) {
    out.push_back(phi_w[l]);
    out.push_back(phi_b[l]);
  }
  for (std::size_t l = 0; l < theta_w.size(); ++l) {
    out.push_back(theta_w[l]);
    out.push_back(theta_b[l]);
  }
  out.push_back(log_beta);
  return out;
}

PhiGraph phi_graph(const FieldModel& model, const TapeParams& params, const Matrix& points, bool with_gradient) {
  if (points.cols() != 3) throw ShapeError("phi_graph: expected N x 3 points");
  ad::Tape& tape = *params.log_beta.tape();
  const FieldShape& s = model.shape;
  const Eigen::Index n = points.rows();
  Var x = tape.constant(positional_encode(points, s.pe_levels_pos));
  Var t;
  if (with_gradient) {
    Matrix t0(3 * n, x.cols());
    for (int c = 0; c < 3; ++c) t0.middleRows(c * n, n) = positional_encode_derivative(points, s.pe_levels_pos, c);
    t = tape.constant(std::move(t0));
  }
  const auto layers = params.phi_w.size();
  for (std::size_t l = 0; l + 1 < layers; ++l) {
    const Var h = ad::affine(x, params.phi_w[l], params.phi_b[l]);
    if (with_gradient) t = ad::mul_tiled(ad::matmul(t, params.phi_w[l]), ad::sigmoid(h, s.softplus_sharpness), 3);
    x = ad::softplus(h, s.softplus_sharpness);
  }
  const Var o = ad::affine(x, params.phi_w.back(), params.phi_b.back());
  PhiGraph g;
  g.sdf = ad::slice_cols(o, 0, s.object_count);
  g.feature = ad::slice_cols(o, s.object_count, s.feature_dim);
  if (with_gradient) g.gradient = ad::matmul(t, ad::slice_cols(params.phi_w.back(), 0, s.object_count));
  return g;
}

Var theta_graph(const FieldModel& model, const TapeParams& params, const Matrix& points, const Var& normals,
                const Matrix& dirs, const Var& features) {
  ad::Tape& tape = *params.log_beta.tape();
  const FieldShape& s = model.shape;
  const Var parts[] = {tape.constant(positional_encode(points, s.pe_levels_pos)), normals,
                       tape.constant(positional_encode(dirs, s.pe_levels_dir)), features};
  Var x = ad::concat_cols(parts);
  for (std::size_t l = 0; l < params.theta_w.size(); ++l) {
    const Var h = ad::affine(x, params.theta_w[l], params.theta_b[l]);
    x = l + 1 < params.theta_w.size() ? ad::relu(h) : ad::sigmoid(h, 1.0);
  }
  return x;
}

nlohmann::json shape_to_json(const FieldShape& s) {
  return {{"object_count", s.object_count},   {"phi_width", s.phi_width},
          {"phi_layers", s.phi_layers},       {"feature_dim", s.feature_dim},
          {"theta_width", s.theta_width},     {"theta_layers", s.theta_layers},
          {"pe_levels_pos", s.pe_levels_pos}, {"pe_levels_dir", s.pe_levels_dir},
          {"softplus_sharpness", s.softplus_sharpness}};
}

FieldShape shape_from_json(const nlohmann::json& j) {
  FieldShape s;
  s.object_count = j.at("object_count").get<int>();
  s.phi_width = j.at("phi_width").get<int>();
  s.phi_layers = j.at("phi_layers").get<int>();
  s.feature_dim = j.at("feature_dim").get<int>();
  s.theta_width = j.at("theta_width").get<int>();
  s.theta_layers = j.at("theta_layers").get<int>();
  s.pe_levels_pos = j.at("pe_levels_pos").get<int>();
  s.pe_levels_dir = j.at("pe_levels_dir").get<int>();
  s.softplus_sharpness = j.at("softplus_sharpness").get<double>();
  s.validate();
  return s;
}

namespace {

constexpr char kMagic[8] = {'O', 'S', 'D', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::vector<unsigned char>& buf, const T& v) {
  const auto* p = reinterpret_cast<const unsigned char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

}  // namespace

void save_checkpoint(const std::string& path, const FieldModel& model, const nlohmann::json& extra_header,
                     const std::vector<const Matrix*>& extra) {
  model.check_shapes();
  nlohmann::json shapes = nlohmann::json::array();
  for (const Matrix* m : model.parameters()) shapes.push_back({m->rows(), m->cols()});
  nlohmann::json extra_shapes = nlohmann::json::array();
  for (const Matrix* m : extra) extra_shapes.push_back({m->rows(), m->cols()});
  nlohmann::json header = {{"shape", shape_to_json(model.shape)},
                           {"beta", model.beta()},
                           {"gamma", model.gamma},
                           {"object_count", model.shape.object_count},
                           {"pe_levels_pos", model.shape.pe_levels_pos},
                           {"pe_levels_dir", model.shape.pe_levels_dir},
                           {"tensors", shapes},
                           {"extra_tensors", extra_shapes},
                           {"extra", extra_header}};
  const std::string hs = header.dump();
  std::vector<unsigned char> buf(kMagic, kMagic + 8);
  put(buf, kVersion);
  put(buf, static_cast<std::uint64_t>(hs.size()));
  buf.insert(buf.end(), hs.begin(), hs.end());
  auto payload = [&](const Matrix& m) {
    const auto* p = reinterpret_cast<const unsigned char*>(m.data());
    buf.insert(buf.end(), p, p + sizeof(double) * static_cast<std::size_t>(m.size()));
  };
  for (const Matrix* m : model.parameters()) payload(*m);
  for (const Matrix* m : extra) payload(*m);
  write_file_atomic(path, std::span<const unsigned char>(buf));
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const std::string data = read_file(path);
  std::size_t off = 0;
  auto need = [&](std::size_t n) {
    if (off + n > data.size()) throw IoError(path + ": truncated checkpoint");
  };
  need(8 + 4 + 8);
  if (std::memcmp(data.data(), kMagic, 8) != 0) throw IoError(path + ": not a checkpoint file");
  off = 8;
  std::uint32_t version = 0;
  std::memcpy(&version, data.data() + off, 4);
  off += 4;
  if (version != kVersion) throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, data.data() + off, 8);
  off += 8;
  need(hlen);
  LoadedCheckpoint out;
  try {
    out.header = nlohmann::json::parse(data.substr(off, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": bad checkpoint header: " + e.what());
  }
  off += hlen;
  FieldModel m;
  m.shape = shape_from_json(out.header.at("shape"));
  m.gamma = out.header.at("gamma").get<double>();
  m.phi_w.resize(static_cast<std::size_t>(m.shape.phi_layers + 1));
  m.phi_b.resize(m.phi_w.size());
  m.theta_w.resize(static_cast<std::size_t>(m.shape.theta_layers + 1));
  m.theta_b.resize(m.theta_w.size());
  auto read_tensor = [&](Matrix& dst, const nlohmann::json& shape) {
    const auto r = shape.at(0).get<Eigen::Index>(), c = shape.at(1).get<Eigen::Index>();
    const std::size_t bytes = sizeof(double) * static_cast<std::size_t>(r * c);
    need(bytes);
    dst.resize(r, c);
    std::memcpy(dst.data(), data.data() + off, bytes);
    off += bytes;
  };
  const auto params = m.parameters();
  const auto& shapes = out.header.at("tensors");
  if (shapes.size() != params.size()) throw IoError(path + ": tensor count does not match the model layout");
  for (std::size_t i = 0; i < params.size(); ++i) read_tensor(*params[i], shapes[i]);
  for (const auto& shape : out.header.at("extra_tensors")) {
    out.extra.emplace_back();
    read_tensor(out.extra.back(), shape);
  }
  if (off != data.size()) throw IoError(path + ": trailing bytes in checkpoint");
  m.check_shapes();
  out.model = std::move(m);
  return out;
}

}  // namespace objsdf::fields
