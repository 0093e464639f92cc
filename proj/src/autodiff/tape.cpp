#include "objsdf/autodiff/tape.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <string>

#include "objsdf/common/error.h"
#include "objsdf/common/vecmath.h"

namespace objsdf::ad {

namespace {

std::atomic<std::uint64_t> g_tape_serial{1};

using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr const char* kOpNames[] = {
    "leaf",       "constant",  "add",        "sub",         "mul",         "min",
    "max",        "neg",       "scale",      "add_scalar",  "sin",         "cos",
    "exp",        "log",       "reciprocal", "sqrt",        "square",      "abs",
    "relu",       "softplus",  "sigmoid",    "matmul",      "affine",      "broadcast",
    "sum",        "row_sum",   "col_sum",    "row_min",     "concat_cols", "slice_cols",
    "reshape",    "tile_rows", "sum_tiles",  "mul_tiled",   "tile_norm",   "cumsum_exclusive",
    "segment_weighted_sum",    "gather",     "laplace_density",            "softmax_cross_entropy",
};
static_assert(sizeof(kOpNames) / sizeof(kOpNames[0]) == static_cast<std::size_t>(OpKind::kCount_));

[[noreturn]] void shape_fail(OpKind op, const std::string& what) {
  throw ShapeError(std::string(op_name(op)) + ": " + what);
}

std::string dims(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

Array softplus_values(const Array& x, double s) { return softplus_array(x, s); }

Array sigmoid_values(const Array& x, double k) { return 1.0 / (1.0 + (-k * x).exp()); }

// Laplace density and its partials with respect to d and beta.
struct DensityParts {
  double sigma;
  double d_sdf;
  double d_beta;
};

DensityParts density_parts(double d, double beta) {
  const double a = 1.0 / beta;
  const double e = std::exp(-a * std::abs(d));
  DensityParts p{};
  if (d <= 0.0) {
    p.sigma = a - 0.5 * a * e;
    const double d_a = 1.0 - 0.5 * e * (1.0 + a * d);
    p.d_beta = -a * a * d_a;
  } else {
    p.sigma = 0.5 * a * e;
    const double d_a = 0.5 * e * (1.0 - a * d);
    p.d_beta = -a * a * d_a;
  }
  p.d_sdf = -0.5 * a * a * e;
  return p;
}

}  // namespace

std::string_view op_name(OpKind op) {
  const auto i = static_cast<std::size_t>(op);
  if (i >= static_cast<std::size_t>(OpKind::kCount_)) return "unknown";
  return kOpNames[i];
}

const Matrix& Var::value() const {
  if (!tape_) throw Error("use of an empty Var");
  return tape_->node(id_).value;
}

const Matrix& Var::grad() const {
  if (!tape_) throw Error("use of an empty Var");
  return tape_->grad(*this);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ShapeError("scalar() on a " + dims(v) + " node");
  return v(0, 0);
}

Tape::Tape() : serial_(g_tape_serial.fetch_add(1)) {}

Var Tape::leaf(Matrix value) {
  if (!all_finite(value)) throw NonFiniteError("node", static_cast<std::int64_t>(nodes_.size()), "leaf");
  Node node;
  node.op = OpKind::kLeaf;
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

Var Tape::constant(Matrix value) {
  if (!all_finite(value)) throw NonFiniteError("node", static_cast<std::int64_t>(nodes_.size()), "constant");
  Node node;
  node.op = OpKind::kConstant;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

Var Tape::scalar_constant(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Var Tape::record(OpKind op, std::span<const Var> inputs, double a, double b, std::int64_t n,
                 std::int64_t m, std::vector<std::int64_t> indices) {
  if (static_cast<std::size_t>(op) >= static_cast<std::size_t>(OpKind::kCount_) ||
      op == OpKind::kLeaf || op == OpKind::kConstant) {
    throw Error("unsupported primitive (kind " + std::to_string(static_cast<int>(op)) + ")");
  }
  Node node;
  node.op = op;
  node.a = a;
  node.b = b;
  node.n = n;
  node.m = m;
  node.indices = std::move(indices);
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape_ != this) throw Error(std::string(op_name(op)) + ": input belongs to another tape");
    node.inputs.push_back(v.id_);
    node.requires_grad = node.requires_grad || nodes_[static_cast<std::size_t>(v.id_)].requires_grad;
  }
  node.value = compute(node);
  const auto id = static_cast<std::int32_t>(nodes_.size());
  if (!all_finite(node.value)) throw NonFiniteError("node", id, std::string(op_name(op)));
  nodes_.push_back(std::move(node));
  return Var(this, id);
}

Matrix Tape::compute(const Node& node) const {
  auto in = [&](std::size_t i) -> const Matrix& {
    if (i >= node.inputs.size()) shape_fail(node.op, "missing input");
    return nodes_[static_cast<std::size_t>(node.inputs[i])].value;
  };
  auto same_shape = [&](const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows() || x.cols() != y.cols()) shape_fail(node.op, dims(x) + " vs " + dims(y));
  };
  const OpKind op = node.op;
  switch (op) {
    case OpKind::kAdd:
      same_shape(in(0), in(1));
      return in(0) + in(1);
    case OpKind::kSub:
      same_shape(in(0), in(1));
      return in(0) - in(1);
    case OpKind::kMul:
      same_shape(in(0), in(1));
      return in(0).cwiseProduct(in(1));
    case OpKind::kMin: {
      same_shape(in(0), in(1));
      const Array x = in(0).array(), y = in(1).array();
      return (x <= y).select(x, y).matrix();
    }
    case OpKind::kMax: {
      same_shape(in(0), in(1));
      const Array x = in(0).array(), y = in(1).array();
      return (x >= y).select(x, y).matrix();
    }
    case OpKind::kNeg:
      return -in(0);
    case OpKind::kScale:
      return node.a * in(0);
    case OpKind::kAddScalar:
      return (in(0).array() + node.a).matrix();
    case OpKind::kSin:
      return in(0).array().sin().matrix();
    case OpKind::kCos:
      return in(0).array().cos().matrix();
    case OpKind::kExp:
      return in(0).array().exp().matrix();
    case OpKind::kLog:
      return in(0).array().log().matrix();
    case OpKind::kReciprocal:
      return in(0).array().inverse().matrix();
    case OpKind::kSqrt:
      return in(0).array().sqrt().matrix();
    case OpKind::kSquare:
      return in(0).array().square().matrix();
    case OpKind::kAbs:
      return in(0).array().abs().matrix();
    case OpKind::kRelu:
      return in(0).array().max(0.0).matrix();
    case OpKind::kSoftplus:
      return softplus_values(in(0).array(), node.a).matrix();
    case OpKind::kSigmoid:
      return sigmoid_values(in(0).array(), node.a).matrix();
    case OpKind::kMatMul:
      if (in(0).cols() != in(1).rows()) shape_fail(op, dims(in(0)) + " * " + dims(in(1)));
      return in(0) * in(1);
    case OpKind::kAffine: {
      const Matrix& x = in(0);
      const Matrix& w = in(1);
      const Matrix& bias = in(2);
      if (x.cols() != w.rows() || bias.rows() != 1 || bias.cols() != w.cols())
        shape_fail(op, dims(x) + " * " + dims(w) + " + " + dims(bias));
      Matrix out(x.rows(), w.cols());
      out.noalias() = x * w;
      out.rowwise() += bias.row(0);
      return out;
    }
    case OpKind::kBroadcast: {
      const Matrix& x = in(0);
      const auto r = static_cast<Eigen::Index>(node.n), c = static_cast<Eigen::Index>(node.m);
      if (x.rows() == 1 && x.cols() == 1) return Matrix::Constant(r, c, x(0, 0));
      if (x.rows() == 1 && x.cols() == c) return x.replicate(r, 1);
      if (x.cols() == 1 && x.rows() == r) return x.replicate(1, c);
      shape_fail(op, "cannot broadcast " + dims(x) + " to " + std::to_string(r) + "x" + std::to_string(c));
    }
    case OpKind::kSumAll: {
      Matrix out(1, 1);
      out(0, 0) = in(0).sum();
      return out;
    }
    case OpKind::kRowSum:
      return in(0).rowwise().sum();
    case OpKind::kColSum:
      return in(0).colwise().sum();
    case OpKind::kRowMin: {
      const Matrix& x = in(0);
      if (x.cols() < 1) shape_fail(op, "empty rows");
      Matrix out(x.rows(), 1);
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double best = x(i, 0);
        for (Eigen::Index j = 1; j < x.cols(); ++j) best = std::min(best, x(i, j));
        out(i, 0) = best;
      }
      return out;
    }
    case OpKind::kConcatCols: {
      Eigen::Index rows = in(0).rows(), cols = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        if (in(i).rows() != rows) shape_fail(op, "row mismatch");
        cols += in(i).cols();
      }
      Matrix out(rows, cols);
      Eigen::Index c = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        out.middleCols(c, in(i).cols()) = in(i);
        c += in(i).cols();
      }
      return out;
    }
    case OpKind::kSliceCols: {
      const Matrix& x = in(0);
      if (node.n < 0 || node.m < 0 || node.n + node.m > x.cols()) shape_fail(op, "range out of bounds");
      return x.middleCols(node.n, node.m);
    }
    case OpKind::kReshape: {
      const Matrix& x = in(0);
      if (node.n * node.m != x.size()) shape_fail(op, dims(x) + " to " + std::to_string(node.n) + "x" + std::to_string(node.m));
      return Eigen::Map<const Matrix>(x.data(), node.n, node.m);
    }
    case OpKind::kTileRows:
      if (node.n < 1) shape_fail(op, "times < 1");
      return in(0).replicate(node.n, 1);
    case OpKind::kSumTiles: {
      const Matrix& x = in(0);
      if (node.n < 1 || x.rows() % node.n != 0) shape_fail(op, "rows not divisible");
      const Eigen::Index r = x.rows() / node.n;
      Matrix out = x.topRows(r);
      for (std::int64_t k = 1; k < node.n; ++k) out += x.middleRows(k * r, r);
      return out;
    }
    case OpKind::kMulTiled: {
      const Matrix& x = in(0);
      const Matrix& y = in(1);
      if (x.cols() != y.cols() || x.rows() != y.rows() * node.n) shape_fail(op, dims(x) + " vs " + dims(y));
      const Eigen::Index r = y.rows();
      Matrix out(x.rows(), x.cols());
      for (std::int64_t k = 0; k < node.n; ++k)
        out.middleRows(k * r, r) = x.middleRows(k * r, r).cwiseProduct(y);
      return out;
    }
    case OpKind::kTileNorm: {
      const Matrix& x = in(0);
      if (node.n < 1 || x.rows() % node.n != 0) shape_fail(op, "rows not divisible");
      const Eigen::Index r = x.rows() / node.n;
      Matrix out = x.topRows(r).cwiseAbs2();
      for (std::int64_t k = 1; k < node.n; ++k) out += x.middleRows(k * r, r).cwiseAbs2();
      return out.cwiseSqrt();
    }
    case OpKind::kCumsumExclusive: {
      const Matrix& x = in(0);
      Matrix out(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
          out(i, j) = acc;
          acc += x(i, j);
        }
      }
      return out;
    }
    case OpKind::kSegmentWeightedSum: {
      const Matrix& w = in(0);
      const Matrix& v = in(1);
      const Eigen::Index rays = w.rows(), samples = w.cols();
      if (v.rows() != rays * samples) shape_fail(op, dims(w) + " vs " + dims(v));
      Matrix out(rays, v.cols());
      for (Eigen::Index r = 0; r < rays; ++r) {
        out.row(r).noalias() = w.row(r) * v.middleRows(r * samples, samples);
      }
      return out;
    }
    case OpKind::kGather: {
      const Matrix& x = in(0);
      const auto count = static_cast<Eigen::Index>(node.indices.size());
      if (node.n * node.m != count) shape_fail(op, "index count does not match output shape");
      Matrix out(node.n, node.m);
      double* dst = out.data();
      const double* src = x.data();
      for (Eigen::Index i = 0; i < count; ++i) {
        const auto k = node.indices[static_cast<std::size_t>(i)];
        if (k < 0 || k >= x.size()) shape_fail(op, "index out of range");
        dst[i] = src[k];
      }
      return out;
    }
    case OpKind::kLaplaceDensity: {
      const Matrix& d = in(0);
      const Matrix& beta = in(1);
      if (beta.rows() != 1 || beta.cols() != 1) shape_fail(op, "beta must be 1x1");
      if (!(beta(0, 0) > 0.0)) throw Error("laplace_density: beta must be positive");
      Matrix out(d.rows(), d.cols());
      for (Eigen::Index i = 0; i < d.size(); ++i) out.data()[i] = density_parts(d.data()[i], beta(0, 0)).sigma;
      return out;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      const Matrix& logits = in(0);
      if (static_cast<Eigen::Index>(node.indices.size()) != logits.rows()) shape_fail(op, "label count");
      const double cap = -std::log(node.a);
      Matrix out(logits.rows(), 1);
      for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const auto label = node.indices[static_cast<std::size_t>(r)];
        if (label < 0 || label >= logits.cols()) throw Error("softmax_cross_entropy: label out of range");
        const double mx = logits.row(r).maxCoeff();
        const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        out(r, 0) = std::min(lse - logits(r, label), cap);
      }
      return out;
    }
    case OpKind::kLeaf:
    case OpKind::kConstant:
    case OpKind::kCount_:
      break;
  }
  throw Error("unsupported primitive " + std::string(op_name(op)));
}

Matrix& Tape::grad_slot(std::int32_t id) { return grads_[static_cast<std::size_t>(id)]; }

void Tape::accumulate(std::int32_t id, Matrix g) {
  if (!nodes_[static_cast<std::size_t>(id)].requires_grad) return;
  Matrix& slot = grad_slot(id);
  if (slot.size() == 0) {
    slot = std::move(g);
  } else {
    slot += g;
  }
}

void Tape::backward(const Var& root) {
  if (root.tape_ != this) throw Error("backward: root belongs to another tape");
  const Matrix& v = root.value();
  if (v.rows() != 1 || v.cols() != 1) throw ShapeError("backward: root must be 1x1, got " + dims(v));
  backward(root, Matrix::Ones(1, 1));
}

void Tape::backward(const Var& root, const Matrix& seed) {
  if (root.tape_ != this) throw Error("backward: root belongs to another tape");
  const Matrix& v = root.value();
  if (seed.rows() != v.rows() || seed.cols() != v.cols()) throw ShapeError("backward: seed shape mismatch");
  grads_.assign(nodes_.size(), Matrix());
  if (!nodes_[static_cast<std::size_t>(root.id_)].requires_grad) return;
  grads_[static_cast<std::size_t>(root.id_)] = seed;
  for (std::int32_t id = root.id_; id >= 0; --id) {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.requires_grad || node.inputs.empty()) continue;
    if (grads_[static_cast<std::size_t>(id)].size() == 0) continue;
    backprop_node(id);
    // Interior gradients are not needed once propagated; leaves keep theirs.
    grads_[static_cast<std::size_t>(id)] = Matrix();
  }
}

const Matrix& Tape::grad(const Var& v) const {
  static const Matrix kEmpty;
  if (v.tape_ != this) throw Error("grad: variable belongs to another tape");
  if (grads_.size() <= static_cast<std::size_t>(v.id_)) return kEmpty;
  return grads_[static_cast<std::size_t>(v.id_)];
}

void Tape::set_backward_fault(OpKind op, double scale) {
  fault_op_ = op;
  fault_scale_ = scale;
}

void Tape::backprop_node(std::int32_t id) {
  const Node& node = nodes_[static_cast<std::size_t>(id)];
  // The node's own gradient is consumed here; backward() drops it anyway.
  Matrix g = std::move(grads_[static_cast<std::size_t>(id)]);
  if (node.op == fault_op_) g *= fault_scale_;
  auto in_id = [&](std::size_t i) { return node.inputs[i]; };
  auto in = [&](std::size_t i) -> const Matrix& { return nodes_[static_cast<std::size_t>(node.inputs[i])].value; };
  auto needs = [&](std::size_t i) { return nodes_[static_cast<std::size_t>(node.inputs[i])].requires_grad; };
  const Matrix& out = node.value;

  switch (node.op) {
    case OpKind::kAdd:
      if (needs(0)) accumulate(in_id(0), g);
      if (needs(1)) accumulate(in_id(1), g);
      break;
    case OpKind::kSub:
      if (needs(0)) accumulate(in_id(0), g);
      if (needs(1)) accumulate(in_id(1), -g);
      break;
    case OpKind::kMul:
      if (needs(0)) accumulate(in_id(0), g.cwiseProduct(in(1)));
      if (needs(1)) accumulate(in_id(1), g.cwiseProduct(in(0)));
      break;
    case OpKind::kMin:
    case OpKind::kMax: {
      const Array x = in(0).array(), y = in(1).array();
      const auto first = (node.op == OpKind::kMin) ? (x <= y).eval() : (x >= y).eval();
      if (needs(0)) accumulate(in_id(0), first.select(g.array(), 0.0).matrix());
      if (needs(1)) accumulate(in_id(1), first.select(0.0, g.array()).matrix());
      break;
    }
    case OpKind::kNeg:
      accumulate(in_id(0), -g);
      break;
    case OpKind::kScale:
      accumulate(in_id(0), node.a * g);
      break;
    case OpKind::kAddScalar:
      accumulate(in_id(0), g);
      break;
    case OpKind::kSin:
      accumulate(in_id(0), (g.array() * in(0).array().cos()).matrix());
      break;
    case OpKind::kCos:
      accumulate(in_id(0), (-g.array() * in(0).array().sin()).matrix());
      break;
    case OpKind::kExp:
      accumulate(in_id(0), g.cwiseProduct(out));
      break;
    case OpKind::kLog:
      accumulate(in_id(0), (g.array() / in(0).array()).matrix());
      break;
    case OpKind::kReciprocal:
      accumulate(in_id(0), (-g.array() * out.array().square()).matrix());
      break;
    case OpKind::kSqrt:
      accumulate(in_id(0), (0.5 * g.array() / out.array()).matrix());
      break;
    case OpKind::kSquare:
      accumulate(in_id(0), (2.0 * g.array() * in(0).array()).matrix());
      break;
    case OpKind::kAbs:
      accumulate(in_id(0), (g.array() * in(0).array().sign()).matrix());
      break;
    case OpKind::kRelu:
      accumulate(in_id(0), (in(0).array() > 0.0).select(g.array(), 0.0).matrix());
      break;
    case OpKind::kSoftplus:
      accumulate(in_id(0), (g.array() * sigmoid_values(in(0).array(), node.a)).matrix());
      break;
    case OpKind::kSigmoid:
      accumulate(in_id(0), (node.a * g.array() * out.array() * (1.0 - out.array())).matrix());
      break;
    case OpKind::kMatMul:
      if (needs(0)) {
        Matrix gx(in(0).rows(), in(0).cols());
        gx.noalias() = g * in(1).transpose();
        accumulate(in_id(0), gx);
      }
      if (needs(1)) {
        Matrix gw(in(1).rows(), in(1).cols());
        gw.noalias() = in(0).transpose() * g;
        accumulate(in_id(1), gw);
      }
      break;
    case OpKind::kAffine:
      if (needs(0)) {
        Matrix gx(in(0).rows(), in(0).cols());
        gx.noalias() = g * in(1).transpose();
        accumulate(in_id(0), gx);
      }
      if (needs(1)) {
        Matrix gw(in(1).rows(), in(1).cols());
        gw.noalias() = in(0).transpose() * g;
        accumulate(in_id(1), gw);
      }
      if (needs(2)) accumulate(in_id(2), g.colwise().sum());
      break;
    case OpKind::kBroadcast: {
      const Matrix& x = in(0);
      if (x.rows() == 1 && x.cols() == 1) {
        accumulate(in_id(0), Matrix::Constant(1, 1, g.sum()));
      } else if (x.rows() == 1) {
        accumulate(in_id(0), g.colwise().sum());
      } else {
        accumulate(in_id(0), g.rowwise().sum());
      }
      break;
    }
    case OpKind::kSumAll:
      accumulate(in_id(0), Matrix::Constant(in(0).rows(), in(0).cols(), g(0, 0)));
      break;
    case OpKind::kRowSum:
      accumulate(in_id(0), g.replicate(1, in(0).cols()));
      break;
    case OpKind::kColSum:
      accumulate(in_id(0), g.replicate(in(0).rows(), 1));
      break;
    case OpKind::kRowMin: {
      const Matrix& x = in(0);
      Matrix gx = Matrix::Zero(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < x.cols(); ++j)
          if (x(i, j) < x(i, best)) best = j;
        gx(i, best) = g(i, 0);
      }
      accumulate(in_id(0), gx);
      break;
    }
    case OpKind::kConcatCols: {
      Eigen::Index c = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        const Eigen::Index w = in(i).cols();
        if (needs(i)) accumulate(in_id(i), g.middleCols(c, w));
        c += w;
      }
      break;
    }
    case OpKind::kSliceCols: {
      Matrix gx = Matrix::Zero(in(0).rows(), in(0).cols());
      gx.middleCols(node.n, node.m) = g;
      accumulate(in_id(0), gx);
      break;
    }
    case OpKind::kReshape:
      accumulate(in_id(0), Eigen::Map<const Matrix>(g.data(), in(0).rows(), in(0).cols()));
      break;
    case OpKind::kTileRows: {
      const Eigen::Index r = in(0).rows();
      Matrix gx = g.topRows(r);
      for (std::int64_t k = 1; k < node.n; ++k) gx += g.middleRows(k * r, r);
      accumulate(in_id(0), gx);
      break;
    }
    case OpKind::kSumTiles:
      accumulate(in_id(0), g.replicate(node.n, 1));
      break;
    case OpKind::kMulTiled: {
      const Matrix& x = in(0);
      const Matrix& y = in(1);
      const Eigen::Index r = y.rows();
      if (needs(0)) {
        Matrix gx(x.rows(), x.cols());
        for (std::int64_t k = 0; k < node.n; ++k) gx.middleRows(k * r, r) = g.middleRows(k * r, r).cwiseProduct(y);
        accumulate(in_id(0), gx);
      }
      if (needs(1)) {
        Matrix gy = g.topRows(r).cwiseProduct(x.topRows(r));
        for (std::int64_t k = 1; k < node.n; ++k) gy += g.middleRows(k * r, r).cwiseProduct(x.middleRows(k * r, r));
        accumulate(in_id(1), gy);
      }
      break;
    }
    case OpKind::kTileNorm: {
      const Matrix& x = in(0);
      const Eigen::Index r = out.rows();
      const Array scale = (out.array() > 0.0).select(g.array() / out.array(), 0.0);
      Matrix gx(x.rows(), x.cols());
      for (std::int64_t k = 0; k < node.n; ++k)
        gx.middleRows(k * r, r) = (x.middleRows(k * r, r).array() * scale).matrix();
      accumulate(in_id(0), gx);
      break;
    }
    case OpKind::kCumsumExclusive: {
      Matrix gx(g.rows(), g.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        double acc = 0.0;
        for (Eigen::Index j = g.cols() - 1; j >= 0; --j) {
          gx(i, j) = acc;
          acc += g(i, j);
        }
      }
      accumulate(in_id(0), gx);
      break;
    }
    case OpKind::kSegmentWeightedSum: {
      const Matrix& w = in(0);
      const Matrix& v = in(1);
      const Eigen::Index samples = w.cols();
      if (needs(0)) {
        Matrix gw(w.rows(), w.cols());
        for (Eigen::Index r = 0; r < w.rows(); ++r)
          gw.row(r).noalias() = g.row(r) * v.middleRows(r * samples, samples).transpose();
        accumulate(in_id(0), gw);
      }
      if (needs(1)) {
        Matrix gv(v.rows(), v.cols());
        for (Eigen::Index r = 0; r < w.rows(); ++r)
          gv.middleRows(r * samples, samples).noalias() = w.row(r).transpose() * g.row(r);
        accumulate(in_id(1), gv);
      }
      break;
    }
    case OpKind::kGather: {
      Matrix gx = Matrix::Zero(in(0).rows(), in(0).cols());
      for (std::size_t i = 0; i < node.indices.size(); ++i) gx.data()[node.indices[i]] += g.data()[i];
      accumulate(in_id(0), gx);
      break;
    }
    case OpKind::kLaplaceDensity: {
      const Matrix& d = in(0);
      const double beta = in(1)(0, 0);
      Matrix gd(d.rows(), d.cols());
      double gbeta = 0.0;
      for (Eigen::Index i = 0; i < d.size(); ++i) {
        const DensityParts p = density_parts(d.data()[i], beta);
        gd.data()[i] = g.data()[i] * p.d_sdf;
        gbeta += g.data()[i] * p.d_beta;
      }
      if (needs(0)) accumulate(in_id(0), gd);
      if (needs(1)) accumulate(in_id(1), Matrix::Constant(1, 1, gbeta));
      break;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      const Matrix& logits = in(0);
      const double cap = -std::log(node.a);
      Matrix gx(logits.rows(), logits.cols());
      for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        if (out(r, 0) >= cap) {
          gx.row(r).setZero();
          continue;
        }
        const double mx = logits.row(r).maxCoeff();
        Eigen::RowVectorXd p = (logits.row(r).array() - mx).exp().matrix();
        p /= p.sum();
        p(node.indices[static_cast<std::size_t>(r)]) -= 1.0;
        gx.row(r) = g(r, 0) * p;
      }
      accumulate(in_id(0), gx);
      break;
    }
    case OpKind::kLeaf:
    case OpKind::kConstant:
    case OpKind::kCount_:
      break;
  }
}

bool Tape::replay_matches() const {
  for (const Node& node : nodes_) {
    if (node.op == OpKind::kLeaf || node.op == OpKind::kConstant) continue;
    const Matrix again = compute(node);
    if (again.rows() != node.value.rows() || again.cols() != node.value.cols()) return false;
    if (std::memcmp(again.data(), node.value.data(), sizeof(double) * static_cast<std::size_t>(again.size())) != 0)
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Op helpers

namespace {
Tape& tape_of(const Var& v) {
  if (!v.valid()) throw Error("use of an empty Var");
  return *v.tape();
}
Var unary(OpKind op, const Var& a, double p = 0.0) {
  const Var in[] = {a};
  return tape_of(a).record(op, in, p);
}
Var binary(OpKind op, const Var& a, const Var& b) {
  const Var in[] = {a, b};
  return tape_of(a).record(op, in);
}
}  // namespace

Var operator+(const Var& a, const Var& b) { return binary(OpKind::kAdd, a, b); }
Var operator-(const Var& a, const Var& b) { return binary(OpKind::kSub, a, b); }
Var operator*(const Var& a, const Var& b) { return binary(OpKind::kMul, a, b); }
Var operator-(const Var& a) { return unary(OpKind::kNeg, a); }
Var operator*(double s, const Var& a) { return unary(OpKind::kScale, a, s); }
Var operator+(const Var& a, double s) { return unary(OpKind::kAddScalar, a, s); }
Var operator-(double s, const Var& a) { return -a + s; }
Var min(const Var& a, const Var& b) { return binary(OpKind::kMin, a, b); }
Var max(const Var& a, const Var& b) { return binary(OpKind::kMax, a, b); }

Var sin(const Var& a) { return unary(OpKind::kSin, a); }
Var cos(const Var& a) { return unary(OpKind::kCos, a); }
Var exp(const Var& a) { return unary(OpKind::kExp, a); }
Var log(const Var& a) { return unary(OpKind::kLog, a); }
Var reciprocal(const Var& a) { return unary(OpKind::kReciprocal, a); }
Var sqrt(const Var& a) { return unary(OpKind::kSqrt, a); }
Var square(const Var& a) { return unary(OpKind::kSquare, a); }
Var abs(const Var& a) { return unary(OpKind::kAbs, a); }
Var relu(const Var& a) { return unary(OpKind::kRelu, a); }
Var softplus(const Var& a, double sharpness) { return unary(OpKind::kSoftplus, a, sharpness); }
Var sigmoid(const Var& a, double scale) { return unary(OpKind::kSigmoid, a, scale); }

Var matmul(const Var& a, const Var& b) { return binary(OpKind::kMatMul, a, b); }

Var affine(const Var& x, const Var& w, const Var& bias) {
  const Var in[] = {x, w, bias};
  return tape_of(x).record(OpKind::kAffine, in);
}

Var broadcast(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  const Var in[] = {a};
  return tape_of(a).record(OpKind::kBroadcast, in, 0.0, 0.0, rows, cols);
}

Var sum(const Var& a) { return unary(OpKind::kSumAll, a); }
Var mean(const Var& a) { return (1.0 / static_cast<double>(a.value().size())) * sum(a); }
Var row_sum(const Var& a) { return unary(OpKind::kRowSum, a); }
Var col_sum(const Var& a) { return unary(OpKind::kColSum, a); }
Var row_min(const Var& a) { return unary(OpKind::kRowMin, a); }

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  return tape_of(parts.front()).record(OpKind::kConcatCols, parts);
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  const Var in[] = {a};
  return tape_of(a).record(OpKind::kSliceCols, in, 0.0, 0.0, start, count);
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  const Var in[] = {a};
  return tape_of(a).record(OpKind::kReshape, in, 0.0, 0.0, rows, cols);
}

Var tile_rows(const Var& a, int times) {
  const Var in[] = {a};
  return tape_of(a).record(OpKind::kTileRows, in, 0.0, 0.0, times);
}

Var sum_tiles(const Var& a, int times) {
  const Var in[] = {a};
  return tape_of(a).record(OpKind::kSumTiles, in, 0.0, 0.0, times);
}

Var mul_tiled(const Var& x, const Var& y, int times) {
  const Var in[] = {x, y};
  return tape_of(x).record(OpKind::kMulTiled, in, 0.0, 0.0, times);
}

Var tile_norm(const Var& x, int times) {
  const Var in[] = {x};
  return tape_of(x).record(OpKind::kTileNorm, in, 0.0, 0.0, times);
}

Var cumsum_exclusive(const Var& a) { return unary(OpKind::kCumsumExclusive, a); }

Var segment_weighted_sum(const Var& weights, const Var& values) {
  return binary(OpKind::kSegmentWeightedSum, weights, values);
}

Var gather(const Var& a, std::vector<std::int64_t> flat_index, Eigen::Index rows, Eigen::Index cols) {
  const Var in[] = {a};
  return tape_of(a).record(OpKind::kGather, in, 0.0, 0.0, rows, cols, std::move(flat_index));
}

Var laplace_density(const Var& sdf, const Var& beta) { return binary(OpKind::kLaplaceDensity, sdf, beta); }

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels, double floor) {
  const Var in[] = {logits};
  std::vector<std::int64_t> idx(labels.begin(), labels.end());
  return tape_of(logits).record(OpKind::kSoftmaxCrossEntropy, in, floor, 0.0, 0, 0, std::move(idx));
}

}  // namespace objsdf::ad
