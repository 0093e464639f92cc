#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "objsdf/common/types.h"

namespace objsdf::ad {

using objsdf::Matrix;

/// Primitive operations a tape can record. Every node of a tape is one of
/// these; anything else is rejected when the node is recorded.
enum class OpKind : std::uint8_t {
  kLeaf,       // differentiable input
  kConstant,   // non-differentiable input
  kAdd,
  kSub,
  kMul,
  kMin,  // elementwise, ties go to the first argument
  kMax,  // elementwise, ties go to the first argument
  kNeg,
  kScale,
  kAddScalar,
  kSin,
  kCos,
  kExp,
  kLog,
  kReciprocal,
  kSqrt,
  kSquare,
  kAbs,
  kRelu,
  kSoftplus,
  kSigmoid,
  kMatMul,
  kAffine,
  kBroadcast,
  kSumAll,
  kRowSum,
  kColSum,
  kRowMin,  // min over columns, ties go to the lowest column
  kConcatCols,
  kSliceCols,
  kReshape,
  kTileRows,
  kSumTiles,
  kMulTiled,
  kTileNorm,
  kCumsumExclusive,
  kSegmentWeightedSum,
  kGather,
  kLaplaceDensity,
  kSoftmaxCrossEntropy,
  kCount_
};

std::string_view op_name(OpKind op);

class Tape;

/// Handle to one node of a tape.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::int32_t id() const { return id_; }

  const Matrix& value() const;
  /// Gradient of the last backward() root with respect to this node.
  /// Empty (0x0) when no gradient reached the node.
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::int32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::int32_t id_ = -1;
};

struct Node {
  OpKind op = OpKind::kConstant;
  std::vector<std::int32_t> inputs;
  Matrix value;
  double a = 0.0;
  double b = 0.0;
  std::int64_t n = 0;
  std::int64_t m = 0;
  std::vector<std::int64_t> indices;
  bool requires_grad = false;
};

/// Define-by-run record of primitive operations over dense row-major
/// matrices. Nodes only reference earlier nodes, so a reverse sweep over
/// the node list is a valid backward pass. Single writer.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t serial() const { return serial_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::int32_t id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  Var leaf(Matrix value);
  Var constant(Matrix value);
  Var scalar_constant(double v);

  /// Generic entry point used by all op helpers. Validates the op kind and
  /// input shapes, computes the forward value and checks it is finite.
  Var record(OpKind op, std::span<const Var> inputs, double a = 0.0, double b = 0.0,
             std::int64_t n = 0, std::int64_t m = 0, std::vector<std::int64_t> indices = {});

  /// Reverse sweep from a 1x1 root seeded with 1.
  void backward(const Var& root);
  /// Reverse sweep from an arbitrary root with an explicit seed gradient.
  void backward(const Var& root, const Matrix& seed);

  const Matrix& grad(const Var& v) const;

  /// Recomputes every non-input node from its record and returns true when
  /// all cached values are reproduced bit for bit.
  bool replay_matches() const;

  /// Test hook: multiplies every gradient contribution emitted by `op` by
  /// `scale` during backward. Used as a negative control for gradient checks.
  void set_backward_fault(OpKind op, double scale);

 private:
  Matrix compute(const Node& node) const;
  void backprop_node(std::int32_t id);
  void accumulate(std::int32_t id, Matrix g);
  Matrix& grad_slot(std::int32_t id);

  std::uint64_t serial_;
  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
  OpKind fault_op_ = OpKind::kCount_;
  double fault_scale_ = 1.0;
};

// Elementwise arithmetic (same shapes).
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator*(double s, const Var& a);
Var operator+(const Var& a, double s);
Var operator-(double s, const Var& a);
Var min(const Var& a, const Var& b);
Var max(const Var& a, const Var& b);

Var sin(const Var& a);
Var cos(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var reciprocal(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);
Var relu(const Var& a);
/// log(1 + exp(sharpness * x)) / sharpness
Var softplus(const Var& a, double sharpness = 1.0);
/// 1 / (1 + exp(-scale * x))
Var sigmoid(const Var& a, double scale = 1.0);

Var matmul(const Var& a, const Var& b);
/// x * w + bias, bias is 1 x out and broadcast over rows.
Var affine(const Var& x, const Var& w, const Var& bias);
/// Broadcasts a 1x1, 1xC or Rx1 node to rows x cols.
Var broadcast(const Var& a, Eigen::Index rows, Eigen::Index cols);

Var sum(const Var& a);
Var mean(const Var& a);
Var row_sum(const Var& a);
Var col_sum(const Var& a);
Var row_min(const Var& a);

Var concat_cols(std::span<const Var> parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);

/// Stacks `times` copies of a vertically.
Var tile_rows(const Var& a, int times);
/// Inverse of tile_rows' layout: sums the `times` vertical blocks.
Var sum_tiles(const Var& a, int times);
/// x (times*n x m) times tile_rows(y, times), without materialising the tile.
Var mul_tiled(const Var& x, const Var& y, int times);
/// Euclidean norm across the `times` vertical blocks: n x m result.
/// The gradient at a zero norm is taken as zero.
Var tile_norm(const Var& x, int times);

/// Per-row exclusive prefix sum along columns.
Var cumsum_exclusive(const Var& a);
/// weights (R x S), values (R*S x C) -> R x C with out(r) = sum_j w(r,j) values(r*S+j).
Var segment_weighted_sum(const Var& weights, const Var& values);
/// out.data[i] = a.data[flat_index[i]] with the given output shape.
Var gather(const Var& a, std::vector<std::int64_t> flat_index, Eigen::Index rows, Eigen::Index cols);

/// Laplace-CDF density of a signed distance, high inside:
/// (1/beta)(1 - exp(d/beta)/2) for d <= 0, exp(-d/beta)/(2 beta) for d > 0.
/// `beta` is a 1x1 node.
Var laplace_density(const Var& sdf, const Var& beta);

/// Per-row cross entropy of softmax(logits) against integer labels:
/// -log(max(softmax(logits)[label], floor)). Returns R x 1; rows whose
/// probability is clamped contribute no gradient.
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels, double floor = 1e-12);

}  // namespace objsdf::ad
