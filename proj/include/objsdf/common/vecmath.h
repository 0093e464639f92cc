#pragma once

#include <algorithm>
#include <cstddef>

#include <Eigen/Core>

namespace objsdf {

using RowArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

constexpr std::size_t kVecBlock = 512;
using Block = Eigen::Array<double, static_cast<int>(kVecBlock), 1>;

// Applies `f` (Block -> Block) over `n` values in cache sized pieces. The
// tail is padded with zeros so every element takes the same code path.
template <class F>
void blocked_map(const double* in, double* out, std::size_t n, F&& f) {
  Block buf;
  for (std::size_t b = 0; b < n; b += kVecBlock) {
    const std::size_t m = std::min(kVecBlock, n - b);
    if (m == kVecBlock) {
      Eigen::Map<Block>(out + b) = f(Eigen::Map<const Block>(in + b));
    } else {
      buf.setZero();
      std::copy(in + b, in + b + m, buf.data());
      const Block r = f(buf);
      std::copy(r.data(), r.data() + m, out + b);
    }
  }
}

}  // namespace detail

/// log1p via the u = 1 + e correction, which vectorizes where log1p does not.
template <class D>
auto log1p_fast(const Eigen::ArrayBase<D>& e) {
  using Plain = typename D::PlainObject;
  const Plain ev = e;
  const Plain u = 1.0 + ev;
  const Plain um1 = u - 1.0;
  return Plain((um1 == 0.0).select(ev, u.log() * (ev / um1)));
}

/// log(1 + exp(s x)) / s without overflow.
inline RowArray softplus_array(const RowArray& x, double s) {
  RowArray out(x.rows(), x.cols());
  detail::blocked_map(x.data(), out.data(), static_cast<std::size_t>(x.size()), [s](const auto& xb) {
    const detail::Block t = s * xb;
    return detail::Block((t.max(0.0) + log1p_fast((-t.abs()).exp())) / s);
  });
  return out;
}

/// True when no entry is NaN or infinite (x * 0 is NaN exactly for those).
template <class D>
bool all_finite(const Eigen::DenseBase<D>& m) {
  return (m.derived().array() * 0.0).sum() == 0.0;
}

}  // namespace objsdf
