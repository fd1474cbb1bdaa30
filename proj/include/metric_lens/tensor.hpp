#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metric_lens/error.hpp"

namespace mlens {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline constexpr std::size_t kMaxRank = 4;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMatrixX =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

/// Dense row-major array of up to four axes (last axis fastest).
///
/// Storage is a contiguous Eigen vector so every tensor can be viewed as a
/// matrix or vector without copying. Constructors validate the shape and
/// reject non-finite data.
template <typename Scalar>
class BasicTensor {
 public:
  using Storage = VectorX<Scalar>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_ = Storage::Zero(shape_product(shape_));
  }

  BasicTensor(Shape shape, Storage data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_product(shape_)) {
      throw Error(ErrorCode::kShapeMismatch,
                  "data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape_to_string(shape_));
    }
    ensure_finite();
  }

  BasicTensor(Shape shape, std::initializer_list<Scalar> values)
      : BasicTensor(std::move(shape),
                    Eigen::Map<const Storage>(values.begin(),
                                              static_cast<Index>(values.size()))) {}

  static BasicTensor constant(Shape shape, Scalar value) {
    BasicTensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  const Storage& values() const { return data_; }
  Storage& values() { return data_; }
  std::span<const Scalar> span() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  Scalar operator[](Index flat) const { return data_[flat]; }
  Scalar& operator[](Index flat) { return data_[flat]; }

  template <typename... Ix>
  Scalar operator()(Ix... ix) const {
    return data_[offset(ix...)];
  }
  template <typename... Ix>
  Scalar& operator()(Ix... ix) {
    return data_[offset(ix...)];
  }

  template <typename... Ix>
  Index offset(Ix... ix) const {
    static_assert(sizeof...(Ix) >= 1 && sizeof...(Ix) <= kMaxRank);
    const Index idx[] = {static_cast<Index>(ix)...};
    Index flat = 0;
    for (std::size_t a = 0; a < sizeof...(Ix); ++a) {
      flat = flat * shape_[a] + idx[a];
    }
    return flat;
  }

  /// Rank-2 tensor as a row-major matrix view.
  Eigen::Map<const RowMatrixX<Scalar>> matrix() const {
    return {data_.data(), shape_.at(0), shape_.at(1)};
  }
  Eigen::Map<RowMatrixX<Scalar>> matrix() {
    return {data_.data(), shape_.at(0), shape_.at(1)};
  }

  /// Views the tensor as [rows, size/rows]; used for per-position slicing.
  Eigen::Map<const RowMatrixX<Scalar>> as_rows(Index rows) const {
    return {data_.data(), rows, data_.size() / rows};
  }

  BasicTensor reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  template <typename Other>
  BasicTensor<Other> cast() const {
    return BasicTensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

  void ensure_finite() const {
    if (!data_.allFinite()) {
      throw Error(ErrorCode::kNonFinite,
                  "tensor of shape " + shape_to_string(shape_) +
                      " contains NaN or Inf");
    }
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    if (shape_.empty() || shape_.size() > kMaxRank) {
      throw Error(ErrorCode::kShapeMismatch,
                  "tensor rank must be in 1..4, got " +
                      std::to_string(shape_.size()));
    }
    for (Index d : shape_) {
      if (d <= 0) {
        throw Error(ErrorCode::kShapeMismatch,
                    "tensor extents must be positive: " + shape_to_string(shape_));
      }
    }
  }

  Shape shape_;
  Storage data_;
};

using Tensor = BasicTensor<float>;

inline std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Numeric utilities shared by every module.

/// L2 norm accumulated in double.
template <typename Derived>
double l2_norm(const Eigen::MatrixBase<Derived>& v) {
  return v.template cast<double>().norm();
}

template <typename Scalar>
double l2_norm(const BasicTensor<Scalar>& t) {
  return l2_norm(t.values());
}

/// Inner product accumulated in double.
template <typename DerivedA, typename DerivedB>
double inner(const Eigen::MatrixBase<DerivedA>& a,
             const Eigen::MatrixBase<DerivedB>& b) {
  return a.template cast<double>().dot(b.template cast<double>());
}

template <typename Scalar>
double inner(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kShapeMismatch, "inner product of " +
                                               shape_to_string(a.shape()) +
                                               " and " + shape_to_string(b.shape()));
  }
  return inner(a.values(), b.values());
}

/// Corner-aligned source coordinate for output index `dst`.
inline double corner_aligned_source(Index dst, Index in, Index out) {
  if (out <= 1) return 0.0;
  return static_cast<double>(dst) * static_cast<double>(in - 1) /
         static_cast<double>(out - 1);
}

/// Inverse of the corner-aligned mapping: nearest source cell for a pixel.
inline Index nearest_source_cell(Index pixel, Index in, Index out) {
  if (in <= 1 || out <= 1) return 0;
  const double src = corner_aligned_source(pixel, in, out);
  return std::clamp<Index>(static_cast<Index>(std::lround(src)), 0, in - 1);
}

/// Bilinear weights of a fractional coordinate along one axis.
struct LerpTap {
  Index lo = 0;
  Index hi = 0;
  double frac = 0.0;
};

inline LerpTap lerp_tap(double src, Index in) {
  LerpTap tap;
  tap.lo = std::clamp<Index>(static_cast<Index>(std::floor(src)), 0, in - 1);
  tap.hi = std::min<Index>(tap.lo + 1, in - 1);
  tap.frac = std::clamp(src - static_cast<double>(tap.lo), 0.0, 1.0);
  return tap;
}

/// Bilinear resampling of a rank-2 map with corner-aligned sampling:
/// src = dst * (in - 1) / (out - 1), and src = 0 when out == 1.
template <typename Scalar>
BasicTensor<Scalar> bilinear_resize(const BasicTensor<Scalar>& map, Index out_h,
                                    Index out_w) {
  if (map.empty() || map.rank() != 2) {
    throw Error(ErrorCode::kEmptyInput, "bilinear_resize expects a rank-2 map");
  }
  if (out_h < 1 || out_w < 1) {
    throw Error(ErrorCode::kEmptyInput, "bilinear_resize output must be >= 1x1");
  }
  const Index in_h = map.dim(0);
  const Index in_w = map.dim(1);
  if (in_h == out_h && in_w == out_w) return map;

  std::vector<LerpTap> cols(static_cast<std::size_t>(out_w));
  for (Index x = 0; x < out_w; ++x) {
    cols[static_cast<std::size_t>(x)] =
        lerp_tap(corner_aligned_source(x, in_w, out_w), in_w);
  }
  BasicTensor<Scalar> out(Shape{out_h, out_w});
  const auto src = map.matrix();
  auto dst = out.matrix();
  for (Index y = 0; y < out_h; ++y) {
    const LerpTap r = lerp_tap(corner_aligned_source(y, in_h, out_h), in_h);
    for (Index x = 0; x < out_w; ++x) {
      const LerpTap& c = cols[static_cast<std::size_t>(x)];
      const double top = (1.0 - c.frac) * src(r.lo, c.lo) + c.frac * src(r.lo, c.hi);
      const double bot = (1.0 - c.frac) * src(r.hi, c.lo) + c.frac * src(r.hi, c.hi);
      double v = (1.0 - r.frac) * top + r.frac * bot;
      // Keep results inside the corner samples' hull despite rounding.
      const double lo = std::min({src(r.lo, c.lo), src(r.lo, c.hi), src(r.hi, c.lo),
                                  src(r.hi, c.hi)});
      const double hi = std::max({src(r.lo, c.lo), src(r.lo, c.hi), src(r.hi, c.lo),
                                  src(r.hi, c.hi)});
      dst(y, x) = static_cast<Scalar>(std::clamp(v, lo, hi));
    }
  }
  return out;
}

}  // namespace mlens
