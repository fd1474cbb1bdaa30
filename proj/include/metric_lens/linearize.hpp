#pragma once

#include <cstdint>
#include <filesystem>

#include "metric_lens/nn.hpp"
#include "metric_lens/tensor.hpp"

namespace mlens {

/// One-hot-per-channel indicator of each channel's maximum (first in
/// row-major order on ties).
struct MaxMask {
  Tensor mask;  // [m,n,p] of {0,1}
};

/// Active units of a ReLU at the operating point; exactly-zero inputs are inactive.
struct ReluMask {
  Tensor mask;  // same shape as the pre-activation, {0,1}
};

enum class HeadReducer { kGlobalAvgPool, kGlobalMaxPool, kFlatten };

/// All layers after the last convolution folded into one affine map that is
/// exact at the operating point: E = sum_{i,j} W_{i,j} A_{i,j} + B.
struct LinearizedHead {
  Tensor W;  // [m,n,l,p]; block (i,j) is a contiguous row-major l x p matrix
  Tensor B;  // [l]
  std::uint64_t operating_point_hash = 0;
  HeadReducer reducer = HeadReducer::kFlatten;

  Index rows() const { return W.dim(0); }
  Index cols() const { return W.dim(1); }
  Index positions() const { return rows() * cols(); }
  Index embedding_length() const { return W.dim(2); }
  Index channels() const { return W.dim(3); }
  Shape feature_shape() const { return {rows(), cols(), channels()}; }

  Eigen::Map<const RowMatrixX<float>> block(Index i, Index j) const;

  /// Per-position contributions W_{i,j} A_{i,j} as rows of an [mn, l] matrix.
  MatrixX<double> contributions(const Tensor& A) const;
  /// sum_{i,j} W_{i,j} A_{i,j} + B.
  VectorX<double> apply(const Tensor& A) const;
  /// True when `A` is the feature map the masks were computed from.
  bool bound_to(const Tensor& A) const;
};

std::uint64_t operating_point_hash(const Tensor& A);

/// GAP as a [p, m, n, p] matrix: entry (k', i, j, k) = 1/(mn) when k' == k.
///
/// The 1/(mn) factor is rounded to Scalar once, which is also how the
/// forward engine's average pooling applies it, so contracting this matrix
/// with a flattened feature reproduces GAP bit for bit.
template <typename Scalar = float>
BasicTensor<Scalar> gap_matrix(Index m, Index n, Index p) {
  if (m < 1 || n < 1 || p < 1) {
    throw Error(ErrorCode::kShapeMismatch, "gap_matrix needs m, n, p >= 1");
  }
  const auto inv = static_cast<Scalar>(1.0 / static_cast<double>(m * n));
  BasicTensor<Scalar> t(Shape{p, m, n, p});
  for (Index k = 0; k < p; ++k) {
    for (Index i = 0; i < m; ++i) {
      for (Index j = 0; j < n; ++j) t(k, i, j, k) = inv;
    }
  }
  return t;
}

MaxMask gmp_mask(const Tensor& A);

/// mn * (T_GAP (.) M): the [p, m, n, p] matrix selecting each channel's maximum.
Tensor gmp_matrix(const MaxMask& mask);

ReluMask relu_mask(const Tensor& pre_activation);

/// Contracts a [p', m, n, p] pooling matrix with A (flattened), in double.
VectorX<double> apply_pooling_matrix(const Tensor& T, const Tensor& A);

/// Folds the head of `model` into (W, B) at the operating point recorded in
/// `trace`. Masks for GMP and ReLU come from the trace's layer outputs. A
/// trailing l2_normalize is left out: W and B describe E before normalization.
LinearizedHead linearize_head(const ModelManifest& model, const ForwardTrace& trace);

/// Same, starting from a conv feature map instead of a full trace.
LinearizedHead linearize_head(const ModelManifest& model, const Tensor& A);

/// Writes W.tnsr and B.tnsr into `dir`.
void save_linearized_head(const LinearizedHead& head, const std::filesystem::path& dir);

}  // namespace mlens
