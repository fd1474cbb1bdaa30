#pragma once

#include <optional>
#include <string_view>

#include "metric_lens/linearize.hpp"
#include "metric_lens/tensor.hpp"

namespace mlens {

enum class Side { kQuery, kRef };

enum class MapVariant {
  kCam,
  kOverallDecomp,
  kOverallDecompBias,
  kPointSpecific,
  kGradCam,
  kGradCamNoNorm,
};

std::string_view to_string(MapVariant variant);
MapVariant map_variant_from_string(std::string_view name);
std::string_view to_string(Side side);
Side side_from_string(std::string_view name);

/// A (row, col) position on a feature grid.
struct Cell {
  Index row = 0;
  Index col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// Signed heatmap. Negative evidence is kept; consumers clip explicitly.
struct ActivationMap {
  Tensor values;  // rank 2
  MapVariant variant = MapVariant::kOverallDecomp;
  std::optional<Cell> query_point;
  bool upsampled = false;

  Index height() const { return values.dim(0); }
  Index width() const { return values.dim(1); }
};

/// Bilinear upsampling of a map to image resolution.
ActivationMap upsample(const ActivationMap& map, Index height, Index width);

struct SimilarityReport {
  double S = 0.0;  // cosine similarity
  double D = 0.0;  // squared Euclidean distance of the normalized embeddings
};

template <typename DerivedA, typename DerivedB>
SimilarityReport similarity(const Eigen::MatrixBase<DerivedA>& eq,
                            const Eigen::MatrixBase<DerivedB>& er) {
  const VectorX<double> a = eq.template cast<double>();
  const VectorX<double> b = er.template cast<double>();
  const double na = a.norm(), nb = b.norm();
  if (na <= 1e-12 || nb <= 1e-12) {
    throw Error(ErrorCode::kDegenerateEmbedding, "similarity of a zero embedding");
  }
  return {a.dot(b) / (na * nb), (a / na - b / nb).squaredNorm()};
}

/// The four-term expansion of E^q . E^r over pairs of feature positions.
struct DecompositionResult {
  Tensor p2p;              // [m,n,x,y]: (W^q_ij A^q_ij) . (W^r_xy A^r_xy)
  Tensor query_bias_term;  // [m,n]: (W^q_ij A^q_ij) . B^r
  Tensor ref_bias_term;    // [x,y]: (W^r_xy A^r_xy) . B^q
  double pure_bias = 0.0;  // B^q . B^r
  double Z = 0.0;          // |E^q| |E^r|
  Tensor query_embedding;  // E^q as reconstructed by the linearized head
  Tensor ref_embedding;

  Index query_rows() const { return p2p.dim(0); }
  Index query_cols() const { return p2p.dim(1); }
  Index ref_rows() const { return p2p.dim(2); }
  Index ref_cols() const { return p2p.dim(3); }

  /// Sum of all four terms; equals E^q . E^r.
  double total() const;
  SimilarityReport report() const;
};

/// Class activation map for a GAP + FC classifier:
/// map(i,j) = sum_k w[k,c] A[i,j,k]. Its mean over positions is the class score
/// without bias. `fc_weights` is [p, classes].
ActivationMap cam(const Tensor& A, const Tensor& fc_weights, Index class_idx);

/// Single-stream decomposition of a class score on a linearized classifier
/// head, scaled by the position count so it follows the CAM convention:
/// map(i,j) = mn * (W_ij A_ij)[c].
ActivationMap score_decomposition(const LinearizedHead& head, const Tensor& A,
                                  Index class_idx);

DecompositionResult decompose_pair(const LinearizedHead& head_q, const Tensor& A_q,
                                   const LinearizedHead& head_r, const Tensor& A_r);

/// Query side: map(i,j) = (sum_xy p2p(i,j,x,y) [+ query_bias(i,j)]) / Z.
/// Reference side is symmetric.
ActivationMap overall_map(const DecompositionResult& d, Side side, bool with_bias);

/// Slice of p2p at `point` on `side`'s grid, shown over the other side's grid,
/// divided by Z. Optionally bilinearly resized.
ActivationMap point_specific_map(const DecompositionResult& d, Side side, Cell point,
                                 std::optional<std::pair<Index, Index>> target = std::nullopt);

/// Nearest feature cell of an image pixel (inverse corner-aligned mapping).
Cell pixel_to_cell(Index pixel_row, Index pixel_col, Index image_h, Index image_w,
                   Index grid_rows, Index grid_cols);

/// Point-specific map for a pixel of `side`'s image. With `interpolate`, the
/// p2p tensor is bilinearly interpolated along the clicked side's axes at the
/// pixel's fractional cell position; otherwise the nearest cell is used.
ActivationMap point_specific_map_at_pixel(
    const DecompositionResult& d, Side side, Index pixel_row, Index pixel_col,
    Index image_h, Index image_w, bool interpolate,
    std::optional<std::pair<Index, Index>> target = std::nullopt);

}  // namespace mlens
