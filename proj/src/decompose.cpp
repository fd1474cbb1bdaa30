#include "metric_lens/decompose.hpp"

#include <array>

namespace mlens {

std::string_view to_string(MapVariant variant) {
  switch (variant) {
    case MapVariant::kCam: return "cam";
    case MapVariant::kOverallDecomp: return "overall_decomp";
    case MapVariant::kOverallDecompBias: return "overall_decomp_bias";
    case MapVariant::kPointSpecific: return "point_specific";
    case MapVariant::kGradCam: return "gradcam";
    case MapVariant::kGradCamNoNorm: return "gradcam_nonorm";
  }
  return "unknown";
}

MapVariant map_variant_from_string(std::string_view name) {
  for (MapVariant v : {MapVariant::kCam, MapVariant::kOverallDecomp,
                       MapVariant::kOverallDecompBias, MapVariant::kPointSpecific,
                       MapVariant::kGradCam, MapVariant::kGradCamNoNorm}) {
    if (to_string(v) == name) return v;
  }
  throw Error(ErrorCode::kVariantUnsupported, "unknown map variant '" + std::string(name) + "'");
}

std::string_view to_string(Side side) { return side == Side::kQuery ? "query" : "ref"; }

Side side_from_string(std::string_view name) {
  if (name == "query") return Side::kQuery;
  if (name == "ref") return Side::kRef;
  throw Error(ErrorCode::kInvalidArgument, "side must be 'query' or 'ref'");
}

namespace {

void require_normalizable(const DecompositionResult& d) {
  if (!(d.Z > 1e-24)) {
    throw Error(ErrorCode::kDegenerateEmbedding, "zero embedding: maps are undefined (Z = 0)");
  }
}

}  // namespace

ActivationMap upsample(const ActivationMap& map, Index height, Index width) {
  ActivationMap out = map;
  out.values = bilinear_resize(map.values, height, width);
  out.upsampled = true;
  return out;
}

double DecompositionResult::total() const {
  return p2p.values().cast<double>().sum() + query_bias_term.values().cast<double>().sum() +
         ref_bias_term.values().cast<double>().sum() + pure_bias;
}

SimilarityReport DecompositionResult::report() const {
  return similarity(query_embedding.values(), ref_embedding.values());
}

ActivationMap cam(const Tensor& A, const Tensor& fc_weights, Index class_idx) {
  if (A.rank() != 3 || fc_weights.rank() != 2 || fc_weights.dim(0) != A.dim(2)) {
    throw Error(ErrorCode::kShapeMismatch, "cam needs A [m,n,p] and weights [p,classes]");
  }
  if (class_idx < 0 || class_idx >= fc_weights.dim(1)) {
    throw Error(ErrorCode::kInvalidArgument, "class index out of range");
  }
  const Index m = A.dim(0), n = A.dim(1);
  const VectorX<double> w = fc_weights.matrix().col(class_idx).cast<double>();
  const VectorX<double> scores = A.as_rows(m * n).cast<double>() * w;
  ActivationMap out{Tensor(Shape{m, n}, scores.cast<float>()), MapVariant::kCam};
  return out;
}

ActivationMap score_decomposition(const LinearizedHead& head, const Tensor& A,
                                  Index class_idx) {
  if (class_idx < 0 || class_idx >= head.embedding_length()) {
    throw Error(ErrorCode::kInvalidArgument, "class index out of range");
  }
  const MatrixX<double> u = head.contributions(A);
  const VectorX<double> col =
      u.col(class_idx) * static_cast<double>(head.positions());
  return {Tensor(Shape{head.rows(), head.cols()}, col.cast<float>()), MapVariant::kCam};
}

DecompositionResult decompose_pair(const LinearizedHead& head_q, const Tensor& A_q,
                                   const LinearizedHead& head_r, const Tensor& A_r) {
  if (head_q.embedding_length() != head_r.embedding_length()) {
    throw Error(ErrorCode::kEmbeddingLengthMismatch,
                std::to_string(head_q.embedding_length()) + " vs " +
                    std::to_string(head_r.embedding_length()));
  }
  if (!head_q.bound_to(A_q) || !head_r.bound_to(A_r)) {
    throw Error(ErrorCode::kInvalidArgument,
                "linearized head was computed at a different operating point");
  }
  const MatrixX<double> u = head_q.contributions(A_q);  // [mn, l]
  const MatrixX<double> v = head_r.contributions(A_r);  // [xy, l]
  const VectorX<double> bq = head_q.B.values().cast<double>();
  const VectorX<double> br = head_r.B.values().cast<double>();

  const RowMatrixX<double> pairs = u * v.transpose();
  const VectorX<double> eq = u.colwise().sum().transpose() + bq;
  const VectorX<double> er = v.colwise().sum().transpose() + br;

  DecompositionResult d;
  d.p2p = Tensor(Shape{head_q.rows(), head_q.cols(), head_r.rows(), head_r.cols()},
                 Eigen::Map<const VectorX<double>>(pairs.data(), pairs.size()).cast<float>());
  d.query_bias_term = Tensor(Shape{head_q.rows(), head_q.cols()}, (u * br).cast<float>());
  d.ref_bias_term = Tensor(Shape{head_r.rows(), head_r.cols()}, (v * bq).cast<float>());
  d.pure_bias = bq.dot(br);
  d.Z = eq.norm() * er.norm();
  d.query_embedding = Tensor(Shape{eq.size()}, eq.cast<float>());
  d.ref_embedding = Tensor(Shape{er.size()}, er.cast<float>());
  return d;
}

ActivationMap overall_map(const DecompositionResult& d, Side side, bool with_bias) {
  require_normalizable(d);
  const Index mn = d.query_rows() * d.query_cols();
  const auto pairs = d.p2p.as_rows(mn);  // [mn, xy]
  VectorX<double> sums;
  Shape shape;
  if (side == Side::kQuery) {
    sums = pairs.cast<double>().rowwise().sum();
    if (with_bias) sums += d.query_bias_term.values().cast<double>();
    shape = {d.query_rows(), d.query_cols()};
  } else {
    sums = pairs.cast<double>().colwise().sum().transpose();
    if (with_bias) sums += d.ref_bias_term.values().cast<double>();
    shape = {d.ref_rows(), d.ref_cols()};
  }
  sums /= d.Z;
  return {Tensor(std::move(shape), sums.cast<float>()),
          with_bias ? MapVariant::kOverallDecompBias : MapVariant::kOverallDecomp};
}

namespace {

// p2p slice for one cell of `side`, laid out over the other side's grid, in double.
VectorX<double> slice(const DecompositionResult& d, Side side, Cell point) {
  const Index mn = d.query_rows() * d.query_cols();
  const auto pairs = d.p2p.as_rows(mn);
  if (side == Side::kQuery) {
    return pairs.row(point.row * d.query_cols() + point.col).transpose().cast<double>();
  }
  return pairs.col(point.row * d.ref_cols() + point.col).cast<double>();
}

ActivationMap finish_point_map(const DecompositionResult& d, Side side,
                               const VectorX<double>& values, Cell point,
                               std::optional<std::pair<Index, Index>> target) {
  require_normalizable(d);
  Shape shape = side == Side::kQuery ? Shape{d.ref_rows(), d.ref_cols()}
                                     : Shape{d.query_rows(), d.query_cols()};
  ActivationMap out{Tensor(std::move(shape), (values / d.Z).cast<float>()),
                    MapVariant::kPointSpecific, point};
  if (target) out = upsample(out, target->first, target->second);
  return out;
}

}  // namespace

ActivationMap point_specific_map(const DecompositionResult& d, Side side, Cell point,
                                 std::optional<std::pair<Index, Index>> target) {
  const Index rows = side == Side::kQuery ? d.query_rows() : d.ref_rows();
  const Index cols = side == Side::kQuery ? d.query_cols() : d.ref_cols();
  if (point.row < 0 || point.row >= rows || point.col < 0 || point.col >= cols) {
    throw Error(ErrorCode::kPointOutOfRange,
                "cell (" + std::to_string(point.row) + "," + std::to_string(point.col) +
                    ") outside " + std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  return finish_point_map(d, side, slice(d, side, point), point, target);
}

Cell pixel_to_cell(Index pixel_row, Index pixel_col, Index image_h, Index image_w,
                   Index grid_rows, Index grid_cols) {
  if (pixel_row < 0 || pixel_row >= image_h || pixel_col < 0 || pixel_col >= image_w) {
    throw Error(ErrorCode::kPointOutOfRange,
                "pixel (" + std::to_string(pixel_row) + "," + std::to_string(pixel_col) +
                    ") outside " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                    " image");
  }
  return {nearest_source_cell(pixel_row, grid_rows, image_h),
          nearest_source_cell(pixel_col, grid_cols, image_w)};
}

ActivationMap point_specific_map_at_pixel(const DecompositionResult& d, Side side,
                                          Index pixel_row, Index pixel_col, Index image_h,
                                          Index image_w, bool interpolate,
                                          std::optional<std::pair<Index, Index>> target) {
  const Index rows = side == Side::kQuery ? d.query_rows() : d.ref_rows();
  const Index cols = side == Side::kQuery ? d.query_cols() : d.ref_cols();
  const Cell nearest = pixel_to_cell(pixel_row, pixel_col, image_h, image_w, rows, cols);
  if (!interpolate) return point_specific_map(d, side, nearest, target);

  const LerpTap r = lerp_tap(corner_aligned_source(pixel_row, rows, image_h), rows);
  const LerpTap c = lerp_tap(corner_aligned_source(pixel_col, cols, image_w), cols);
  const std::array<std::pair<Cell, double>, 4> taps = {{
      {{r.lo, c.lo}, (1.0 - r.frac) * (1.0 - c.frac)},
      {{r.lo, c.hi}, (1.0 - r.frac) * c.frac},
      {{r.hi, c.lo}, r.frac * (1.0 - c.frac)},
      {{r.hi, c.hi}, r.frac * c.frac},
  }};
  VectorX<double> values;
  for (const auto& [cell, weight] : taps) {
    VectorX<double> s = slice(d, side, cell) * weight;
    values = values.size() ? VectorX<double>(values + s) : s;
  }
  return finish_point_map(d, side, values, nearest, target);
}

}  // namespace mlens
