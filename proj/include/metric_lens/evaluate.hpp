#pragma once

#include <vector>

#include "metric_lens/decompose.hpp"

namespace mlens {

/// Pixel box, inclusive-exclusive: columns [x0, x1), rows [y0, y1).
struct BBox {
  Index x0 = 0;
  Index y0 = 0;
  Index x1 = 0;
  Index y1 = 0;

  Index width() const { return x1 - x0; }
  Index height() const { return y1 - y0; }
  Index area() const { return width() * height(); }
  bool contains(Index row, Index col) const {
    return col >= x0 && col < x1 && row >= y0 && row < y1;
  }
  friend bool operator==(const BBox&, const BBox&) = default;
};

double iou(const BBox& a, const BBox& b);

/// Connected components of a binary mask under 8-connectivity.
/// `labels` is row-major, 0 for background, components numbered from 1 in
/// order of their first pixel in a row-major scan.
struct ComponentLabels {
  Index rows = 0;
  Index cols = 0;
  std::vector<int> labels;
  std::vector<Index> sizes;  // sizes[k] is the pixel count of label k + 1
};

ComponentLabels label_components(const std::vector<bool>& mask, Index rows, Index cols);

/// Clip negatives, upsample to the image, keep pixels >= threshold * max, and
/// box the largest 8-connected component (first in scan order on ties).
BBox segment_and_box(const ActivationMap& map, double threshold, Index image_h, Index image_w);

struct LocalizationSample {
  ActivationMap map;
  BBox ground_truth;
  Index image_h = 0;
  Index image_w = 0;
};

/// Fraction of samples whose predicted box has IoU > 0.5 with the ground truth.
/// Maps with nothing above threshold count as misses.
double localization_accuracy(const std::vector<LocalizationSample>& samples, double threshold);

/// Hit threshold for localization.
inline constexpr double kLocalizationIou = 0.5;

// ---------------------------------------------------------------------------
// Orientation

/// Degrees wrapped into [0, 360).
double wrap_degrees(double deg);

/// Panorama column to angle: 360 * col / width, column 0 is the 0 degree reference.
double panorama_angle(Index col, Index width);

/// Aerial pixel to angle around the image center. The 0 degree ray points
/// from the center toward increasing rows (the panorama's reference direction
/// with north up), and angles grow toward decreasing columns, matching the
/// turning sense of panorama columns seen from above.
struct AerialFrame {
  double center_row = 0.0;
  double center_col = 0.0;
  double zero_offset_deg = 0.0;  // rotates the 0 degree ray
  bool clockwise = true;         // false mirrors the turning sense

  static AerialFrame centered(Index height, Index width) {
    return {0.5 * static_cast<double>(height - 1), 0.5 * static_cast<double>(width - 1)};
  }
};

double aerial_angle(Index row, Index col, const AerialFrame& frame);

enum class OrientationMode { kOverall, kPointSpecific };

struct OrientationEstimate {
  double angle = 0.0;  // [0, 360)
  double street_angle = 0.0;
  double aerial_angle = 0.0;
  Index street_col = 0;
  Index aerial_row = 0;
  Index aerial_col = 0;
};

/// Angle between a street panorama and an aerial image from activation maps
/// already at image resolution. In point-specific mode the street map's
/// argmax is mapped to a feature cell and its point-specific map on the aerial
/// side of `decomp` is used instead of `aerial_map`.
OrientationEstimate estimate_orientation(const ActivationMap& street_map,
                                         const ActivationMap& aerial_map, OrientationMode mode,
                                         const DecompositionResult* decomp = nullptr,
                                         Side street_side = Side::kQuery);

/// gt - est shifted by +-360 into [-180, 180].
double wrap_angle_error(double gt_deg, double est_deg);

struct AngleHistogram {
  double bin_width = 7.0;
  std::vector<double> centers;
  std::vector<double> fractions;
};

/// Bins of width `bin_width` centered on multiples of it (the zero bin covers
/// [-w/2, w/2)). Fractions sum to 1 for non-empty input.
AngleHistogram angle_error_histogram(const std::vector<double>& errors, double bin_width = 7.0);

/// Row-major index of the first maximum of a rank-2 map.
std::pair<Index, Index> argmax(const Tensor& map);

}  // namespace mlens
