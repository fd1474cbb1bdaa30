#include "metric_lens/evaluate.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace mlens {

double iou(const BBox& a, const BBox& b) {
  const Index ix = std::max<Index>(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const Index iy = std::max<Index>(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = static_cast<double>(ix * iy);
  const double uni = static_cast<double>(a.area() + b.area()) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

// Union-find over provisional labels of the two-pass labeling.
struct DisjointSet {
  std::vector<int> parent;

  int make() {
    parent.push_back(static_cast<int>(parent.size()));
    return parent.back();
  }
  int find(int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

ComponentLabels label_components(const std::vector<bool>& mask, Index rows, Index cols) {
  if (static_cast<Index>(mask.size()) != rows * cols) {
    throw Error(ErrorCode::kShapeMismatch, "mask size does not match rows x cols");
  }
  ComponentLabels out{rows, cols, std::vector<int>(mask.size(), -1), {}};
  DisjointSet sets;
  auto at = [&](Index r, Index c) -> int& { return out.labels[static_cast<std::size_t>(r * cols + c)]; };

  // First pass: provisional labels from the already-visited 8-neighbours.
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      if (!mask[static_cast<std::size_t>(r * cols + c)]) continue;
      int label = -1;
      const Index nbrs[4][2] = {{r, c - 1}, {r - 1, c - 1}, {r - 1, c}, {r - 1, c + 1}};
      for (const auto& nb : nbrs) {
        if (nb[0] < 0 || nb[1] < 0 || nb[1] >= cols) continue;
        const int other = at(nb[0], nb[1]);
        if (other < 0) continue;
        if (label < 0) {
          label = other;
        } else {
          sets.unite(label, other);
        }
      }
      at(r, c) = label < 0 ? sets.make() : label;
    }
  }

  // Second pass: resolve to roots and renumber in scan order starting at 1.
  std::vector<int> remap(sets.parent.size(), 0);
  int next = 0;
  for (int& label : out.labels) {
    if (label < 0) {
      label = 0;
      continue;
    }
    const int root = sets.find(label);
    if (remap[static_cast<std::size_t>(root)] == 0) {
      remap[static_cast<std::size_t>(root)] = ++next;
      out.sizes.push_back(0);
    }
    label = remap[static_cast<std::size_t>(root)];
    ++out.sizes[static_cast<std::size_t>(label - 1)];
  }
  return out;
}

BBox segment_and_box(const ActivationMap& map, double threshold, Index image_h, Index image_w) {
  if (map.values.empty() || map.values.rank() != 2) {
    throw Error(ErrorCode::kEmptyInput, "segment_and_box needs a rank-2 map");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "threshold must lie in (0, 1)");
  }
  Tensor clipped = map.values;
  clipped.values() = clipped.values().cwiseMax(0.0f);
  const Tensor full = bilinear_resize(clipped, image_h, image_w);
  const double peak = full.values().maxCoeff();
  if (!(peak > 0.0)) throw Error(ErrorCode::kEmptyMask, "no positive activation");

  const double cut = threshold * peak;
  std::vector<bool> mask(static_cast<std::size_t>(full.size()));
  for (Index k = 0; k < full.size(); ++k) mask[static_cast<std::size_t>(k)] = full[k] >= cut;
  const ComponentLabels comps = label_components(mask, image_h, image_w);
  if (comps.sizes.empty()) throw Error(ErrorCode::kEmptyMask, "nothing above threshold");

  const auto largest = static_cast<int>(
      std::max_element(comps.sizes.begin(), comps.sizes.end()) - comps.sizes.begin() + 1);
  BBox box{image_w, image_h, 0, 0};
  for (Index r = 0; r < image_h; ++r) {
    for (Index c = 0; c < image_w; ++c) {
      if (comps.labels[static_cast<std::size_t>(r * image_w + c)] != largest) continue;
      box.x0 = std::min(box.x0, c);
      box.y0 = std::min(box.y0, r);
      box.x1 = std::max(box.x1, c + 1);
      box.y1 = std::max(box.y1, r + 1);
    }
  }
  return box;
}

double localization_accuracy(const std::vector<LocalizationSample>& samples, double threshold) {
  if (samples.empty()) throw Error(ErrorCode::kEmptyInput, "no localization samples");
  std::size_t hits = 0;
  for (const auto& s : samples) {
    try {
      const BBox box = segment_and_box(s.map, threshold, s.image_h, s.image_w);
      if (iou(box, s.ground_truth) > kLocalizationIou) ++hits;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kEmptyMask) throw;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double wrap_degrees(double deg) {
  double w = std::fmod(deg, 360.0);
  if (w < 0.0) w += 360.0;
  return w >= 360.0 ? 0.0 : w;
}

double panorama_angle(Index col, Index width) {
  if (width < 1 || col < 0 || col >= width) {
    throw Error(ErrorCode::kPointOutOfRange, "panorama column outside [0, width)");
  }
  return wrap_degrees(360.0 * static_cast<double>(col) / static_cast<double>(width));
}

double aerial_angle(Index row, Index col, const AerialFrame& frame) {
  const double dy = static_cast<double>(row) - frame.center_row;
  const double dx = static_cast<double>(col) - frame.center_col;
  if (std::abs(dx) < 1e-9 && std::abs(dy) < 1e-9) {
    throw Error(ErrorCode::kCenterPixel, "aerial pixel is the image center");
  }
  const double turn = frame.clockwise ? -dx : dx;
  return wrap_degrees(std::atan2(turn, dy) * 180.0 / std::numbers::pi + frame.zero_offset_deg);
}

std::pair<Index, Index> argmax(const Tensor& map) {
  if (map.rank() != 2) throw Error(ErrorCode::kShapeMismatch, "argmax expects a rank-2 map");
  Index best = 0;
  for (Index k = 1; k < map.size(); ++k) {
    if (map[k] > map[best]) best = k;
  }
  return {best / map.dim(1), best % map.dim(1)};
}

namespace {

std::pair<Index, Index> positive_argmax(const Tensor& map, const char* what) {
  const auto [r, c] = argmax(map);
  if (!(map(r, c) > 0.0f)) {
    throw Error(ErrorCode::kEmptyMask, std::string(what) + " map has no positive activation");
  }
  return {r, c};
}

}  // namespace

OrientationEstimate estimate_orientation(const ActivationMap& street_map,
                                         const ActivationMap& aerial_map, OrientationMode mode,
                                         const DecompositionResult* decomp, Side street_side) {
  OrientationEstimate est;
  const auto [srow, scol] = positive_argmax(street_map.values, "street");
  est.street_col = scol;
  est.street_angle = panorama_angle(scol, street_map.width());

  const Index ah = aerial_map.height(), aw = aerial_map.width();
  if (mode == OrientationMode::kOverall) {
    std::tie(est.aerial_row, est.aerial_col) = positive_argmax(aerial_map.values, "aerial");
  } else {
    if (decomp == nullptr) {
      throw Error(ErrorCode::kInvalidArgument, "point-specific orientation needs a decomposition");
    }
    const bool q = street_side == Side::kQuery;
    const Cell cell = pixel_to_cell(srow, scol, street_map.height(), street_map.width(),
                                    q ? decomp->query_rows() : decomp->ref_rows(),
                                    q ? decomp->query_cols() : decomp->ref_cols());
    const ActivationMap point = point_specific_map(*decomp, street_side, cell, {{ah, aw}});
    std::tie(est.aerial_row, est.aerial_col) = positive_argmax(point.values, "point-specific");
  }
  est.aerial_angle = aerial_angle(est.aerial_row, est.aerial_col, AerialFrame::centered(ah, aw));
  est.angle = wrap_degrees(est.aerial_angle - est.street_angle);
  return est;
}

double wrap_angle_error(double gt_deg, double est_deg) {
  double e = gt_deg - est_deg;
  while (e > 180.0) e -= 360.0;
  while (e < -180.0) e += 360.0;
  return e;
}

AngleHistogram angle_error_histogram(const std::vector<double>& errors, double bin_width) {
  if (!(bin_width > 0.0)) throw Error(ErrorCode::kInvalidArgument, "bin width must be positive");
  const double half = 0.5 * bin_width;
  const auto bin_of = [&](double e) { return static_cast<long>(std::floor((e + half) / bin_width)); };
  const long lo = bin_of(-180.0), hi = bin_of(180.0);
  AngleHistogram h;
  h.bin_width = bin_width;
  std::vector<std::size_t> counts(static_cast<std::size_t>(hi - lo + 1), 0);
  for (long k = lo; k <= hi; ++k) h.centers.push_back(static_cast<double>(k) * bin_width);
  for (double e : errors) {
    const long k = std::clamp(bin_of(e), lo, hi);
    ++counts[static_cast<std::size_t>(k - lo)];
  }
  const double total = static_cast<double>(errors.size());
  for (std::size_t c : counts) h.fractions.push_back(total > 0 ? static_cast<double>(c) / total : 0.0);
  return h;
}

}  // namespace mlens
