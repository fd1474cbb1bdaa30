#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string_view>
#include <vector>

#include "metric_lens/nn.hpp"

namespace mlens {

// Small randomized models for tests, demos and the acceptance suite. Real
// checkpoints can be exported to the same manifest format.

enum class HeadPattern {
  kGap,                // GAP
  kGapFc,              // GAP + FC
  kGmp,                // GMP
  kGmpFc,              // GMP + FC
  kGmpFcReluFc,        // GMP + FC + ReLU + FC
  kFlattenFc,          // flatten + FC
  kFlattenFcReluFc,    // flatten + FC + ReLU + FC
  kFlattenFcBn,        // flatten + FC + BN
  kFlattenFcReluFcBn,  // flatten + FC + ReLU + FC + BN
  kGapFcBnL2,          // GAP + FC + BN + l2_normalize
  kBnReluGmpFc,        // spatial BN + ReLU + GMP + FC
};

std::string_view to_string(HeadPattern pattern);
const std::vector<HeadPattern>& all_head_patterns();

struct ToyModelOptions {
  Index height = 8;
  Index width = 8;
  Index in_channels = 3;
  Index hidden_channels = 5;
  Index feature_channels = 4;  // p
  Index hidden_units = 7;
  Index embedding_length = 6;  // l
  int feature_stride = 2;      // stride of the last conv
  bool with_bias = true;
  HeadPattern head = HeadPattern::kGapFc;
};

using Rng = std::mt19937_64;

Tensor random_normal(const Shape& shape, Rng& rng, double stddev = 1.0);
Tensor random_uniform(const Shape& shape, Rng& rng, double lo, double hi);

/// conv3x3 + ReLU + conv3x3(stride) + ReLU, then the requested head.
/// last_conv_index points at the second ReLU so A is non-negative.
ModelManifest make_toy_model(const ToyModelOptions& options, Rng& rng);

/// Writes a manifest, `count` random images and a localization pair list into
/// `dir`; used by `metric_lens fixture`.
void write_demo_workspace(const std::filesystem::path& dir, HeadPattern head, std::size_t count,
                          std::uint64_t seed);

}  // namespace mlens
