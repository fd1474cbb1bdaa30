#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "metric_lens/tensor.hpp"

namespace mlens {

// TNSR layout (little-endian):
//   "TNSR" | version u8 = 1 | dtype u8 = 0 (f32) | ndim u8 | dims u32[ndim]
//   payload f32[product(dims)], row-major.
inline constexpr char kTensorMagic[4] = {'T', 'N', 'S', 'R'};
inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::uint8_t kTensorDtypeF32 = 0;

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

Tensor read_tensor(const std::filesystem::path& path);
void write_tensor(const Tensor& t, const std::filesystem::path& path);

/// 8-bit binary PGM of a rank-2 map, min-max normalized per map.
/// Display only; constant maps render black.
std::string encode_pgm(const Tensor& map);
void write_pgm(const Tensor& map, const std::filesystem::path& path);

/// Renders an [h,w,c] image tensor (c == 1 or 3) as PGM/PPM bytes.
std::string encode_image_preview(const Tensor& image);

}  // namespace mlens
