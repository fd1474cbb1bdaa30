#include "metric_lens/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>
#include <fstream>
#include <iterator>

namespace mlens {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kUnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::kTruncatedPayload: return "TruncatedPayload";
    case ErrorCode::kIoFailure: return "IoFailure";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kInvalidManifest: return "InvalidManifest";
    case ErrorCode::kUnsupportedHead: return "UnsupportedHead";
    case ErrorCode::kEmbeddingLengthMismatch: return "EmbeddingLengthMismatch";
    case ErrorCode::kPointOutOfRange: return "PointOutOfRange";
    case ErrorCode::kDegenerateEmbedding: return "DegenerateEmbedding";
    case ErrorCode::kEmptyMask: return "EmptyMask";
    case ErrorCode::kCenterPixel: return "CenterPixel";
    case ErrorCode::kEmptyIndex: return "EmptyIndex";
    case ErrorCode::kUnknownId: return "UnknownId";
    case ErrorCode::kVariantUnsupported: return "VariantUnsupported";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.empty()) throw Error(ErrorCode::kEmptyInput, "cannot encode an empty tensor");
  t.ensure_finite();
  std::vector<std::uint8_t> out;
  out.reserve(7 + 4 * t.shape().size() + 4 * static_cast<std::size_t>(t.size()));
  out.insert(out.end(), std::begin(kTensorMagic), std::end(kTensorMagic));
  out.push_back(kTensorVersion);
  out.push_back(kTensorDtypeF32);
  out.push_back(static_cast<std::uint8_t>(t.shape().size()));
  for (Index d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (float v : t.span()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
    throw Error(ErrorCode::kBadMagic, "missing TNSR magic");
  }
  if (bytes.size() < 7) throw Error(ErrorCode::kTruncatedPayload, "header cut short");
  if (bytes[4] != kTensorVersion) {
    throw Error(ErrorCode::kUnsupportedVersion,
                "version " + std::to_string(bytes[4]) + " is not supported");
  }
  if (bytes[5] != kTensorDtypeF32) {
    throw Error(ErrorCode::kUnsupportedVersion,
                "dtype " + std::to_string(bytes[5]) + " is not supported");
  }
  const std::size_t ndim = bytes[6];
  if (ndim < 1 || ndim > kMaxRank) {
    throw Error(ErrorCode::kUnsupportedVersion,
                "ndim " + std::to_string(ndim) + " outside 1..4");
  }
  const std::size_t header = 7 + 4 * ndim;
  if (bytes.size() < header) throw Error(ErrorCode::kTruncatedPayload, "dims cut short");
  Shape shape(ndim);
  for (std::size_t a = 0; a < ndim; ++a) {
    shape[a] = static_cast<Index>(get_u32(bytes.data() + 7 + 4 * a));
    if (shape[a] == 0) throw Error(ErrorCode::kShapeMismatch, "zero extent in header");
  }
  const auto count = static_cast<std::size_t>(shape_product(shape));
  if (bytes.size() < header + 4 * count) {
    throw Error(ErrorCode::kTruncatedPayload,
                "expected " + std::to_string(4 * count) + " payload bytes, found " +
                    std::to_string(bytes.size() - header));
  }
  VectorX<float> data(static_cast<Index>(count));
  for (std::size_t i = 0; i < count; ++i) {
    data[static_cast<Index>(i)] =
        std::bit_cast<float>(get_u32(bytes.data() + header + 4 * i));
  }
  return Tensor(std::move(shape), std::move(data));
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIoFailure, "short write to " + path.string());
}

namespace {

std::uint8_t to_byte(double v, double lo, double hi) {
  if (hi <= lo) return 0;
  return static_cast<std::uint8_t>(std::lround(255.0 * (v - lo) / (hi - lo)));
}

}  // namespace

std::string encode_pgm(const Tensor& map) {
  if (map.rank() != 2) throw Error(ErrorCode::kShapeMismatch, "PGM needs a rank-2 map");
  const double lo = map.values().minCoeff();
  const double hi = map.values().maxCoeff();
  std::string out = "P5\n" + std::to_string(map.dim(1)) + " " +
                    std::to_string(map.dim(0)) + "\n255\n";
  for (float v : map.span()) out.push_back(static_cast<char>(to_byte(v, lo, hi)));
  return out;
}

void write_pgm(const Tensor& map, const std::filesystem::path& path) {
  const std::string bytes = encode_pgm(map);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string() + " for writing");
  out << bytes;
}

std::string encode_image_preview(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3)) {
    throw Error(ErrorCode::kShapeMismatch,
                "preview needs [h,w,1] or [h,w,3], got " + shape_to_string(image.shape()));
  }
  const double lo = image.values().minCoeff();
  const double hi = image.values().maxCoeff();
  const bool color = image.dim(2) == 3;
  std::string out = std::string(color ? "P6\n" : "P5\n") + std::to_string(image.dim(1)) +
                    " " + std::to_string(image.dim(0)) + "\n255\n";
  for (float v : image.span()) out.push_back(static_cast<char>(to_byte(v, lo, hi)));
  return out;
}

}  // namespace mlens
