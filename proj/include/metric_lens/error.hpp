#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mlens {

// Every failure mode carries its own code so callers (CLI, HTTP service)
// can map them without parsing messages.
enum class ErrorCode {
  kBadMagic = 1,
  kUnsupportedVersion,
  kTruncatedPayload,
  kIoFailure,
  kEmptyInput,
  kShapeMismatch,
  kNonFinite,
  kInvalidManifest,
  kUnsupportedHead,
  kEmbeddingLengthMismatch,
  kPointOutOfRange,
  kDegenerateEmbedding,
  kEmptyMask,
  kCenterPixel,
  kEmptyIndex,
  kUnknownId,
  kVariantUnsupported,
  kInvalidArgument,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        detail_(message) {}

  ErrorCode code() const noexcept { return code_; }
  // Message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

// Thrown by the forward engine; records which layer rejected its input.
class ShapeError : public Error {
 public:
  ShapeError(int layer_index, const std::string& message)
      : Error(ErrorCode::kShapeMismatch,
              (layer_index >= 0 ? "layer " + std::to_string(layer_index) + ": "
                                : std::string()) +
                  message),
        layer_index_(layer_index) {}

  // -1 when the mismatch is not tied to a manifest layer.
  int layer_index() const noexcept { return layer_index_; }

 private:
  int layer_index_;
};

}  // namespace mlens
