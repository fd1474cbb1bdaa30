#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "metric_lens/tensor.hpp"

namespace mlens {

enum class LayerKind {
  kConv2d,
  kRelu,
  kBatchNorm,
  kGlobalAvgPool,
  kGlobalMaxPool,
  kFlatten,
  kFullyConnected,
  kL2Normalize,
};

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

enum class PoolMode { kAvg, kMax };

/// Inference-time batch normalization: y = gamma * (x - mean) / sqrt(var + eps) + beta.
struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor mean;
  Tensor variance;
  float epsilon = 1e-5f;

  Index channels() const { return gamma.size(); }
  // Per-channel (scale, shift) of the equivalent affine map, in double.
  VectorX<double> scale() const;
  VectorX<double> shift() const;
};

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  // conv2d: weight [kh,kw,c_in,c_out], bias [c_out].
  // fully_connected: weight [out,in], bias [out].
  Tensor weight;
  Tensor bias;
  int stride = 1;
  int padding = 0;
  BatchNormParams bn;
};

struct ModelManifest {
  std::string name;
  Shape input_shape;  // [h, w, c]
  std::vector<LayerSpec> layers;
  int last_conv_index = -1;

  /// Structural rules plus a full shape-propagation pass. Throws on failure.
  void validate() const;
  /// Output shape of every layer for the declared input shape.
  std::vector<Shape> layer_shapes() const;
  /// Shape of the feature map A (output of last_conv_index).
  Shape feature_shape() const;
  Index embedding_length() const;
  bool normalizes_output() const;
};

/// Reads a JSON manifest; weight paths are resolved against its directory.
ModelManifest load_manifest(const std::filesystem::path& path);
/// Writes the manifest JSON plus one TNSR file per weight tensor next to it.
void save_manifest(const ModelManifest& model, const std::filesystem::path& path);

struct ForwardTrace {
  Tensor conv_feature;  // A, [m,n,p]
  Tensor embedding;     // E before any final L2 normalization
  Tensor output;        // network output (normalized when the model ends in l2_normalize)
  std::vector<Tensor> layer_outputs;
};

// Layer kernels. All accumulate in double and round once on output.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding);
Tensor global_pool(const Tensor& input, PoolMode mode);
Tensor relu(const Tensor& input);
Tensor batch_norm(const Tensor& input, const BatchNormParams& bn);
Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias);
Tensor flatten(const Tensor& input);
Tensor l2_normalize(const Tensor& input);

/// Runs one layer on its input. `layer_index` only labels errors.
Tensor apply_layer(const LayerSpec& layer, const Tensor& input, int layer_index = -1);

ForwardTrace forward(const ModelManifest& model, const Tensor& image);

/// Outputs of the layers after last_conv_index, fed with `feature`.
std::vector<Tensor> head_outputs(const ModelManifest& model, const Tensor& feature,
                                 bool include_normalization = true);

/// Embedding (pre-normalization) computed from a conv feature map alone.
Tensor head_forward(const Tensor& feature, const ModelManifest& model);

}  // namespace mlens
