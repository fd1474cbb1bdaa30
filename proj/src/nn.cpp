#include "metric_lens/nn.hpp"

#include <cmath>

namespace mlens {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kGlobalAvgPool: return "global_avg_pool";
    case LayerKind::kGlobalMaxPool: return "global_max_pool";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kFullyConnected: return "fully_connected";
    case LayerKind::kL2Normalize: return "l2_normalize";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (LayerKind k : {LayerKind::kConv2d, LayerKind::kRelu, LayerKind::kBatchNorm,
                      LayerKind::kGlobalAvgPool, LayerKind::kGlobalMaxPool,
                      LayerKind::kFlatten, LayerKind::kFullyConnected,
                      LayerKind::kL2Normalize}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorCode::kInvalidManifest, "unknown layer kind '" + std::string(name) + "'");
}

VectorX<double> BatchNormParams::scale() const {
  const VectorX<double> var = variance.values().cast<double>();
  return gamma.values().cast<double>().cwiseQuotient(
      (var.array() + static_cast<double>(epsilon)).sqrt().matrix());
}

VectorX<double> BatchNormParams::shift() const {
  return beta.values().cast<double>() -
         mean.values().cast<double>().cwiseProduct(scale());
}

// ---------------------------------------------------------------------------
// Kernels

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  if (input.rank() != 3 || weight.rank() != 4) {
    throw ShapeError(-1, "conv2d expects input [h,w,c] and weight [kh,kw,c_in,c_out]");
  }
  const Index h = input.dim(0), w = input.dim(1), c_in = input.dim(2);
  const Index kh = weight.dim(0), kw = weight.dim(1), c_out = weight.dim(3);
  if (weight.dim(2) != c_in) {
    throw ShapeError(-1, "conv2d weight expects " + std::to_string(weight.dim(2)) +
                             " input channels, got " + std::to_string(c_in));
  }
  if (bias.empty() ? false : bias.size() != c_out) {
    throw ShapeError(-1, "conv2d bias length must equal c_out");
  }
  if (stride < 1 || padding < 0) throw ShapeError(-1, "conv2d needs stride >= 1, padding >= 0");
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw ShapeError(-1, "conv2d kernel larger than padded input");
  }
  const Index out_h = (h + 2 * padding - kh) / stride + 1;
  const Index out_w = (w + 2 * padding - kw) / stride + 1;

  // im2col: one row per output pixel, columns ordered (dy, dx, c_in) to match
  // the row-major [kh,kw,c_in,c_out] weight reshaped to [kh*kw*c_in, c_out].
  const Index patch = kh * kw * c_in;
  MatrixX<double> cols = MatrixX<double>::Zero(out_h * out_w, patch);
  for (Index oy = 0; oy < out_h; ++oy) {
    for (Index ox = 0; ox < out_w; ++ox) {
      const Index row = oy * out_w + ox;
      for (Index dy = 0; dy < kh; ++dy) {
        const Index iy = oy * stride + dy - padding;
        if (iy < 0 || iy >= h) continue;
        for (Index dx = 0; dx < kw; ++dx) {
          const Index ix = ox * stride + dx - padding;
          if (ix < 0 || ix >= w) continue;
          for (Index c = 0; c < c_in; ++c) {
            cols(row, (dy * kw + dx) * c_in + c) = input(iy, ix, c);
          }
        }
      }
    }
  }
  const MatrixX<double> kernel = weight.as_rows(patch).cast<double>();
  MatrixX<double> out = cols * kernel;
  if (!bias.empty()) out.rowwise() += bias.values().cast<double>().transpose();

  RowMatrixX<float> rounded = out.cast<float>();
  return Tensor(Shape{out_h, out_w, c_out},
                Eigen::Map<const VectorX<float>>(rounded.data(), rounded.size()));
}

Tensor global_pool(const Tensor& input, PoolMode mode) {
  if (input.rank() != 3) throw ShapeError(-1, "global pooling expects [m,n,p]");
  const Index positions = input.dim(0) * input.dim(1);
  const Index p = input.dim(2);
  const auto rows = input.as_rows(positions);  // [mn, p]
  Tensor out(Shape{p});
  if (mode == PoolMode::kMax) {
    out.values() = rows.colwise().maxCoeff().transpose();
    return out;
  }
  // Multiply by the rounded 1/(mn) term by term so the result is bit-identical
  // to applying the pooling matrix to the flattened feature.
  const double inv = static_cast<double>(static_cast<float>(1.0 / static_cast<double>(positions)));
  for (Index k = 0; k < p; ++k) {
    double acc = 0.0;
    for (Index r = 0; r < positions; ++r) acc += static_cast<double>(rows(r, k)) * inv;
    out[k] = static_cast<float>(acc);
  }
  return out;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  out.values() = input.values().cwiseMax(0.0f);
  return out;
}

Tensor batch_norm(const Tensor& input, const BatchNormParams& bn) {
  const Index c = bn.channels();
  if (bn.beta.size() != c || bn.mean.size() != c || bn.variance.size() != c) {
    throw ShapeError(-1, "batchnorm parameter lengths differ");
  }
  if (input.shape().back() != c) {
    throw ShapeError(-1, "batchnorm over " + std::to_string(c) + " channels applied to " +
                             shape_to_string(input.shape()));
  }
  const VectorX<double> scale = bn.scale();
  const VectorX<double> shift = bn.shift();
  Tensor out = input;
  auto rows = Eigen::Map<RowMatrixX<float>>(out.values().data(), input.size() / c, c);
  const auto src = input.as_rows(input.size() / c);
  for (Index r = 0; r < rows.rows(); ++r) {
    for (Index k = 0; k < c; ++k) {
      rows(r, k) = static_cast<float>(static_cast<double>(src(r, k)) * scale[k] + shift[k]);
    }
  }
  out.ensure_finite();
  return out;
}

Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 1) {
    throw ShapeError(-1, "fully_connected expects a vector, got " +
                             shape_to_string(input.shape()) + " (missing flatten/pool?)");
  }
  if (weight.rank() != 2 || weight.dim(1) != input.size()) {
    throw ShapeError(-1, "fully_connected weight " + shape_to_string(weight.shape()) +
                             " cannot consume input of length " +
                             std::to_string(input.size()));
  }
  if (!bias.empty() && bias.size() != weight.dim(0)) {
    throw ShapeError(-1, "fully_connected bias length must equal output length");
  }
  VectorX<double> y = weight.matrix().cast<double>() * input.values().cast<double>();
  if (!bias.empty()) y += bias.values().cast<double>();
  return Tensor(Shape{weight.dim(0)}, y.cast<float>());
}

Tensor flatten(const Tensor& input) { return input.reshaped(Shape{input.size()}); }

Tensor l2_normalize(const Tensor& input) {
  const double norm = l2_norm(input);
  if (norm <= 1e-12) {
    throw Error(ErrorCode::kDegenerateEmbedding, "cannot L2-normalize a zero vector");
  }
  Tensor out = input;
  out.values() = (input.values().cast<double>() / norm).cast<float>();
  return out;
}

Tensor apply_layer(const LayerSpec& layer, const Tensor& input, int layer_index) {
  try {
    switch (layer.kind) {
      case LayerKind::kConv2d:
        return conv2d(input, layer.weight, layer.bias, layer.stride, layer.padding);
      case LayerKind::kRelu: return relu(input);
      case LayerKind::kBatchNorm: return batch_norm(input, layer.bn);
      case LayerKind::kGlobalAvgPool: return global_pool(input, PoolMode::kAvg);
      case LayerKind::kGlobalMaxPool: return global_pool(input, PoolMode::kMax);
      case LayerKind::kFlatten: return flatten(input);
      case LayerKind::kFullyConnected:
        return fully_connected(input, layer.weight, layer.bias);
      case LayerKind::kL2Normalize: return l2_normalize(input);
    }
  } catch (const ShapeError& e) {
    if (e.layer_index() < 0 && layer_index >= 0) {
      throw ShapeError(layer_index, e.detail());
    }
    throw;
  }
  throw Error(ErrorCode::kInvalidManifest, "unhandled layer kind");
}

// ---------------------------------------------------------------------------
// Manifest structure

namespace {

bool is_pooling_or_flatten(LayerKind k) {
  return k == LayerKind::kGlobalAvgPool || k == LayerKind::kGlobalMaxPool ||
         k == LayerKind::kFlatten;
}

Shape propagate(const LayerSpec& layer, const Shape& in, int index) {
  auto fail = [index](const std::string& msg) -> Shape { throw ShapeError(index, msg); };
  switch (layer.kind) {
    case LayerKind::kConv2d: {
      if (in.size() != 3) return fail("conv2d needs [h,w,c] input");
      if (layer.weight.rank() != 4) return fail("conv2d weight must be [kh,kw,c_in,c_out]");
      if (layer.weight.dim(2) != in[2]) return fail("conv2d c_in mismatch");
      if (!layer.bias.empty() && layer.bias.size() != layer.weight.dim(3)) {
        return fail("conv2d bias length mismatch");
      }
      if (layer.stride < 1 || layer.padding < 0) return fail("bad stride/padding");
      const Index ph = in[0] + 2 * layer.padding, pw = in[1] + 2 * layer.padding;
      if (layer.weight.dim(0) > ph || layer.weight.dim(1) > pw) {
        return fail("conv2d kernel larger than padded input");
      }
      return {(ph - layer.weight.dim(0)) / layer.stride + 1,
              (pw - layer.weight.dim(1)) / layer.stride + 1, layer.weight.dim(3)};
    }
    case LayerKind::kRelu:
    case LayerKind::kL2Normalize: return in;
    case LayerKind::kBatchNorm: {
      const Index c = layer.bn.channels();
      if (in.back() != c || layer.bn.beta.size() != c || layer.bn.mean.size() != c ||
          layer.bn.variance.size() != c) {
        return fail("batchnorm channel count mismatch");
      }
      return in;
    }
    case LayerKind::kGlobalAvgPool:
    case LayerKind::kGlobalMaxPool:
      if (in.size() != 3) return fail("global pooling needs [m,n,p] input");
      return {in[2]};
    case LayerKind::kFlatten: return {shape_product(in)};
    case LayerKind::kFullyConnected:
      if (in.size() != 1) return fail("fully_connected needs a vector input");
      if (layer.weight.rank() != 2 || layer.weight.dim(1) != in[0]) {
        return fail("fully_connected weight " + shape_to_string(layer.weight.shape()) +
                    " vs input length " + std::to_string(in[0]));
      }
      if (!layer.bias.empty() && layer.bias.size() != layer.weight.dim(0)) {
        return fail("fully_connected bias length mismatch");
      }
      return {layer.weight.dim(0)};
  }
  return fail("unknown layer kind");
}

}  // namespace

void ModelManifest::validate() const {
  auto invalid = [](const std::string& msg) { throw Error(ErrorCode::kInvalidManifest, msg); };
  if (input_shape.size() != 3) invalid("input_shape must be [h, w, c]");
  if (layers.empty()) invalid("manifest has no layers");
  if (last_conv_index < 0 || last_conv_index >= static_cast<int>(layers.size())) {
    invalid("last_conv_index out of range");
  }
  bool seen_conv = false;
  for (int i = 0; i <= last_conv_index; ++i) {
    const LayerKind k = layers[static_cast<std::size_t>(i)].kind;
    if (k != LayerKind::kConv2d && k != LayerKind::kRelu && k != LayerKind::kBatchNorm) {
      invalid("layer " + std::to_string(i) + " (" + std::string(to_string(k)) +
              ") cannot precede the conv feature map");
    }
    seen_conv = seen_conv || k == LayerKind::kConv2d;
  }
  if (!seen_conv) invalid("no conv2d layer at or before last_conv_index");
  int reducers = 0;
  int normalizers = 0;
  for (std::size_t i = static_cast<std::size_t>(last_conv_index) + 1; i < layers.size(); ++i) {
    if (is_pooling_or_flatten(layers[i].kind)) ++reducers;
    if (layers[i].kind == LayerKind::kL2Normalize) {
      ++normalizers;
      if (i + 1 != layers.size()) invalid("l2_normalize must be the last layer");
    }
  }
  if (reducers != 1) {
    invalid("exactly one global pooling or flatten must follow last_conv_index, found " +
            std::to_string(reducers));
  }
  if (normalizers > 1) invalid("at most one l2_normalize is allowed");
  (void)layer_shapes();
}

std::vector<Shape> ModelManifest::layer_shapes() const {
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  Shape current = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    current = propagate(layers[i], current, static_cast<int>(i));
    shapes.push_back(current);
  }
  return shapes;
}

Shape ModelManifest::feature_shape() const {
  return layer_shapes().at(static_cast<std::size_t>(last_conv_index));
}

Index ModelManifest::embedding_length() const { return layer_shapes().back().at(0); }

bool ModelManifest::normalizes_output() const {
  return !layers.empty() && layers.back().kind == LayerKind::kL2Normalize;
}

// ---------------------------------------------------------------------------
// Forward

ForwardTrace forward(const ModelManifest& model, const Tensor& image) {
  if (image.shape() != model.input_shape) {
    throw ShapeError(-1, "image shape " + shape_to_string(image.shape()) +
                             " does not match model input " +
                             shape_to_string(model.input_shape));
  }
  ForwardTrace trace;
  trace.layer_outputs.reserve(model.layers.size());
  const Tensor* current = &image;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    trace.layer_outputs.push_back(apply_layer(model.layers[i], *current, static_cast<int>(i)));
    current = &trace.layer_outputs.back();
  }
  trace.conv_feature =
      trace.layer_outputs[static_cast<std::size_t>(model.last_conv_index)];
  trace.output = trace.layer_outputs.back();
  trace.embedding = model.normalizes_output()
                        ? trace.layer_outputs[trace.layer_outputs.size() - 2]
                        : trace.output;
  return trace;
}

std::vector<Tensor> head_outputs(const ModelManifest& model, const Tensor& feature,
                                 bool include_normalization) {
  const Shape expected = model.feature_shape();
  if (feature.shape() != expected) {
    throw ShapeError(model.last_conv_index + 1,
                     "head expects feature " + shape_to_string(expected) + ", got " +
                         shape_to_string(feature.shape()));
  }
  std::vector<Tensor> outputs;
  const Tensor* current = &feature;
  std::size_t end = model.layers.size();
  if (!include_normalization && model.normalizes_output()) --end;
  for (std::size_t i = static_cast<std::size_t>(model.last_conv_index) + 1; i < end; ++i) {
    outputs.push_back(apply_layer(model.layers[i], *current, static_cast<int>(i)));
    current = &outputs.back();
  }
  return outputs;
}

Tensor head_forward(const Tensor& feature, const ModelManifest& model) {
  return head_outputs(model, feature, /*include_normalization=*/false).back();
}

}  // namespace mlens
