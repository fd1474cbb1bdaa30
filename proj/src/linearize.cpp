#include "metric_lens/linearize.hpp"

#include <functional>
#include <string_view>
#include <variant>

#include "metric_lens/tensor_io.hpp"

namespace mlens {

Eigen::Map<const RowMatrixX<float>> LinearizedHead::block(Index i, Index j) const {
  const Index l = embedding_length(), p = channels();
  return {W.values().data() + (i * cols() + j) * l * p, l, p};
}

MatrixX<double> LinearizedHead::contributions(const Tensor& A) const {
  if (A.shape() != feature_shape()) {
    throw Error(ErrorCode::kShapeMismatch, "feature " + shape_to_string(A.shape()) +
                                               " does not match head " +
                                               shape_to_string(feature_shape()));
  }
  const Index l = embedding_length(), p = channels();
  const auto feats = A.as_rows(positions());  // [mn, p]
  MatrixX<double> u(positions(), l);
  for (Index r = 0; r < positions(); ++r) {
    const Eigen::Map<const RowMatrixX<float>> w(W.values().data() + r * l * p, l, p);
    u.row(r) = (w.cast<double>() * feats.row(r).transpose().cast<double>()).transpose();
  }
  return u;
}

VectorX<double> LinearizedHead::apply(const Tensor& A) const {
  return contributions(A).colwise().sum().transpose() + B.values().cast<double>();
}

bool LinearizedHead::bound_to(const Tensor& A) const {
  return operating_point_hash == mlens::operating_point_hash(A);
}

std::uint64_t operating_point_hash(const Tensor& A) {
  std::string bytes(reinterpret_cast<const char*>(A.values().data()),
                    static_cast<std::size_t>(A.size()) * sizeof(float));
  for (Index d : A.shape()) bytes += "|" + std::to_string(d);
  return static_cast<std::uint64_t>(std::hash<std::string_view>{}(bytes));
}

MaxMask gmp_mask(const Tensor& A) {
  if (A.rank() != 3) throw Error(ErrorCode::kShapeMismatch, "gmp_mask expects [m,n,p]");
  const Index positions = A.dim(0) * A.dim(1), p = A.dim(2);
  const auto rows = A.as_rows(positions);
  MaxMask out{Tensor(A.shape())};
  auto mask = Eigen::Map<RowMatrixX<float>>(out.mask.values().data(), positions, p);
  for (Index k = 0; k < p; ++k) {
    Index best = 0;
    for (Index r = 1; r < positions; ++r) {
      if (rows(r, k) > rows(best, k)) best = r;
    }
    mask(best, k) = 1.0f;
  }
  return out;
}

Tensor gmp_matrix(const MaxMask& mask) {
  const Index m = mask.mask.dim(0), n = mask.mask.dim(1), p = mask.mask.dim(2);
  // Exact 1/(mn) here so that mn * 1/(mn) rounds to exactly 1.
  const BasicTensor<double> gap = gap_matrix<double>(m, n, p);
  const double mn = static_cast<double>(m * n);
  Tensor t(gap.shape());
  for (Index k = 0; k < p; ++k) {
    for (Index i = 0; i < m; ++i) {
      for (Index j = 0; j < n; ++j) {
        t(k, i, j, k) = static_cast<float>(mn * gap(k, i, j, k) * mask.mask(i, j, k));
      }
    }
  }
  return t;
}

ReluMask relu_mask(const Tensor& pre_activation) {
  ReluMask out{pre_activation};
  out.mask.values() = (pre_activation.values().array() > 0.0f).cast<float>();
  return out;
}

VectorX<double> apply_pooling_matrix(const Tensor& T, const Tensor& A) {
  if (T.rank() != 4 || T.dim(1) * T.dim(2) * T.dim(3) != A.size()) {
    throw Error(ErrorCode::kShapeMismatch, "pooling matrix " + shape_to_string(T.shape()) +
                                               " vs feature " + shape_to_string(A.shape()));
  }
  const auto mat = T.as_rows(T.dim(0));
  VectorX<double> out(T.dim(0));
  for (Index r = 0; r < mat.rows(); ++r) {
    double acc = 0.0;
    for (Index c = 0; c < mat.cols(); ++c) {
      acc += static_cast<double>(mat(r, c)) * static_cast<double>(A[c]);
    }
    out[r] = acc;
  }
  return out;
}

namespace {

// Affine map from the flattened feature (length mnp) to the current activation.
// Elementwise layers keep it diagonal until the first layer that mixes units.
struct DiagonalMap {
  VectorX<double> scale;
  VectorX<double> offset;
};
struct DenseMap {
  MatrixX<double> matrix;
  VectorX<double> offset;
};
using AffineState = std::variant<DiagonalMap, DenseMap>;

void apply_unit_affine(AffineState& state, const VectorX<double>& scale,
                       const VectorX<double>& shift) {
  if (auto* d = std::get_if<DiagonalMap>(&state)) {
    d->scale = d->scale.cwiseProduct(scale);
    d->offset = d->offset.cwiseProduct(scale) + shift;
  } else {
    auto& dense = std::get<DenseMap>(state);
    dense.matrix = scale.asDiagonal() * dense.matrix;
    dense.offset = dense.offset.cwiseProduct(scale) + shift;
  }
}

// Expands per-channel parameters to every unit of an activation whose last axis
// has `channels` entries.
VectorX<double> broadcast_channels(const VectorX<double>& per_channel, Index units) {
  const Index c = per_channel.size();
  VectorX<double> out(units);
  for (Index u = 0; u < units; ++u) out[u] = per_channel[u % c];
  return out;
}

}  // namespace

LinearizedHead linearize_head(const ModelManifest& model, const ForwardTrace& trace) {
  const Tensor& A = trace.conv_feature;
  if (A.rank() != 3) throw Error(ErrorCode::kShapeMismatch, "conv feature must be [m,n,p]");
  const Index m = A.dim(0), n = A.dim(1), p = A.dim(2);
  const Index units = m * n * p;
  const auto first = static_cast<std::size_t>(model.last_conv_index) + 1;
  if (trace.layer_outputs.size() != model.layers.size()) {
    throw Error(ErrorCode::kShapeMismatch, "trace does not belong to this model");
  }

  LinearizedHead head;
  AffineState state = DiagonalMap{VectorX<double>::Ones(units), VectorX<double>::Zero(units)};
  bool reduced = false;

  for (std::size_t li = first; li < model.layers.size(); ++li) {
    const LayerSpec& layer = model.layers[li];
    const Tensor& input = li == first ? A : trace.layer_outputs[li - 1];
    switch (layer.kind) {
      case LayerKind::kRelu: {
        const VectorX<double> mask = relu_mask(input).mask.values().cast<double>();
        apply_unit_affine(state, mask, VectorX<double>::Zero(mask.size()));
        break;
      }
      case LayerKind::kBatchNorm: {
        const Index size = input.size();
        apply_unit_affine(state, broadcast_channels(layer.bn.scale(), size),
                          broadcast_channels(layer.bn.shift(), size));
        break;
      }
      case LayerKind::kGlobalAvgPool:
      case LayerKind::kGlobalMaxPool: {
        const auto& diag = std::get<DiagonalMap>(state);
        const bool is_max = layer.kind == LayerKind::kGlobalMaxPool;
        const Tensor pool = is_max ? gmp_matrix(gmp_mask(input)) : gap_matrix<float>(m, n, p);
        const auto pool_rows = pool.as_rows(p);  // [p, mnp]
        DenseMap dense{MatrixX<double>::Zero(p, units), VectorX<double>::Zero(p)};
        for (Index k = 0; k < p; ++k) {
          for (Index u = k; u < units; u += p) {
            const double t = pool_rows(k, u);
            if (t == 0.0) continue;
            dense.matrix(k, u) = t * diag.scale[u];
            dense.offset[k] += t * diag.offset[u];
          }
        }
        state = std::move(dense);
        head.reducer = is_max ? HeadReducer::kGlobalMaxPool : HeadReducer::kGlobalAvgPool;
        reduced = true;
        break;
      }
      case LayerKind::kFlatten:
        head.reducer = HeadReducer::kFlatten;
        reduced = true;
        break;
      case LayerKind::kFullyConnected: {
        const MatrixX<double> w = layer.weight.matrix().cast<double>();
        const VectorX<double> b = layer.bias.empty()
                                      ? VectorX<double>::Zero(w.rows())
                                      : VectorX<double>(layer.bias.values().cast<double>());
        if (auto* d = std::get_if<DiagonalMap>(&state)) {
          state = DenseMap{w * d->scale.asDiagonal(), w * d->offset + b};
        } else {
          auto& dense = std::get<DenseMap>(state);
          state = DenseMap{w * dense.matrix, w * dense.offset + b};
        }
        break;
      }
      case LayerKind::kL2Normalize:
        break;  // E is the pre-normalization embedding
      case LayerKind::kConv2d:
        throw Error(ErrorCode::kUnsupportedHead,
                    "layer " + std::to_string(li) + " (conv2d) follows the conv feature map");
    }
  }
  if (!reduced) {
    throw Error(ErrorCode::kUnsupportedHead, "head has no pooling or flatten layer");
  }

  DenseMap dense;
  if (auto* d = std::get_if<DiagonalMap>(&state)) {
    dense = DenseMap{d->scale.asDiagonal().toDenseMatrix(), d->offset};
  } else {
    dense = std::get<DenseMap>(std::move(state));
  }
  const Index l = dense.matrix.rows();
  head.W = Tensor(Shape{m, n, l, p});
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < n; ++j) {
      for (Index o = 0; o < l; ++o) {
        for (Index k = 0; k < p; ++k) {
          head.W(i, j, o, k) = static_cast<float>(dense.matrix(o, (i * n + j) * p + k));
        }
      }
    }
  }
  head.W.ensure_finite();
  head.B = Tensor(Shape{l}, dense.offset.cast<float>());
  head.operating_point_hash = operating_point_hash(A);
  return head;
}

LinearizedHead linearize_head(const ModelManifest& model, const Tensor& A) {
  ForwardTrace trace;
  trace.conv_feature = A;
  trace.layer_outputs.resize(model.layers.size());
  std::vector<Tensor> outputs = head_outputs(model, A, /*include_normalization=*/false);
  const auto first = static_cast<std::size_t>(model.last_conv_index) + 1;
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    trace.layer_outputs[first + k] = std::move(outputs[k]);
  }
  trace.layer_outputs[first - 1] = A;
  return linearize_head(model, trace);
}

void save_linearized_head(const LinearizedHead& head, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_tensor(head.W, dir / "W.tnsr");
  write_tensor(head.B, dir / "B.tnsr");
}

}  // namespace mlens
