#include "metric_lens/gradcam.hpp"

namespace mlens {

Tensor l2norm_jacobian(const Tensor& embedding) {
  if (embedding.rank() != 1) {
    throw Error(ErrorCode::kShapeMismatch, "embedding must be a vector");
  }
  const VectorX<double> e = embedding.values().cast<double>();
  const RowMatrixX<double> jac = l2norm_jacobian(e);
  const Index l = e.size();
  return Tensor(Shape{l, l}, Eigen::Map<const VectorX<double>>(jac.data(), l * l).cast<float>());
}

namespace {

// GAP of the per-position weights: (1/mn) sum_ij W_ij, an [l, p] matrix.
MatrixX<double> averaged_weights(const LinearizedHead& head) {
  const Index l = head.embedding_length(), p = head.channels();
  MatrixX<double> sum = MatrixX<double>::Zero(l, p);
  for (Index i = 0; i < head.rows(); ++i) {
    for (Index j = 0; j < head.cols(); ++j) sum += head.block(i, j).cast<double>();
  }
  return sum / static_cast<double>(head.positions());
}

}  // namespace

ActivationMap gradcam_classification(const LinearizedHead& head, const Tensor& A,
                                     Index class_idx) {
  if (A.shape() != head.feature_shape()) {
    throw Error(ErrorCode::kShapeMismatch, "feature does not match head");
  }
  if (class_idx < 0 || class_idx >= head.embedding_length()) {
    throw Error(ErrorCode::kInvalidArgument, "class index out of range");
  }
  const VectorX<double> alpha = averaged_weights(head).row(class_idx).transpose();
  const VectorX<double> map = A.as_rows(head.positions()).cast<double>() * alpha;
  return {Tensor(Shape{head.rows(), head.cols()}, map.cast<float>()), MapVariant::kGradCam};
}

VectorX<double> gradcam_embedding_weights(const Tensor& E_q, const Tensor& E_r,
                                          bool jacobian) {
  if (E_q.size() != E_r.size()) {
    throw Error(ErrorCode::kEmbeddingLengthMismatch, "query and reference embeddings differ in length");
  }
  const VectorX<double> eq = E_q.values().cast<double>();
  const VectorX<double> er = E_r.values().cast<double>();
  const double nq = eq.norm(), nr = er.norm();
  if (!(nq > 1e-12) || !(nr > 1e-12)) {
    throw Error(ErrorCode::kDegenerateEmbedding, "zero embedding");
  }
  if (jacobian) return l2norm_jacobian(eq) * er / nr;
  return er / (nq * nr);
}

ActivationMap gradcam_metric(const LinearizedHead& head_q, const Tensor& A_q,
                             const Tensor& E_q, const Tensor& E_r, GradCamTerms terms) {
  if (E_q.size() != head_q.embedding_length()) {
    throw Error(ErrorCode::kEmbeddingLengthMismatch, "embedding length does not match head");
  }
  const VectorX<double> c = gradcam_embedding_weights(E_q, E_r, terms.jacobian);
  VectorX<double> map;
  if (terms.gap_step) {
    if (A_q.shape() != head_q.feature_shape()) {
      throw Error(ErrorCode::kShapeMismatch, "feature does not match head");
    }
    const VectorX<double> alpha = averaged_weights(head_q).transpose() * c;  // [p]
    map = A_q.as_rows(head_q.positions()).cast<double>() * alpha;
  } else {
    map = head_q.contributions(A_q) * c;
  }
  return {Tensor(Shape{head_q.rows(), head_q.cols()}, map.cast<float>()),
          terms.jacobian ? MapVariant::kGradCam : MapVariant::kGradCamNoNorm};
}

ActivationMap gradcam_metric(const LinearizedHead& head_q, const Tensor& A_q,
                             const Tensor& E_q, const Tensor& E_r, bool normalized,
                             bool clip) {
  ActivationMap out = gradcam_metric(head_q, A_q, E_q, E_r,
                                     GradCamTerms{.jacobian = normalized, .gap_step = true});
  if (clip) out.values.values() = out.values.values().cwiseMax(0.0f);
  return out;
}

}  // namespace mlens
