#pragma once

#include "metric_lens/decompose.hpp"
#include "metric_lens/linearize.hpp"

namespace mlens {

/// Jacobian of E / |E| with respect to E:
///   d(E_i/|E|)/dE_j = (1/|E|)(1 - E_i^2/|E|^2)  if i == j,
///                     -E_i E_j / |E|^3          otherwise.
template <typename Derived>
MatrixX<typename Derived::Scalar> l2norm_jacobian(const Eigen::MatrixBase<Derived>& e) {
  using Scalar = typename Derived::Scalar;
  const Scalar norm = e.norm();
  if (!(norm > Scalar(1e-12))) {
    throw Error(ErrorCode::kDegenerateEmbedding, "Jacobian of L2 normalization at |E| <= 1e-12");
  }
  MatrixX<Scalar> jac = -(e * e.transpose()) / (norm * norm * norm);
  jac.diagonal().array() += Scalar(1) / norm;
  return jac;
}

/// Tensor form: [l] -> [l, l], evaluated in double.
Tensor l2norm_jacobian(const Tensor& embedding);

/// Classification Grad-CAM on a linearized classifier head:
/// map(i,j) = sum_k A_ijk * GAP(dS_c/dA_k), where the gradient is the head's
/// per-position weight W_ij[c, k]. For a flatten + FC head this averages the FC
/// weights over positions; for GMP + FC it spreads (1/mn) w[k,c] over every
/// position.
ActivationMap gradcam_classification(const LinearizedHead& head, const Tensor& A,
                                     Index class_idx);

/// Which parts of the Grad-CAM pipeline to keep. Dropping both yields the
/// Decomposition+Bias overall map.
struct GradCamTerms {
  bool jacobian = true;  // differentiate through E/|E|
  bool gap_step = true;  // average the gradient over positions
};

/// Embedding-space weight vector c such that the map is built from c^T dE/dA.
/// With the Jacobian, c = J(E_q) E_r / |E_r| (gradient of the cosine). Without
/// it, c = E_r / (|E_q||E_r|): the gradient of E_q . E_r scaled by the same Z the
/// decomposition uses.
VectorX<double> gradcam_embedding_weights(const Tensor& E_q, const Tensor& E_r,
                                          bool jacobian);

ActivationMap gradcam_metric(const LinearizedHead& head_q, const Tensor& A_q,
                             const Tensor& E_q, const Tensor& E_r, GradCamTerms terms);

/// Grad-CAM for metric learning (`normalized`) or its "no norm" variant.
/// `clip` applies the ReLU of the original method.
ActivationMap gradcam_metric(const LinearizedHead& head_q, const Tensor& A_q,
                             const Tensor& E_q, const Tensor& E_r, bool normalized,
                             bool clip = false);

}  // namespace mlens
