#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <vector>

namespace hypograd {

// Dimension caps for the per-step hot loops. Dynamic-size Eigen objects with a
// compile-time upper bound live on the stack, so the path kernels never touch
// the allocator. m and d are each bounded by kMaxBlock.
inline constexpr int kMaxBlock = 6;
inline constexpr int kMaxState = 2 * kMaxBlock;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxState, 1>;
using BVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxBlock, 1>;
using SMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxState, kMaxState>;
using BMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxBlock, kMaxBlock>;

template <class M>
M symmetrize(const M& a) {
  return (0.5 * (a + a.transpose())).eval();
}

double lambda_min_sym(const Eigen::Ref<const Eigen::MatrixXd>& a);
double op_norm(const Eigen::Ref<const Eigen::MatrixXd>& a);
double sigma_min(const Eigen::Ref<const Eigen::MatrixXd>& a);

/// Smallest eigenvalue of F F^T computed as sigma_min(F)^2 with a Jacobi SVD.
/// Keeps relative accuracy for graded Gramians whose condition number is far
/// beyond 1/eps, which a direct eigen-solve on F F^T would not.
double lambda_min_from_factor(const Eigen::Ref<const Eigen::MatrixXd>& factor);

Eigen::MatrixXd expm(const Eigen::Ref<const Eigen::MatrixXd>& a);

/// Sum with a fixed binary tree over the index range; the result depends only
/// on the values and their order, never on how they were produced.
double pairwise_sum(std::span<const double> xs);

/// x = A^{-1} b through LU, falling back to (A + shift I)^{-1} b with
/// shift = 1e-12 tr(A)/n when the relative residual exceeds 1e-8.
struct GuardedInverse {
  BMat inverse;
  double shift = 0.0;
};
GuardedInverse guarded_inverse(const BMat& a);

}  // namespace hypograd
