#include "hypograd/linalg.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>

namespace hypograd {

double lambda_min_sym(const Eigen::Ref<const Eigen::MatrixXd>& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(Eigen::MatrixXd(a)),
                                                    Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

double op_norm(const Eigen::Ref<const Eigen::MatrixXd>& a) {
  if (a.size() == 0) return 0.0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  return svd.singularValues()(0);
}

double sigma_min(const Eigen::Ref<const Eigen::MatrixXd>& a) {
  if (a.size() == 0) return 0.0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  const auto& s = svd.singularValues();
  if (a.rows() > a.cols()) return 0.0;  // rank-deficient as a map onto R^rows
  return s(s.size() - 1);
}

double lambda_min_from_factor(const Eigen::Ref<const Eigen::MatrixXd>& factor) {
  // F^T has graded columns; QR with column pivoting followed by Jacobi sweeps
  // resolves tiny singular values to high relative accuracy.
  Eigen::MatrixXd ft = factor.transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd, Eigen::ColPivHouseholderQRPreconditioner> svd(ft);
  const auto& s = svd.singularValues();
  if (factor.rows() > factor.cols()) return 0.0;
  const double smin = s(s.size() - 1);
  return smin * smin;
}

Eigen::MatrixXd expm(const Eigen::Ref<const Eigen::MatrixXd>& a) {
  Eigen::MatrixXd m = a;
  return m.exp();
}

double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

GuardedInverse guarded_inverse(const BMat& a) {
  const auto n = a.rows();
  const BMat id = BMat::Identity(n, n);
  GuardedInverse out;
  Eigen::PartialPivLU<BMat> lu(a);
  out.inverse = lu.solve(id);
  const double resid = (a * out.inverse - id).norm();
  if (std::isfinite(resid) && resid <= 1e-8 * std::sqrt(static_cast<double>(n))) {
    return out;
  }
  out.shift = 1e-12 * std::abs(a.trace()) / static_cast<double>(n);
  if (out.shift == 0.0) out.shift = 1e-300;
  const BMat reg = a + out.shift * id;
  Eigen::PartialPivLU<BMat> lu2(reg);
  out.inverse = lu2.solve(id);
  return out;
}

}  // namespace hypograd
