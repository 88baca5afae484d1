#include "smds/linalg.hpp"

#include <cmath>

namespace smds {

Mat repair_covariance(const Mat& mat, double jitter) {
  Mat sym = symmetrize(mat);
  const int n = static_cast<int>(sym.rows());
  // The floor scales with the matrix so that small but healthy covariances
  // pass through untouched.
  const double scale = n > 0 ? sym.cwiseAbs().maxCoeff() : 0.0;
  const double floor = jitter * scale;
  // Cheap certificate first: if sym - floor*I admits a Cholesky factor its
  // eigenvalues already clear the floor and no clamping is needed.
  Eigen::LLT<Mat> llt(sym - floor * Mat::Identity(n, n));
  if (llt.info() == Eigen::Success) return sym;
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  if (es.info() != Eigen::Success) {
    throw NumericError("eigendecomposition failed in repair_covariance");
  }
  Vec ev = es.eigenvalues();
  bool clamped = false;
  for (int i = 0; i < ev.size(); ++i) {
    if (ev(i) < floor) {
      ev(i) = floor;
      clamped = true;
    }
  }
  if (!clamped) return sym;
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

namespace {

bool try_llt(const Mat& m, Eigen::LLT<Mat>& llt) {
  llt.compute(m);
  return llt.info() == Eigen::Success;
}

}  // namespace

Mat chol_lower_robust(const Mat& spd) {
  Mat sym = symmetrize(spd);
  if (sym.size() == 0 || sym.cwiseAbs().maxCoeff() == 0.0) {
    return Mat::Zero(sym.rows(), sym.cols());
  }
  Eigen::LLT<Mat> llt;
  if (try_llt(sym, llt)) return llt.matrixL();
  const int n = static_cast<int>(sym.rows());
  for (double jitter : {1e-9, 1e-6}) {
    if (try_llt(sym + jitter * Mat::Identity(n, n), llt)) {
      return llt.matrixL();
    }
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  if (es.info() != Eigen::Success) {
    throw NumericError("cholesky and eigen fallback both failed");
  }
  Vec ev = es.eigenvalues().cwiseMax(1e-9);
  Mat sqrt_m = es.eigenvectors() * ev.cwiseSqrt().asDiagonal() *
               es.eigenvectors().transpose();
  // Reduce the symmetric square root to a lower triangular factor so callers
  // can rely on the triangular shape.
  Eigen::HouseholderQR<Mat> qr(sqrt_m.transpose());
  Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
  Mat lower = r.transpose();
  for (int j = 0; j < n; ++j) {
    if (lower(j, j) < 0) lower.col(j) = -lower.col(j);
  }
  return lower;
}

Mat solve_spd(const Mat& spd, const Mat& rhs) {
  Mat sym = symmetrize(spd);
  Eigen::LLT<Mat> llt;
  if (try_llt(sym, llt)) return llt.solve(rhs);
  const int n = static_cast<int>(sym.rows());
  for (double jitter : {1e-9, 1e-6}) {
    if (try_llt(sym + jitter * Mat::Identity(n, n), llt)) {
      return llt.solve(rhs);
    }
  }
  throw NumericError("solve_spd: matrix is not positive definite");
}

Mat inverse_spd(const Mat& spd) {
  return solve_spd(spd, Mat::Identity(spd.rows(), spd.cols()));
}

double logdet_spd(const Mat& spd) {
  Mat lower = chol_lower_robust(spd);
  double sum = 0.0;
  for (int i = 0; i < lower.rows(); ++i) {
    sum += std::log(lower(i, i));
  }
  return 2.0 * sum;
}

double spectral_radius(const Mat& A) {
  Eigen::EigenSolver<Mat> es(A);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

Mat solve_discrete_lyapunov(const Mat& A, const Mat& Q, int max_iters,
                            double tol) {
  if (spectral_radius(A) >= 1.0 - 1e-12) {
    throw NumericError("discrete Lyapunov solve requires a stable transition");
  }
  Mat X = symmetrize(Q);
  Mat Ak = A;
  for (int it = 0; it < max_iters; ++it) {
    Mat delta = Ak * X * Ak.transpose();
    X = symmetrize(X + delta);
    Ak = Ak * Ak;
    if (delta.cwiseAbs().maxCoeff() < tol * (1.0 + X.cwiseAbs().maxCoeff())) {
      return X;
    }
  }
  return X;
}

}  // namespace smds
