#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "smds/common.hpp"

namespace smds {

inline Mat symmetrize(const Mat& m) { return 0.5 * (m + m.transpose()); }

/// Symmetrize and clamp eigenvalues at >= jitter.  Idempotent (up to the
/// clamp) on symmetric PSD input.
Mat repair_covariance(const Mat& mat, double jitter = 1e-9);

/// Lower Cholesky factor with jitter escalation (1e-9 then 1e-6 added to the
/// diagonal), falling back to an eigenvalue square root if both fail.
Mat chol_lower_robust(const Mat& spd);

/// LLT-based solve of a symmetric positive definite system, with the same
/// jitter escalation.  Throws NumericError when the matrix stays indefinite.
Mat solve_spd(const Mat& spd, const Mat& rhs);

/// Explicit inverse via symmetric solve against the identity.
Mat inverse_spd(const Mat& spd);

/// log(det(spd)) through the Cholesky factor.
double logdet_spd(const Mat& spd);

/// Solves X = A X A^T + Q for the stationary covariance of a stable linear
/// system by doubling; throws if the spectral radius of A is >= 1.
Mat solve_discrete_lyapunov(const Mat& A, const Mat& Q, int max_iters = 200,
                            double tol = 1e-13);

double spectral_radius(const Mat& A);

}  // namespace smds
