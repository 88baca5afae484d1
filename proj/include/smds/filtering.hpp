#pragma once

#include <vector>

#include "smds/cubature.hpp"
#include "smds/model.hpp"

namespace smds {

/// Predicted spike moments and the effective linear observation they induce.
struct PcfStats {
  Vec n_hat;    // C predicted counts, floored at 1e-12
  Mat L_xn;     // d x C state-count cross covariance
  Mat L_nn;     // C x C count covariance
  Mat C_tilde;  // C x d effective observation matrix
  Mat R_tilde;  // C x C effective observation noise
};

/// Per-step output of the switching filter.
struct SwitchPosterior {
  std::vector<GaussianBelief> per_regime;       // updated beliefs
  std::vector<GaussianBelief> per_regime_pred;  // collapsed-and-predicted
  Vec regime_prob;       // given observations through t
  Vec regime_pred_prob;  // given observations through t-1
  GaussianBelief merged;
};

/// Which observation streams the filter consumes; switching these off yields
/// the single-modality method family on the same data.
struct FilterOptions {
  bool use_spikes = true;
  bool use_fields = true;
};

struct FilterResult {
  SwitchPosterior init;                // t = 0 prior state
  std::vector<SwitchPosterior> steps;  // t = 1..T
};

/// Gaussian field update in information form; tau scales the observation
/// precision.
GaussianBelief kf_update(const GaussianBelief& prior, const Vec& y,
                         const Mat& Cmat, const Mat& R, double tau);

/// Cubature evaluation of the predicted spike moments under the prior.
PcfStats pcf_moments(const GaussianBelief& prior, const Vec& alpha,
                     const Mat& beta, const CubatureSet& cub);

/// Spike update through the effective observation of stats.
GaussianBelief pcf_update(const GaussianBelief& prior, const Vec& n,
                          const PcfStats& stats);

GaussianBelief msnf_predict(const GaussianBelief& post_prev, const Mat& A,
                            const Mat& Q);

/// Fused spike + field update; pass y as null at frames without a field
/// observation and the field terms vanish.
GaussianBelief msnf_update(const GaussianBelief& prior, const Vec& n,
                           const Vec* y, const RegimeParams& rp, double tau,
                           const CubatureSet& cub);

/// Moment-matched mixture of the previous beliefs conditioned on landing in
/// regime j; optionally returns the mixture weights over source regimes.
GaussianBelief smsnf_collapse(const std::vector<GaussianBelief>& beliefs,
                              const Vec& probs, const Mat& Phi, int j,
                              Vec* weights_out = nullptr);

/// Regime posterior from predicted probabilities and the per-regime update
/// results; n or y may be null when that stream is off or missing.
Vec regime_update(const Vec& pred_probs,
                  const std::vector<GaussianBelief>& pred,
                  const std::vector<GaussianBelief>& post, const Vec* n,
                  const Vec* y, const SwitchingModel& model);

/// Full causal pass over a series.
FilterResult smsnf_filter(const SwitchingModel& model,
                          const MultiscaleSeries& series,
                          const FilterOptions& opts = {});

}  // namespace smds
