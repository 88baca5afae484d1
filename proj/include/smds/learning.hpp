#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smds/filtering.hpp"
#include "smds/model.hpp"
#include "smds/rng.hpp"
#include "smds/smoothing.hpp"

namespace smds {

/// Observation streams a fit consumes.  Gaussian-only with M=1 is the
/// classical linear-Gaussian EM, poisson-only the point-process counterpart,
/// multiscale the fused variant; M>1 gives the switching form of each.
enum class Modality { kMultiscale, kGaussianOnly, kPoissonOnly };

FilterOptions filter_options_for(Modality modality);

struct EmConfig {
  int M = 2;
  int d = 10;
  int max_iters = 300;
  Modality modality = Modality::kMultiscale;
  double tau = 1.0;
  bool share_observation_params = false;
  uint64_t seed = 0;
  double init_A_scale = 0.9;
  double init_stay_prob = 0.995;
  double convergence_tol = 0.0;  // relative objective change; <= 0 disables
  int newton_max_iters = 50;
  // gradient norms below ~1e-6 sit at the rounding floor of the summed
  // objective, so a tighter tolerance only burns iterations
  double newton_tol = 1e-5;
};

void validate_em_config(const EmConfig& cfg);

struct EmIterate {
  double ell;           // expected complete-data log-likelihood before M-step
  double delta_params;  // largest absolute parameter change in the M-step
  double seconds;       // wall time of the iteration
};

struct EmTrace {
  std::vector<EmIterate> iters;
  std::vector<std::string> warnings;
};

/// Random starting model: A = init_A_scale * I, Q = I, near-diagonal Phi,
/// uniform pi0, standard-normal state prior, baselines matched to mean spike
/// counts, small random loadings, field noise from sample variances.  Draws
/// are independent of modality so one seed gives every method the same start.
SwitchingModel init_params(const EmConfig& cfg, const MultiscaleSeries& series,
                           Rng& rng);

struct EStepResult {
  SmoothedStats stats;
  double ell;
};

/// Expected complete-data log-likelihood of the model under given smoothed
/// statistics, dropping the terms of streams disabled in opts and the spike
/// factorial constant.
double expected_complete_ll(const SwitchingModel& model,
                            const MultiscaleSeries& series,
                            const SmoothedStats& stats,
                            const FilterOptions& opts = {});

/// Filter + smoother pass and the expected complete-data log-likelihood under
/// the current parameters.  Terms of disabled streams are dropped; the spike
/// factorial constant is omitted throughout.
EStepResult e_step(const SwitchingModel& model, const MultiscaleSeries& series,
                   const FilterOptions& opts = {});

/// Closed-form parameter updates from smoothed statistics.  Field sums run
/// over mask-true steps only; ridge 1e-8 stabilizes every normal-equation
/// solve; covariances are repaired after each update.  Streams disabled by
/// cfg.modality keep the previous parameters.
SwitchingModel m_step(const SmoothedStats& stats,
                      const MultiscaleSeries& series, const EmConfig& cfg,
                      const SwitchingModel& prev,
                      std::vector<std::string>* warnings = nullptr);

/// Spike parameter update: per neuron and regime, damped Newton with
/// backtracking on the concave expected Poisson log-likelihood, warm-started
/// from prev.  With share_observation_params one shared set is fit with unit
/// regime weights and copied to every regime.
void m_step_poisson(const SmoothedStats& stats, const MultiscaleSeries& series,
                    const EmConfig& cfg, const SwitchingModel& prev,
                    std::vector<Vec>& alphas, std::vector<Mat>& betas,
                    std::vector<std::string>* warnings = nullptr);

struct EmResult {
  SwitchingModel model;
  EmTrace trace;
};

/// Full unsupervised fit: init_params then alternating e_step / m_step for
/// max_iters, with optional early stop once the relative objective change
/// stays below convergence_tol for five consecutive iterations.
///
/// When init is given, its dynamics and initial-state blocks replace the
/// random start, along with whichever observation blocks it carries; missing
/// blocks keep the random initialization. Without init, multiscale fits on
/// series with both streams first run a short field-only sub-fit and start
/// from its solution: the linear-Gaussian subproblem pins the field-visible
/// subspace in a few cheap iterations that the fused fit would otherwise
/// spend most of its budget rediscovering.
EmResult em_fit(const MultiscaleSeries& series, const EmConfig& cfg,
                const SwitchingModel* init = nullptr);

}  // namespace smds
