#pragma once

#include <array>
#include <vector>

#include "smds/model.hpp"
#include "smds/rng.hpp"

namespace smds {

enum class ModeTag { kShared, kSpikeOnly, kFieldOnly };

/// Generation settings for random systems.  Latent dimensions come in
/// conjugate pairs; each pair is tagged as shared across modalities or
/// exclusive to spikes or fields, and observation loadings are zeroed on the
/// pairs the modality does not see.
struct SimConfig {
  int d = 10;
  int C = 30;
  int F = 30;
  int M = 2;
  int T_train = 10000;
  int T_test = 10000;
  double dt_ms = 10.0;
  int field_period_steps = 5;
  double stay_prob = 0.99;
  std::array<double, 2> eig_radius_range = {0.99, 0.995};
  std::array<double, 2> eig_angle_range = {0.0, 0.063};
  int shared_mode_pairs = 3;
  int spike_only_pairs = 1;
  int field_only_pairs = 1;
  std::array<double, 2> q_eig_range = {0.01, 0.04};
  std::array<double, 2> base_rate_hz_range = {6.0, 9.0};
  std::array<double, 2> max_rate_hz_range = {40.0, 50.0};
  std::array<double, 2> field_value_range = {26.0, 30.0};
  std::array<double, 2> snr_range = {0.3, 0.35};
  int behavior_dims = 2;
  double behavior_noise_std = 0.3;
  uint64_t seed = 0;
};

/// Linear readout used to synthesize behavior traces from the latent state.
struct BehaviorMap {
  Mat H;             // B x d
  double noise_std;  // additive Gaussian noise per dimension
};

void validate_sim_config(const SimConfig& cfg);

/// Block-diagonal rotation-scaling dynamics plus diagonal state noise; tags
/// record the modality assignment of each conjugate pair.
void random_dynamics(const SimConfig& cfg, Rng& rng, Mat& A, Mat& Q,
                     std::vector<ModeTag>& pair_tags);

/// Baselines from the base-rate range; loadings scaled so the rate reaches a
/// max-range draw at three stationary standard deviations, with zero loading
/// on field-only pairs.
void random_poisson_params(const SimConfig& cfg,
                           const std::vector<ModeTag>& pair_tags,
                           const Mat& stationary_cov, Rng& rng, Vec& alpha,
                           Mat& beta);

/// Field rows scaled so twice the stationary signal std lands in the value
/// range, zero loading on spike-only pairs; diagonal R set from an SNR draw.
void random_field_params(const SimConfig& cfg,
                         const std::vector<ModeTag>& pair_tags,
                         const Mat& stationary_cov, Rng& rng, Mat& Cmat,
                         Mat& R);

SwitchingModel random_switching_model(const SimConfig& cfg, Rng& rng);

/// Random linear behavior readout with unit signal std per dimension.
BehaviorMap random_behavior_map(const SimConfig& cfg, const Mat& stationary_cov,
                                Rng& rng);

/// Samples a series from the model: regime chain, latent states, spike
/// counts, masked field frames, and optional behavior.  Ground-truth latents
/// and regimes are stored in the output.
MultiscaleSeries simulate_series(const SwitchingModel& model, int T, Rng& rng,
                                 const BehaviorMap* behavior = nullptr);

/// Stationary covariance of one regime's linear dynamics.
Mat stationary_cov_of(const RegimeParams& rp);

}  // namespace smds
