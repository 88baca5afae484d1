#pragma once

#include <optional>
#include <string>
#include <vector>

#include "smds/common.hpp"

namespace smds {

/// Gaussian state estimate: mean and covariance of the latent vector.
struct GaussianBelief {
  Vec mean;
  Mat cov;
};

/// Parameters of one regime: linear dynamics, Poisson spike map, and linear
/// Gaussian field map.
struct RegimeParams {
  Mat A;      // d x d state transition
  Mat Q;      // d x d state noise covariance
  Vec alpha;  // C baseline log rates, log(lambda * dt_s)
  Mat beta;   // C x d latent-to-log-rate loadings
  Mat C;      // F x d latent-to-field map
  Mat R;      // F x F field noise covariance
};

/// Full switching model.  Phi is column-stochastic: Phi(j, i) is the
/// probability of moving to regime j given the previous regime was i, with
/// regimes labelled 1..M externally and 0..M-1 in storage.
struct SwitchingModel {
  std::vector<RegimeParams> regimes;
  Mat Phi;      // M x M transition, columns sum to 1
  Vec pi0;      // M initial regime distribution
  Vec mu0;      // d initial latent mean, shared across regimes
  Mat Lambda0;  // d x d initial latent covariance, shared across regimes
  double tau = 1.0;
  double dt_ms = 10.0;
  int field_period_steps = 5;

  int num_regimes() const { return static_cast<int>(regimes.size()); }
  int latent_dim() const {
    return regimes.empty() ? 0 : static_cast<int>(regimes[0].A.rows());
  }
  int num_cells() const {
    return regimes.empty() ? 0 : static_cast<int>(regimes[0].alpha.size());
  }
  int num_fields() const {
    return regimes.empty() ? 0 : static_cast<int>(regimes[0].C.rows());
  }
  double dt_s() const { return dt_ms / 1000.0; }
};

/// One recorded session: spike counts and field features on a common clock,
/// with a mask marking the slower field frames.  All matrices are T x dim;
/// optional blocks are empty when absent.  latents has T+1 rows, row 0 being
/// the initial state before the first observation.
struct MultiscaleSeries {
  Eigen::MatrixXi spikes;       // T x C counts
  Mat fields;                   // T x F, rows valid only where masked
  std::vector<char> field_mask; // length T, nonzero where a frame exists
  Mat behavior;                 // T x B or empty
  std::vector<int> regimes;     // length T, 1-based, or empty
  Mat latents;                  // (T+1) x d or empty
  double dt_ms = 10.0;
  int field_period_steps = 5;

  int num_steps() const { return static_cast<int>(spikes.rows()); }
  int num_cells() const { return static_cast<int>(spikes.cols()); }
  int num_fields() const { return static_cast<int>(fields.cols()); }
  bool has_field(int t) const {
    return t >= 0 && t < static_cast<int>(field_mask.size()) && field_mask[t];
  }
};

/// Checks every structural invariant and returns one message per violation;
/// empty means the model is usable.
std::vector<std::string> validate_model(const SwitchingModel& model);

/// JSON round trip.  serialize_model followed by deserialize_model restores
/// every finite parameter exactly.
std::string serialize_model(const SwitchingModel& model);
SwitchingModel deserialize_model(const std::string& text);

}  // namespace smds
