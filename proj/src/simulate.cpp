#include "smds/simulate.hpp"

#include <cmath>
#include <sstream>

#include "smds/linalg.hpp"

namespace smds {

namespace {

double draw_range(Rng& rng, const std::array<double, 2>& range) {
  return rng.uniform(range[0], range[1]);
}

void check_range(const std::array<double, 2>& range, const char* name) {
  if (range[0] > range[1]) {
    throw ConfigError(std::string("sim config: empty range for ") + name);
  }
}

// Unit-norm direction supported on the dimensions of the allowed pairs.
Vec random_direction(const SimConfig& cfg, const std::vector<ModeTag>& tags,
                     ModeTag excluded, Rng& rng) {
  Vec u = Vec::Zero(cfg.d);
  double norm2 = 0.0;
  while (norm2 == 0.0) {
    for (int p = 0; p < cfg.d / 2; ++p) {
      if (tags[p] == excluded) continue;
      u(2 * p) = rng.normal();
      u(2 * p + 1) = rng.normal();
    }
    norm2 = u.squaredNorm();
  }
  return u / std::sqrt(norm2);
}

}  // namespace

void validate_sim_config(const SimConfig& cfg) {
  if (cfg.d < 2 || cfg.d % 2 != 0) {
    throw ConfigError("sim config: latent dimension must be even and >= 2");
  }
  if (cfg.shared_mode_pairs + cfg.spike_only_pairs + cfg.field_only_pairs !=
      cfg.d / 2) {
    throw ConfigError("sim config: mode pair counts must sum to d/2");
  }
  if (cfg.C < 0 || cfg.F < 0 || cfg.M < 1) {
    throw ConfigError("sim config: negative counts or no regimes");
  }
  if (cfg.stay_prob < 0.0 || cfg.stay_prob > 1.0) {
    throw ConfigError("sim config: stay_prob outside [0,1]");
  }
  if (cfg.field_period_steps < 1 || cfg.dt_ms <= 0.0) {
    throw ConfigError("sim config: bad timing");
  }
  check_range(cfg.eig_radius_range, "eigenvalue radius");
  check_range(cfg.eig_angle_range, "eigenvalue angle");
  check_range(cfg.q_eig_range, "state noise eigenvalues");
  check_range(cfg.base_rate_hz_range, "base rate");
  check_range(cfg.max_rate_hz_range, "max rate");
  check_range(cfg.field_value_range, "field value");
  check_range(cfg.snr_range, "snr");
  if (cfg.eig_radius_range[1] >= 1.0) {
    throw ConfigError("sim config: eigenvalue radius must stay below 1");
  }
}

void random_dynamics(const SimConfig& cfg, Rng& rng, Mat& A, Mat& Q,
                     std::vector<ModeTag>& pair_tags) {
  validate_sim_config(cfg);
  const int n_pairs = cfg.d / 2;
  A = Mat::Zero(cfg.d, cfg.d);
  Q = Mat::Zero(cfg.d, cfg.d);
  pair_tags.clear();
  for (int p = 0; p < n_pairs; ++p) {
    double r = draw_range(rng, cfg.eig_radius_range);
    double th = draw_range(rng, cfg.eig_angle_range);
    int i = 2 * p;
    A(i, i) = r * std::cos(th);
    A(i, i + 1) = -r * std::sin(th);
    A(i + 1, i) = r * std::sin(th);
    A(i + 1, i + 1) = r * std::cos(th);
    Q(i, i) = draw_range(rng, cfg.q_eig_range);
    Q(i + 1, i + 1) = draw_range(rng, cfg.q_eig_range);
    if (p < cfg.shared_mode_pairs) {
      pair_tags.push_back(ModeTag::kShared);
    } else if (p < cfg.shared_mode_pairs + cfg.spike_only_pairs) {
      pair_tags.push_back(ModeTag::kSpikeOnly);
    } else {
      pair_tags.push_back(ModeTag::kFieldOnly);
    }
  }
}

void random_poisson_params(const SimConfig& cfg,
                           const std::vector<ModeTag>& pair_tags,
                           const Mat& stationary_cov, Rng& rng, Vec& alpha,
                           Mat& beta) {
  alpha = Vec(cfg.C);
  beta = Mat::Zero(cfg.C, cfg.d);
  Vec stat_std = stationary_cov.diagonal().cwiseSqrt();
  for (int c = 0; c < cfg.C; ++c) {
    double base_hz = draw_range(rng, cfg.base_rate_hz_range);
    double max_hz = draw_range(rng, cfg.max_rate_hz_range);
    alpha(c) = std::log(base_hz * cfg.dt_ms / 1000.0);
    Vec u = random_direction(cfg, pair_tags, ModeTag::kFieldOnly, rng);
    // Peak log-rate gain over the box |x_i| <= 3 std_i is 3 sum |u_i| std_i;
    // scale so the rate tops out at the max-rate draw there.
    double reach = 3.0 * u.cwiseAbs().dot(stat_std);
    double gain = std::log(max_hz / base_hz) / reach;
    beta.row(c) = (gain * u).transpose();
  }
}

void random_field_params(const SimConfig& cfg,
                         const std::vector<ModeTag>& pair_tags,
                         const Mat& stationary_cov, Rng& rng, Mat& Cmat,
                         Mat& R) {
  Cmat = Mat::Zero(cfg.F, cfg.d);
  R = Mat::Zero(cfg.F, cfg.F);
  for (int f = 0; f < cfg.F; ++f) {
    Vec u = random_direction(cfg, pair_tags, ModeTag::kSpikeOnly, rng);
    double amplitude = draw_range(rng, cfg.field_value_range);
    double snr = draw_range(rng, cfg.snr_range);
    double signal_var = u.dot(stationary_cov * u);
    double scale = amplitude / (2.0 * std::sqrt(signal_var));
    Cmat.row(f) = (scale * u).transpose();
    double scaled_var = scale * scale * signal_var;
    R(f, f) = scaled_var / (snr * snr);
  }
}

Mat stationary_cov_of(const RegimeParams& rp) {
  return solve_discrete_lyapunov(rp.A, rp.Q);
}

SwitchingModel random_switching_model(const SimConfig& cfg, Rng& rng) {
  validate_sim_config(cfg);
  SwitchingModel model;
  model.dt_ms = cfg.dt_ms;
  model.field_period_steps = cfg.field_period_steps;
  model.tau = 1.0;
  for (int j = 0; j < cfg.M; ++j) {
    RegimeParams rp;
    std::vector<ModeTag> tags;
    random_dynamics(cfg, rng, rp.A, rp.Q, tags);
    Mat stat = solve_discrete_lyapunov(rp.A, rp.Q);
    random_poisson_params(cfg, tags, stat, rng, rp.alpha, rp.beta);
    random_field_params(cfg, tags, stat, rng, rp.C, rp.R);
    model.regimes.push_back(std::move(rp));
  }
  if (cfg.M == 1) {
    model.Phi = Mat::Constant(1, 1, 1.0);
  } else {
    model.Phi =
        Mat::Constant(cfg.M, cfg.M, (1.0 - cfg.stay_prob) / (cfg.M - 1));
    for (int j = 0; j < cfg.M; ++j) model.Phi(j, j) = cfg.stay_prob;
  }
  model.pi0 = Vec::Constant(cfg.M, 1.0 / cfg.M);
  model.mu0 = Vec::Zero(cfg.d);
  model.Lambda0 = solve_discrete_lyapunov(model.regimes[0].A, model.regimes[0].Q);
  return model;
}

BehaviorMap random_behavior_map(const SimConfig& cfg, const Mat& stationary_cov,
                                Rng& rng) {
  BehaviorMap map;
  map.H = Mat::Zero(cfg.behavior_dims, cfg.d);
  for (int b = 0; b < cfg.behavior_dims; ++b) {
    Vec u = Vec(cfg.d);
    for (int i = 0; i < cfg.d; ++i) u(i) = rng.normal();
    u.normalize();
    double signal_std = std::sqrt(u.dot(stationary_cov * u));
    map.H.row(b) = (u / signal_std).transpose();
  }
  map.noise_std = cfg.behavior_noise_std;
  return map;
}

MultiscaleSeries simulate_series(const SwitchingModel& model, int T, Rng& rng,
                                 const BehaviorMap* behavior) {
  std::vector<std::string> violations = validate_model(model);
  if (!violations.empty()) {
    throw ConfigError("simulate_series: invalid model: " + violations[0]);
  }
  const int d = model.latent_dim();
  const int C = model.num_cells();
  const int F = model.num_fields();
  const int M = model.num_regimes();
  const int B = behavior ? static_cast<int>(behavior->H.rows()) : 0;

  MultiscaleSeries series;
  series.dt_ms = model.dt_ms;
  series.field_period_steps = model.field_period_steps;
  series.spikes = Eigen::MatrixXi::Zero(T, C);
  series.fields = Mat::Zero(T, F);
  series.field_mask.assign(T, 0);
  series.behavior = B > 0 ? Mat::Zero(T, B) : Mat();
  series.regimes.assign(T, 0);
  series.latents = Mat::Zero(T + 1, d);

  Mat L0 = chol_lower_robust(model.Lambda0);
  Vec x = model.mu0 + L0 * rng.normal_vec(d);
  series.latents.row(0) = x.transpose();

  std::vector<Mat> chol_q, chol_r;
  chol_q.reserve(M);
  chol_r.reserve(M);
  for (const RegimeParams& rp : model.regimes) {
    chol_q.push_back(chol_lower_robust(rp.Q));
    chol_r.push_back(F > 0 ? chol_lower_robust(rp.R) : Mat());
  }

  int s = 0;
  {
    double u = rng.uniform();
    double acc = 0.0;
    for (int j = 0; j < M; ++j) {
      acc += model.pi0(j);
      if (u < acc) {
        s = j;
        break;
      }
    }
  }
  for (int t = 1; t <= T; ++t) {
    if (t > 1) {
      double u = rng.uniform();
      double acc = 0.0;
      int next = M - 1;
      for (int j = 0; j < M; ++j) {
        acc += model.Phi(j, s);
        if (u < acc) {
          next = j;
          break;
        }
      }
      s = next;
    }
    const RegimeParams& rp = model.regimes[s];
    x = rp.A * x + chol_q[s] * rng.normal_vec(d);
    series.latents.row(t) = x.transpose();
    series.regimes[t - 1] = s + 1;

    for (int c = 0; c < C; ++c) {
      double log_mean = rp.alpha(c) + rp.beta.row(c).dot(x);
      if (log_mean > 30.0) {
        std::ostringstream msg;
        msg << "simulate_series: rate overflow at step " << t << " neuron "
            << c + 1 << " (log mean " << log_mean << ")";
        throw NumericError(msg.str());
      }
      series.spikes(t - 1, c) = static_cast<int>(rng.poisson(std::exp(log_mean)));
    }

    if (F > 0 && (t - 1) % model.field_period_steps == 0) {
      series.field_mask[t - 1] = 1;
      series.fields.row(t - 1) =
          (rp.C * x + chol_r[s] * rng.normal_vec(F)).transpose();
    }

    if (B > 0) {
      series.behavior.row(t - 1) =
          (behavior->H * x + behavior->noise_std * rng.normal_vec(B))
              .transpose();
    }
  }
  return series;
}

}  // namespace smds
