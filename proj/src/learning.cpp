#include "smds/learning.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "smds/linalg.hpp"

namespace smds {

namespace {

constexpr double kRidge = 1e-8;
constexpr double kMaxStableRho = 0.999;
constexpr double kFieldVarFloor = 1e-6;
constexpr double kExpCap = 700.0;
constexpr double kLog2Pi = 1.8378770664093453;

double safe_log(double p) { return std::log(std::max(p, 1e-300)); }

double block_delta(const Mat& a, const Mat& b) {
  if (a.size() == 0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff();
}

double param_delta(const SwitchingModel& a, const SwitchingModel& b) {
  double delta = block_delta(a.Phi, b.Phi);
  delta = std::max(delta, block_delta(a.pi0, b.pi0));
  delta = std::max(delta, block_delta(a.mu0, b.mu0));
  delta = std::max(delta, block_delta(a.Lambda0, b.Lambda0));
  for (int j = 0; j < a.num_regimes(); ++j) {
    const RegimeParams& ra = a.regimes[j];
    const RegimeParams& rb = b.regimes[j];
    delta = std::max(delta, block_delta(ra.A, rb.A));
    delta = std::max(delta, block_delta(ra.Q, rb.Q));
    delta = std::max(delta, block_delta(ra.alpha, rb.alpha));
    delta = std::max(delta, block_delta(ra.beta, rb.beta));
    delta = std::max(delta, block_delta(ra.C, rb.C));
    delta = std::max(delta, block_delta(ra.R, rb.R));
  }
  return delta;
}

void check_stats_shape(const SmoothedStats& stats,
                       const MultiscaleSeries& series,
                       const SwitchingModel& prev) {
  const int T = series.num_steps();
  const int M = prev.num_regimes();
  if (static_cast<int>(stats.per_regime.size()) != T ||
      stats.W.rows() != T || stats.W.cols() != M ||
      static_cast<int>(stats.merged.size()) != T + 1) {
    throw ConfigError("m_step: smoothed statistics do not match the series");
  }
}

// Design matrices for the expected Poisson log-likelihood of one regime, or
// of all regimes stacked when the observation parameters are shared.
struct SpikeDesign {
  Mat X;                  // N x d smoothed means
  Mat Pstack;             // (N*d) x d stacked smoothed covariances
  Vec w;                  // N regime weights
  std::vector<int> row;   // N storage rows into series.spikes
  int d = 0;

  int size() const { return static_cast<int>(X.rows()); }
};

SpikeDesign build_spike_design(const SmoothedStats& stats,
                               const MultiscaleSeries& series, int regime,
                               bool unit_weights) {
  const int T = series.num_steps();
  const int M = static_cast<int>(stats.W.cols());
  const int d = static_cast<int>(stats.merged[0].mean.size());
  std::vector<int> regimes;
  if (regime >= 0) {
    regimes.push_back(regime);
  } else {
    for (int j = 0; j < M; ++j) regimes.push_back(j);
  }
  const int N = T * static_cast<int>(regimes.size());

  SpikeDesign dz;
  dz.d = d;
  dz.X = Mat(N, d);
  dz.Pstack = Mat(N * d, d);
  dz.w = Vec(N);
  dz.row.resize(N);
  int r = 0;
  for (int j : regimes) {
    for (int t = 0; t < T; ++t, ++r) {
      dz.X.row(r) = stats.per_regime[t][j].mean.transpose();
      dz.Pstack.middleRows(r * d, d) = stats.per_regime[t][j].cov;
      dz.w(r) = unit_weights ? 1.0 : stats.W(t, j);
      dz.row[r] = t;
    }
  }
  return dz;
}

// Expected Poisson log-likelihood of one neuron; -inf when the rate
// overflows, so the line search backs off such steps.
double spike_obj(const SpikeDesign& dz, const Vec& counts, double alpha,
                 const Vec& beta) {
  const int N = dz.size();
  Vec lin = ((dz.X * beta).array() + alpha).matrix();
  Vec u = dz.Pstack * beta;
  Eigen::Map<const Mat> U(u.data(), dz.d, N);
  Vec quad = U.transpose() * beta;
  double obj = 0.0;
  for (int t = 0; t < N; ++t) {
    double logr = lin(t) + 0.5 * quad(t);
    if (logr > kExpCap) return -std::numeric_limits<double>::infinity();
    obj += dz.w(t) * (counts(t) * lin(t) - std::exp(logr));
  }
  return obj;
}

// Gradient and negated Hessian at (alpha, beta); rates are capped so a usable
// ascent direction exists even from an overflowing point.
void spike_derivs(const SpikeDesign& dz, const Vec& counts, double alpha,
                  const Vec& beta, Vec& grad, Mat& neg_hess) {
  const int N = dz.size();
  const int d = dz.d;
  Vec lin = ((dz.X * beta).array() + alpha).matrix();
  Vec u = dz.Pstack * beta;
  Eigen::Map<const Mat> U(u.data(), d, N);
  Vec quad = U.transpose() * beta;
  Vec wr(N);
  for (int t = 0; t < N; ++t) {
    wr(t) = dz.w(t) * std::exp(std::min(lin(t) + 0.5 * quad(t), kExpCap));
  }
  Mat G = dz.X + U.transpose();  // row t = x_t + P_t beta
  Vec wn = dz.w.cwiseProduct(counts);

  grad.resize(d + 1);
  grad(0) = wn.sum() - wr.sum();
  grad.tail(d) = dz.X.transpose() * wn - G.transpose() * wr;

  Mat Hbb = G.transpose() * wr.asDiagonal() * G;
  for (int t = 0; t < N; ++t) {
    Hbb.noalias() += wr(t) * dz.Pstack.middleRows(t * d, d);
  }
  neg_hess.resize(d + 1, d + 1);
  neg_hess(0, 0) = wr.sum();
  neg_hess.block(0, 1, 1, d) = (G.transpose() * wr).transpose();
  neg_hess.block(1, 0, d, 1) = G.transpose() * wr;
  neg_hess.block(1, 1, d, d) = symmetrize(Hbb);
}

bool newton_spike_fit(const SpikeDesign& dz, const Vec& counts, int max_iters,
                      double tol, double& alpha, Vec& beta,
                      std::string* reason) {
  const int d = dz.d;
  double f0 = spike_obj(dz, counts, alpha, beta);
  Vec grad;
  Mat neg_hess;
  for (int it = 0; it < max_iters; ++it) {
    spike_derivs(dz, counts, alpha, beta, grad, neg_hess);
    if (grad.norm() < tol) return true;

    double lam = 1e-10 * (1.0 + neg_hess.diagonal().cwiseAbs().maxCoeff());
    Vec step;
    for (int tries = 0; tries < 12; ++tries) {
      step = (neg_hess + lam * Mat::Identity(d + 1, d + 1)).ldlt().solve(grad);
      if (step.allFinite()) break;
      lam *= 100.0;
    }
    if (!step.allFinite()) {
      if (reason) *reason = "Newton direction not finite";
      return false;
    }

    double scale = 1.0;
    bool accepted = false;
    for (int k = 0; k < 45; ++k) {
      double cand_a = alpha + scale * step(0);
      Vec cand_b = beta + scale * step.tail(d);
      double f1 = spike_obj(dz, counts, cand_a, cand_b);
      if (std::isfinite(f1) && f1 >= f0) {
        alpha = cand_a;
        beta = cand_b;
        f0 = f1;
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted) {
      if (reason) *reason = "no ascent step found";
      return false;
    }
  }
  spike_derivs(dz, counts, alpha, beta, grad, neg_hess);
  if (grad.norm() < tol) return true;
  if (reason) {
    *reason = "gradient norm " + std::to_string(grad.norm()) +
              " after the iteration cap";
  }
  return false;
}

}  // namespace

double expected_complete_ll(const SwitchingModel& model,
                            const MultiscaleSeries& series,
                            const SmoothedStats& stats,
                            const FilterOptions& opts) {
  const int T = series.num_steps();
  const int M = model.num_regimes();
  const int d = model.latent_dim();
  const int C = model.num_cells();
  const int F = model.num_fields();

  double ell = 0.0;
  for (int j = 0; j < M; ++j) {
    if (stats.W(0, j) > 0.0) ell += stats.W(0, j) * safe_log(model.pi0(j));
  }
  for (const Mat& pair : stats.Wpair) {
    for (int i = 0; i < M; ++i) {
      for (int j = 0; j < M; ++j) {
        if (pair(i, j) > 0.0) ell += pair(i, j) * safe_log(model.Phi(j, i));
      }
    }
  }

  {
    Vec dm = stats.merged[0].mean - model.mu0;
    Mat S0 = stats.merged[0].cov + dm * dm.transpose();
    ell += -0.5 * (d * kLog2Pi + logdet_spd(model.Lambda0) +
                   solve_spd(model.Lambda0, S0).trace());
  }

  for (int j = 0; j < M; ++j) {
    const Mat& A = model.regimes[j].A;
    Mat Sxx = Mat::Zero(d, d);
    Mat Sxx1 = Mat::Zero(d, d);
    Mat Sx1x1 = Mat::Zero(d, d);
    double Wsum = 0.0;
    for (int t = 1; t <= T; ++t) {
      double wt = stats.W(t - 1, j);
      if (wt <= 0.0) continue;
      const Vec& m = stats.per_regime[t - 1][j].mean;
      Sxx.noalias() += wt * (m * m.transpose() + stats.merged[t].cov);
      Sxx1.noalias() += wt * stats.cross[t - 1][j];
      Sx1x1.noalias() += wt * stats.prev2[t - 1][j];
      Wsum += wt;
    }
    Mat S = Sxx - A * Sxx1.transpose() - Sxx1 * A.transpose() +
            A * Sx1x1 * A.transpose();
    ell += -0.5 * (Wsum * (d * kLog2Pi + logdet_spd(model.regimes[j].Q)) +
                   solve_spd(model.regimes[j].Q, S).trace());
  }

  if (opts.use_spikes && C > 0) {
    for (int j = 0; j < M; ++j) {
      const Vec& alpha = model.regimes[j].alpha;
      const Mat& B = model.regimes[j].beta;
      for (int t = 1; t <= T; ++t) {
        double wt = stats.W(t - 1, j);
        if (wt <= 0.0) continue;
        const Vec& m = stats.per_regime[t - 1][j].mean;
        const Mat& P = stats.per_regime[t - 1][j].cov;
        Vec lin = alpha + B * m;
        Mat BP = B * P;
        Vec quad = BP.cwiseProduct(B).rowwise().sum();
        for (int c = 0; c < C; ++c) {
          double logr = lin(c) + 0.5 * quad(c);
          double n = static_cast<double>(series.spikes(t - 1, c));
          ell += wt * (n * lin(c) - std::exp(std::min(logr, kExpCap)));
        }
      }
    }
  }

  if (opts.use_fields && F > 0 && model.tau > 0.0) {
    std::vector<Mat> Rinv(M);
    std::vector<Mat> K(M);
    std::vector<double> logdetR(M);
    for (int j = 0; j < M; ++j) {
      Rinv[j] = inverse_spd(model.regimes[j].R);
      K[j] = model.regimes[j].C.transpose() * Rinv[j] * model.regimes[j].C;
      logdetR[j] = logdet_spd(model.regimes[j].R);
    }
    double acc = 0.0;
    for (int t = 1; t <= T; ++t) {
      if (!series.has_field(t - 1)) continue;
      Vec y = series.fields.row(t - 1).transpose();
      for (int j = 0; j < M; ++j) {
        double wt = stats.W(t - 1, j);
        if (wt <= 0.0) continue;
        Vec innov = y - model.regimes[j].C * stats.per_regime[t - 1][j].mean;
        double quad = innov.dot(Rinv[j] * innov) +
                      (K[j] * stats.merged[t].cov).trace();
        acc += wt * (F * kLog2Pi + logdetR[j] + quad);
      }
    }
    ell += -0.5 * model.tau * acc;
  }
  return ell;
}

FilterOptions filter_options_for(Modality modality) {
  FilterOptions opts;
  opts.use_spikes = modality != Modality::kGaussianOnly;
  opts.use_fields = modality != Modality::kPoissonOnly;
  return opts;
}

void validate_em_config(const EmConfig& cfg) {
  std::vector<std::string> problems;
  if (cfg.M < 1) problems.push_back("M must be >= 1");
  if (cfg.d < 1) problems.push_back("d must be >= 1");
  if (!(cfg.tau > 0.0)) problems.push_back("tau must be > 0");
  if (cfg.max_iters < 1) problems.push_back("max_iters must be >= 1");
  if (!(cfg.init_stay_prob > 0.0 && cfg.init_stay_prob <= 1.0)) {
    problems.push_back("init_stay_prob must lie in (0, 1]");
  }
  if (!std::isfinite(cfg.init_A_scale)) {
    problems.push_back("init_A_scale must be finite");
  }
  if (cfg.newton_max_iters < 1) {
    problems.push_back("newton_max_iters must be >= 1");
  }
  if (!(cfg.newton_tol > 0.0)) problems.push_back("newton_tol must be > 0");
  if (!problems.empty()) {
    std::string msg = "invalid EM configuration:";
    for (const std::string& p : problems) msg += " " + p + ";";
    throw ConfigError(msg);
  }
}

SwitchingModel init_params(const EmConfig& cfg, const MultiscaleSeries& series,
                           Rng& rng) {
  validate_em_config(cfg);
  const int T = series.num_steps();
  if (T == 0) throw ConfigError("init_params: empty series");
  const int d = cfg.d;
  const int M = cfg.M;
  const int C = series.num_cells();
  const int F = series.num_fields();

  SwitchingModel model;
  model.dt_ms = series.dt_ms;
  model.field_period_steps = series.field_period_steps;
  model.tau = cfg.tau;
  model.mu0 = Vec::Zero(d);
  model.Lambda0 = Mat::Identity(d, d);
  model.pi0 = Vec::Constant(M, 1.0 / M);
  if (M == 1) {
    model.Phi = Mat::Ones(1, 1);
  } else {
    double off = (1.0 - cfg.init_stay_prob) / (M - 1);
    model.Phi = Mat::Constant(M, M, off);
    model.Phi.diagonal().setConstant(cfg.init_stay_prob);
  }

  Vec alpha0(C);
  for (int c = 0; c < C; ++c) {
    double mean = series.spikes.col(c).cast<double>().mean();
    alpha0(c) = std::log(std::max(mean, 1.0 / T));
  }

  Vec rdiag = Vec::Ones(F);
  if (F > 0) {
    int n_frames = 0;
    Vec sum = Vec::Zero(F);
    Vec sumsq = Vec::Zero(F);
    for (int t = 0; t < T; ++t) {
      if (!series.has_field(t)) continue;
      Vec y = series.fields.row(t).transpose();
      sum += y;
      sumsq += y.cwiseProduct(y);
      ++n_frames;
    }
    if (n_frames > 0) {
      Vec meanv = sum / n_frames;
      Vec var = sumsq / n_frames - meanv.cwiseProduct(meanv);
      rdiag = var.cwiseMax(1e-6);
    }
  }

  model.regimes.resize(M);
  for (int j = 0; j < M; ++j) {
    RegimeParams& rp = model.regimes[j];
    rp.A = cfg.init_A_scale * Mat::Identity(d, d);
    rp.Q = Mat::Identity(d, d);
    rp.alpha = alpha0;
    rp.beta = Mat(C, d);
    for (int c = 0; c < C; ++c) {
      for (int k = 0; k < d; ++k) rp.beta(c, k) = 0.1 * rng.normal();
    }
    rp.C = Mat(F, d);
    for (int f = 0; f < F; ++f) {
      for (int k = 0; k < d; ++k) rp.C(f, k) = 0.1 * rng.normal();
    }
    rp.R = rdiag.asDiagonal();
  }
  return model;
}

EStepResult e_step(const SwitchingModel& model, const MultiscaleSeries& series,
                   const FilterOptions& opts) {
  SmoothedStats stats;
  {
    FilterResult fr = smsnf_filter(model, series, opts);
    stats = sms_run(model, fr);
  }
  double ell = expected_complete_ll(model, series, stats, opts);
  return {std::move(stats), ell};
}

void m_step_poisson(const SmoothedStats& stats, const MultiscaleSeries& series,
                    const EmConfig& cfg, const SwitchingModel& prev,
                    std::vector<Vec>& alphas, std::vector<Mat>& betas,
                    std::vector<std::string>* warnings) {
  check_stats_shape(stats, series, prev);
  const int M = prev.num_regimes();
  const int C = prev.num_cells();
  alphas.assign(M, Vec());
  betas.assign(M, Mat());
  for (int j = 0; j < M; ++j) {
    alphas[j] = prev.regimes[j].alpha;
    betas[j] = prev.regimes[j].beta;
  }
  if (C == 0) return;

  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back(msg);
  };

  const bool shared = cfg.share_observation_params;
  const int n_fits = shared ? 1 : M;
  for (int fit = 0; fit < n_fits; ++fit) {
    SpikeDesign dz =
        build_spike_design(stats, series, shared ? -1 : fit, shared);
    if (!shared && dz.w.sum() < 1e-8) {
      warn("spike update: regime " + std::to_string(fit + 1) +
           " has near-zero total weight; keeping previous parameters");
      continue;
    }
    Vec counts(dz.size());
    for (int c = 0; c < C; ++c) {
      for (int r = 0; r < dz.size(); ++r) {
        counts(r) = static_cast<double>(series.spikes(dz.row[r], c));
      }
      double a = prev.regimes[shared ? 0 : fit].alpha(c);
      Vec b = prev.regimes[shared ? 0 : fit].beta.row(c).transpose();
      std::string reason;
      if (!newton_spike_fit(dz, counts, cfg.newton_max_iters, cfg.newton_tol,
                            a, b, &reason)) {
        warn("spike update: neuron " + std::to_string(c + 1) +
             (shared ? std::string(" (shared)")
                     : " regime " + std::to_string(fit + 1)) +
             ": " + reason);
      }
      if (shared) {
        for (int j = 0; j < M; ++j) {
          alphas[j](c) = a;
          betas[j].row(c) = b.transpose();
        }
      } else {
        alphas[fit](c) = a;
        betas[fit].row(c) = b.transpose();
      }
    }
  }
}

SwitchingModel m_step(const SmoothedStats& stats,
                      const MultiscaleSeries& series, const EmConfig& cfg,
                      const SwitchingModel& prev,
                      std::vector<std::string>* warnings) {
  check_stats_shape(stats, series, prev);
  const int T = series.num_steps();
  const int M = prev.num_regimes();
  const int d = prev.latent_dim();
  const int F = prev.num_fields();

  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back(msg);
  };

  SwitchingModel out = prev;
  out.mu0 = stats.merged[0].mean;
  out.Lambda0 = repair_covariance(stats.merged[0].cov);

  if (M > 1) {
    Mat N = Mat::Zero(M, M);  // N(j, i): expected transitions i -> j
    for (const Mat& pair : stats.Wpair) N += pair.transpose();
    for (int i = 0; i < M; ++i) {
      double col = N.col(i).sum();
      if (col <= 1e-12) {
        warn("transition update: regime " + std::to_string(i + 1) +
             " has no outgoing mass; keeping previous column");
      } else {
        out.Phi.col(i) = N.col(i) / col;
      }
    }
    Vec pi = stats.W.row(0).transpose();
    double ps = pi.sum();
    if (ps > 0.0) out.pi0 = pi / ps;
  }

  for (int j = 0; j < M; ++j) {
    Mat Sxx = Mat::Zero(d, d);
    Mat Sxx1 = Mat::Zero(d, d);
    Mat Sx1x1 = Mat::Zero(d, d);
    double Wsum = 0.0;
    for (int t = 1; t <= T; ++t) {
      double wt = stats.W(t - 1, j);
      if (wt <= 0.0) continue;
      const Vec& m = stats.per_regime[t - 1][j].mean;
      Sxx.noalias() += wt * (m * m.transpose() + stats.merged[t].cov);
      Sxx1.noalias() += wt * stats.cross[t - 1][j];
      Sx1x1.noalias() += wt * stats.prev2[t - 1][j];
      Wsum += wt;
    }
    if (Wsum < 1e-8) {
      warn("dynamics update: regime " + std::to_string(j + 1) +
           " has near-zero total weight; update is ridge-dominated");
    }
    Mat reg = symmetrize(Sx1x1) + kRidge * Mat::Identity(d, d);
    Mat Anew = solve_spd(reg, Sxx1.transpose()).transpose();
    // an unstable transition estimate makes the filter diverge on long
    // stretches assigned to this regime, so shrink it back inside the unit
    // circle; the noise update below then uses the shrunk transition
    double rho = spectral_radius(Anew);
    if (rho > kMaxStableRho) {
      Anew *= kMaxStableRho / rho;
      warn("dynamics update: regime " + std::to_string(j + 1) +
           " transition spectral radius " + std::to_string(rho) +
           " shrunk to " + std::to_string(kMaxStableRho));
    }
    double denom = std::max(Wsum, 1e-12);
    Mat Qnew = (Sxx - Anew * Sxx1.transpose() - Sxx1 * Anew.transpose() +
                Anew * Sx1x1 * Anew.transpose()) /
               denom;
    out.regimes[j].A = Anew;
    out.regimes[j].Q = repair_covariance(Qnew);
  }

  if (cfg.modality != Modality::kPoissonOnly && F > 0) {
    auto fit_field = [&](int regime, bool unit_weights, Mat& Cnew, Mat& Rnew,
                         double& Sw) {
      Mat Syx = Mat::Zero(F, d);
      Mat Sxx = Mat::Zero(d, d);
      Mat Syy = Mat::Zero(F, F);
      Sw = 0.0;
      for (int t = 1; t <= T; ++t) {
        if (!series.has_field(t - 1)) continue;
        Vec y = series.fields.row(t - 1).transpose();
        Mat yy = y * y.transpose();
        for (int j = 0; j < M; ++j) {
          if (regime >= 0 && j != regime) continue;
          double wt = unit_weights ? 1.0 : stats.W(t - 1, j);
          if (wt <= 0.0) continue;
          const Vec& m = stats.per_regime[t - 1][j].mean;
          Syx.noalias() += wt * (y * m.transpose());
          Sxx.noalias() += wt * (m * m.transpose() + stats.merged[t].cov);
          Syy.noalias() += wt * yy;
          Sw += wt;
        }
      }
      Mat reg = symmetrize(Sxx) + kRidge * Mat::Identity(d, d);
      Cnew = solve_spd(reg, Syx.transpose()).transpose();
      Mat Rraw = (Syy - Cnew * Syx.transpose() - Syx * Cnew.transpose() +
                  Cnew * Sxx * Cnew.transpose()) /
                 std::max(Sw, 1e-12);
      Rnew = repair_covariance(Rraw);
      // with at least as many latent dimensions as field channels the
      // residual can collapse to zero (the states interpolate the data
      // exactly) and the log-likelihood diverges; keep each channel's noise
      // at a small fraction of its observed power
      for (int f = 0; f < F; ++f) {
        double floor_f = kFieldVarFloor * Syy(f, f) / std::max(Sw, 1e-12);
        if (Rnew(f, f) < floor_f) Rnew(f, f) += floor_f - Rnew(f, f);
      }
    };

    if (cfg.share_observation_params) {
      Mat Cnew, Rnew;
      double Sw = 0.0;
      fit_field(-1, true, Cnew, Rnew, Sw);
      if (Sw < 1e-8) {
        warn("field update: no observed frames; keeping previous parameters");
      } else {
        for (int j = 0; j < M; ++j) {
          out.regimes[j].C = Cnew;
          out.regimes[j].R = Rnew;
        }
      }
    } else {
      for (int j = 0; j < M; ++j) {
        Mat Cnew, Rnew;
        double Sw = 0.0;
        fit_field(j, false, Cnew, Rnew, Sw);
        if (Sw < 1e-8) {
          warn("field update: regime " + std::to_string(j + 1) +
               " has near-zero total weight; keeping previous parameters");
          continue;
        }
        out.regimes[j].C = Cnew;
        out.regimes[j].R = Rnew;
      }
    }
  }

  if (cfg.modality != Modality::kGaussianOnly && prev.num_cells() > 0) {
    std::vector<Vec> alphas;
    std::vector<Mat> betas;
    m_step_poisson(stats, series, cfg, prev, alphas, betas, warnings);
    for (int j = 0; j < M; ++j) {
      out.regimes[j].alpha = alphas[j];
      out.regimes[j].beta = betas[j];
    }
  }
  return out;
}

namespace {

// Overwrites the random start with the blocks an init model provides; the
// streams the init never saw keep their random parameters.
void apply_init_model(SwitchingModel& model, const SwitchingModel& init,
                      const EmConfig& cfg, const MultiscaleSeries& series) {
  if (init.latent_dim() != cfg.d || init.num_regimes() != cfg.M) {
    throw ConfigError(
        "em_fit: init model dimensions do not match the configuration");
  }
  if (init.num_cells() > 0 && init.num_cells() != series.num_cells()) {
    throw ConfigError("em_fit: init model spike channels do not match");
  }
  if (init.num_fields() > 0 && init.num_fields() != series.num_fields()) {
    throw ConfigError("em_fit: init model field channels do not match");
  }
  model.Phi = init.Phi;
  model.pi0 = init.pi0;
  model.mu0 = init.mu0;
  model.Lambda0 = init.Lambda0;
  for (int j = 0; j < cfg.M; ++j) {
    model.regimes[j].A = init.regimes[j].A;
    model.regimes[j].Q = init.regimes[j].Q;
    if (init.num_cells() > 0) {
      model.regimes[j].alpha = init.regimes[j].alpha;
      model.regimes[j].beta = init.regimes[j].beta;
    }
    if (init.num_fields() > 0) {
      model.regimes[j].C = init.regimes[j].C;
      model.regimes[j].R = init.regimes[j].R;
    }
  }
}

// Applies the similarity transform x -> D^{-1} x with D holding the per-dim
// stationary standard deviations, leaving the model's likelihood unchanged
// while giving each latent dimension unit-scale excursions. After a partial
// init the streams still carrying freshly drawn parameters assume unit scale,
// so without this the inherited dynamics can feed them arbitrarily large
// states. scale_spike / scale_field say which observation blocks share the
// inherited scale and must be transformed along with the dynamics.
void normalize_latent_scale(SwitchingModel& model, bool scale_spike,
                            bool scale_field) {
  const int d = model.latent_dim();
  Mat acc = Mat::Zero(d, d);
  int used = 0;
  for (const RegimeParams& rp : model.regimes) {
    if (spectral_radius(rp.A) >= 1.0 - 1e-9) continue;
    Mat stat = solve_discrete_lyapunov(rp.A, rp.Q);
    if (!stat.allFinite()) continue;
    acc += stat;
    ++used;
  }
  if (used == 0) return;
  Vec sd =
      (acc.diagonal() / used).cwiseMax(1e-12).cwiseSqrt().cwiseMin(1e6);
  Vec inv = sd.cwiseInverse();
  model.mu0 = inv.asDiagonal() * model.mu0;
  model.Lambda0 = inv.asDiagonal() * model.Lambda0 * inv.asDiagonal();
  for (RegimeParams& rp : model.regimes) {
    rp.A = inv.asDiagonal() * rp.A * sd.asDiagonal();
    rp.Q = inv.asDiagonal() * rp.Q * inv.asDiagonal();
    if (scale_field && rp.C.rows() > 0) rp.C = rp.C * sd.asDiagonal();
    if (scale_spike && rp.beta.rows() > 0) rp.beta = rp.beta * sd.asDiagonal();
  }
}

}  // namespace

EmResult em_fit(const MultiscaleSeries& series, const EmConfig& cfg,
                const SwitchingModel* init) {
  validate_em_config(cfg);
  if (series.num_steps() == 0) throw ConfigError("em_fit: empty series");
  if (cfg.modality == Modality::kGaussianOnly && series.num_fields() == 0) {
    throw ConfigError("em_fit: gaussian-only modality needs field channels");
  }
  if (cfg.modality == Modality::kPoissonOnly && series.num_cells() == 0) {
    throw ConfigError("em_fit: poisson-only modality needs spike channels");
  }

  Rng rng(cfg.seed);
  FilterOptions opts = filter_options_for(cfg.modality);
  EmResult res;
  res.model = init_params(cfg, series, rng);
  if (init != nullptr) {
    apply_init_model(res.model, *init, cfg, series);
    const bool spikes_used =
        cfg.modality != Modality::kGaussianOnly && series.num_cells() > 0;
    const bool fields_used =
        cfg.modality != Modality::kPoissonOnly && series.num_fields() > 0;
    const bool spikes_from_init = init->num_cells() > 0;
    const bool fields_from_init = init->num_fields() > 0;
    if ((spikes_used && !spikes_from_init) ||
        (fields_used && !fields_from_init)) {
      normalize_latent_scale(res.model, spikes_from_init, fields_from_init);
    }
  } else if (cfg.modality == Modality::kMultiscale &&
             series.num_fields() > 0 && series.num_cells() > 0) {
    EmConfig stage = cfg;
    stage.modality = Modality::kGaussianOnly;
    stage.max_iters = std::min(cfg.max_iters, 80);
    stage.convergence_tol = std::max(cfg.convergence_tol, 1e-7);
    stage.seed = derive_seed(cfg.seed, 0x696e6974);
    EmResult sub = em_fit(series, stage, nullptr);
    apply_init_model(res.model, sub.model, cfg, series);
    normalize_latent_scale(res.model, false, true);
    for (const std::string& w : sub.trace.warnings) {
      res.trace.warnings.push_back("field stage: " + w);
    }
  }

  double prev_ell = std::numeric_limits<double>::quiet_NaN();
  int stall = 0;
  for (int it = 0; it < cfg.max_iters; ++it) {
    auto t0 = std::chrono::steady_clock::now();
    EStepResult es = e_step(res.model, series, opts);
    std::vector<std::string> warn;
    SwitchingModel next = m_step(es.stats, series, cfg, res.model, &warn);
    double delta = param_delta(res.model, next);
    res.model = std::move(next);
    double secs = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    res.trace.iters.push_back({es.ell, delta, secs});
    for (const std::string& w : warn) {
      res.trace.warnings.push_back("iter " + std::to_string(it + 1) + ": " +
                                   w);
    }
    if (cfg.convergence_tol > 0.0 && std::isfinite(prev_ell)) {
      double rel =
          std::abs(es.ell - prev_ell) / std::max(1.0, std::abs(es.ell));
      stall = rel < cfg.convergence_tol ? stall + 1 : 0;
      if (stall >= 5) break;
    }
    prev_ell = es.ell;
  }
  // drop the parameters of streams the fit never touched so the returned
  // model only claims the channels it was trained on
  if (cfg.modality == Modality::kGaussianOnly) {
    for (RegimeParams& rp : res.model.regimes) {
      rp.alpha = Vec();
      rp.beta = Mat(0, cfg.d);
    }
  } else if (cfg.modality == Modality::kPoissonOnly) {
    for (RegimeParams& rp : res.model.regimes) {
      rp.C = Mat(0, cfg.d);
      rp.R = Mat(0, 0);
    }
  }
  return res;
}

}  // namespace smds
