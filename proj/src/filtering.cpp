#include "smds/filtering.hpp"

#include <cmath>
#include <sstream>

#include "smds/linalg.hpp"

namespace smds {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835;

GaussianBelief moment_match(const std::vector<GaussianBelief>& beliefs,
                            const Vec& w) {
  const int d = static_cast<int>(beliefs[0].mean.size());
  Vec mean = Vec::Zero(d);
  for (size_t i = 0; i < beliefs.size(); ++i) mean += w(i) * beliefs[i].mean;
  Mat cov = Mat::Zero(d, d);
  for (size_t i = 0; i < beliefs.size(); ++i) {
    Vec dm = beliefs[i].mean - mean;
    cov.noalias() += w(i) * beliefs[i].cov;
    cov.noalias() += w(i) * dm * dm.transpose();
  }
  return {mean, symmetrize(cov)};
}

// Shared information-form accumulation for any combination of the spike and
// field observation streams.
GaussianBelief fused_update(const GaussianBelief& prior, const Vec* n,
                            const PcfStats* stats, const Vec* y,
                            const Mat* Cmat, const Mat* R, double tau) {
  const int d = static_cast<int>(prior.mean.size());
  if ((stats == nullptr || stats->n_hat.size() == 0) &&
      (y == nullptr || tau <= 0.0 || Cmat->rows() == 0)) {
    return prior;
  }
  Mat info = inverse_spd(prior.cov);
  Vec shift = Vec::Zero(d);
  if (stats != nullptr && stats->n_hat.size() > 0) {
    const int C = static_cast<int>(stats->n_hat.size());
    Mat rhs(C, d + 1);
    rhs.leftCols(d) = stats->C_tilde;
    rhs.col(d) = *n - stats->n_hat;
    Mat sol = solve_spd(stats->R_tilde, rhs);
    info.noalias() += stats->C_tilde.transpose() * sol.leftCols(d);
    shift.noalias() += stats->C_tilde.transpose() * sol.col(d);
  }
  if (y != nullptr && tau > 0.0 && Cmat->rows() > 0) {
    const int F = static_cast<int>(Cmat->rows());
    Mat rhs(F, d + 1);
    rhs.leftCols(d) = *Cmat;
    rhs.col(d) = *y - *Cmat * prior.mean;
    Mat sol = solve_spd(*R, rhs);
    info.noalias() += tau * Cmat->transpose() * sol.leftCols(d);
    shift.noalias() += tau * Cmat->transpose() * sol.col(d);
  }
  GaussianBelief post;
  post.cov = repair_covariance(inverse_spd(symmetrize(info)));
  post.mean = prior.mean + post.cov * shift;
  return post;
}

double regime_loglik(const GaussianBelief& pred, const GaussianBelief& post,
                     const Vec* n, const Vec* y, const RegimeParams& rp,
                     double tau) {
  double ll = 0.0;
  if (n != nullptr && n->size() > 0) {
    Vec logr = rp.alpha + rp.beta * post.mean;
    // Count factorials are constant across regimes and drop out of the
    // normalization, so they are omitted here.
    if (logr.maxCoeff() > 700.0) return -1e308;
    ll += n->dot(logr) - logr.array().exp().sum();
  }
  if (y != nullptr && tau > 0.0 && rp.C.rows() > 0) {
    Vec innov = *y - rp.C * post.mean;
    Vec sol = solve_spd(rp.R, innov);
    ll += tau *
          (-0.5 * (rp.C.rows() * kLog2Pi + logdet_spd(rp.R) + innov.dot(sol)));
  }
  ll += 0.5 * (logdet_spd(post.cov) - logdet_spd(pred.cov));
  Vec delta = post.mean - pred.mean;
  Vec dsol = solve_spd(pred.cov, delta);
  ll += -0.5 * delta.dot(dsol);
  return ll;
}

}  // namespace

GaussianBelief kf_update(const GaussianBelief& prior, const Vec& y,
                         const Mat& Cmat, const Mat& R, double tau) {
  return fused_update(prior, nullptr, nullptr, &y, &Cmat, &R, tau);
}

PcfStats pcf_moments(const GaussianBelief& prior, const Vec& alpha,
                     const Mat& beta, const CubatureSet& cub) {
  const int C = static_cast<int>(alpha.size());
  PcfStats st;
  if (C == 0) {
    st.n_hat = Vec(0);
    return st;
  }
  Mat L = chol_lower_robust(prior.cov);
  Mat X = L * cub.points;  // d x P, offsets from the prior mean
  Vec base = alpha + beta * prior.mean;
  Mat logr = (beta * X).colwise() + base;  // C x P
  Eigen::Index worst_c, worst_a;
  double top = logr.maxCoeff(&worst_c, &worst_a);
  if (top > 30.0) {
    std::ostringstream msg;
    msg << "spike rate overflow for neuron " << worst_c + 1 << " (log mean "
        << top << ")";
    throw NumericError(msg.str());
  }
  Mat rates = logr.array().exp().matrix();
  st.n_hat = (rates * cub.weights).cwiseMax(1e-12);
  Mat centered = rates.colwise() - st.n_hat;
  Mat weighted = centered * cub.weights.asDiagonal();  // C x P
  st.L_xn = X * weighted.transpose();                  // d x C
  st.L_nn = symmetrize(weighted * centered.transpose());
  st.L_nn += Mat(st.n_hat.asDiagonal());
  st.C_tilde = solve_spd(prior.cov, st.L_xn).transpose();
  st.R_tilde =
      repair_covariance(st.L_nn - symmetrize(st.C_tilde * st.L_xn), 1e-9);
  return st;
}

GaussianBelief pcf_update(const GaussianBelief& prior, const Vec& n,
                          const PcfStats& stats) {
  return fused_update(prior, &n, &stats, nullptr, nullptr, nullptr, 0.0);
}

GaussianBelief msnf_predict(const GaussianBelief& post_prev, const Mat& A,
                            const Mat& Q) {
  GaussianBelief pred;
  pred.mean = A * post_prev.mean;
  pred.cov = symmetrize(A * post_prev.cov * A.transpose() + Q);
  return pred;
}

GaussianBelief msnf_update(const GaussianBelief& prior, const Vec& n,
                           const Vec* y, const RegimeParams& rp, double tau,
                           const CubatureSet& cub) {
  if (n.size() > 0) {
    PcfStats stats = pcf_moments(prior, rp.alpha, rp.beta, cub);
    return fused_update(prior, &n, &stats, y, &rp.C, &rp.R, tau);
  }
  return fused_update(prior, nullptr, nullptr, y, &rp.C, &rp.R, tau);
}

GaussianBelief smsnf_collapse(const std::vector<GaussianBelief>& beliefs,
                              const Vec& probs, const Mat& Phi, int j,
                              Vec* weights_out) {
  const int M = static_cast<int>(beliefs.size());
  Vec w(M);
  for (int i = 0; i < M; ++i) w(i) = Phi(j, i) * probs(i);
  double total = w.sum();
  if (total <= 0.0) {
    throw NumericError("collapse: no transition mass into regime " +
                       std::to_string(j + 1));
  }
  w /= total;
  if (weights_out != nullptr) *weights_out = w;
  return moment_match(beliefs, w);
}

Vec regime_update(const Vec& pred_probs,
                  const std::vector<GaussianBelief>& pred,
                  const std::vector<GaussianBelief>& post, const Vec* n,
                  const Vec* y, const SwitchingModel& model) {
  const int M = model.num_regimes();
  Vec logp(M);
  for (int j = 0; j < M; ++j) {
    double lp = pred_probs(j) > 0.0 ? std::log(pred_probs(j)) : -1e308;
    logp(j) =
        lp + regime_loglik(pred[j], post[j], n, y, model.regimes[j], model.tau);
  }
  double mx = logp.maxCoeff();
  if (!std::isfinite(mx) || mx <= -1e307) {
    throw NumericError("regime probabilities collapsed to zero");
  }
  Vec p(M);
  for (int j = 0; j < M; ++j) {
    p(j) = std::max(std::exp(logp(j) - mx), 1e-300);
  }
  return p / p.sum();
}

FilterResult smsnf_filter(const SwitchingModel& model,
                          const MultiscaleSeries& series,
                          const FilterOptions& opts) {
  const int M = model.num_regimes();
  const int d = model.latent_dim();
  const int T = series.num_steps();
  const bool spikes_on = opts.use_spikes && model.num_cells() > 0;
  const bool fields_on = opts.use_fields && model.num_fields() > 0;
  if (spikes_on && series.num_cells() != model.num_cells()) {
    throw ConfigError("filter: spike channel count differs between model and series");
  }
  if (fields_on && series.num_fields() != model.num_fields()) {
    throw ConfigError("filter: field channel count differs between model and series");
  }

  const CubatureSet cub = cubature_points(d);
  FilterResult out;
  GaussianBelief prior0{model.mu0, model.Lambda0};
  out.init.per_regime.assign(M, prior0);
  out.init.per_regime_pred.assign(M, prior0);
  out.init.regime_prob = model.pi0;
  out.init.regime_pred_prob = model.pi0;
  out.init.merged = moment_match(out.init.per_regime, model.pi0);
  out.steps.resize(T);

  const std::vector<GaussianBelief>* prev = &out.init.per_regime;
  const Vec* prev_probs = &out.init.regime_prob;
  for (int t = 1; t <= T; ++t) {
    SwitchPosterior& sp = out.steps[t - 1];
    try {
      Vec n;
      if (spikes_on) n = series.spikes.row(t - 1).cast<double>().transpose();
      Vec y;
      bool have_field = fields_on && series.has_field(t - 1);
      if (have_field) y = series.fields.row(t - 1).transpose();

      sp.per_regime.resize(M);
      sp.per_regime_pred.resize(M);
      for (int j = 0; j < M; ++j) {
        GaussianBelief mixed =
            smsnf_collapse(*prev, *prev_probs, model.Phi, j);
        const RegimeParams& rp = model.regimes[j];
        sp.per_regime_pred[j] = msnf_predict(mixed, rp.A, rp.Q);
        sp.per_regime[j] =
            msnf_update(sp.per_regime_pred[j], spikes_on ? n : Vec(),
                        have_field ? &y : nullptr, rp, model.tau, cub);
      }
      sp.regime_pred_prob = model.Phi * (*prev_probs);
      sp.regime_prob = regime_update(
          sp.regime_pred_prob, sp.per_regime_pred, sp.per_regime,
          spikes_on ? &n : nullptr, have_field ? &y : nullptr, model);
      sp.merged = moment_match(sp.per_regime, sp.regime_prob);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(t) + ": " + e.what());
    }
    prev = &sp.per_regime;
    prev_probs = &sp.regime_prob;
  }
  return out;
}

}  // namespace smds
