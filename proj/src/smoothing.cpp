#include "smds/smoothing.hpp"

#include <cmath>

#include "smds/linalg.hpp"

namespace smds {

SmoothedStats sms_run(const SwitchingModel& model, const FilterResult& fr) {
  const int T = static_cast<int>(fr.steps.size());
  const int M = model.num_regimes();
  const int d = model.latent_dim();
  if (T == 0) throw ConfigError("smoother: empty filter output");

  SmoothedStats st;
  st.merged.resize(T + 1);
  st.per_regime.assign(T, std::vector<GaussianBelief>(M));
  st.W = Mat::Zero(T, M);
  st.Wpair.resize(T > 1 ? T - 1 : 0);
  st.cross.assign(T, std::vector<Mat>(M));
  st.prev2.assign(T, std::vector<Mat>(M));
  st.prev_mean.assign(T, std::vector<Vec>(M));
  st.gain.assign(T, std::vector<Mat>(M));

  st.per_regime[T - 1] = fr.steps[T - 1].per_regime;
  st.W.row(T - 1) = fr.steps[T - 1].regime_prob.transpose();
  st.merged[T] = fr.steps[T - 1].merged;

  for (int t = T; t >= 1; --t) {
    const std::vector<GaussianBelief>& prev_filt =
        (t >= 2) ? fr.steps[t - 2].per_regime : fr.init.per_regime;
    const Vec& prev_probs =
        (t >= 2) ? fr.steps[t - 2].regime_prob : fr.init.regime_prob;
    const SwitchPosterior& cur = fr.steps[t - 1];

    // Forward mixture weights over the source regime, one column per target
    // regime; by the smoother's approximation these also serve as the
    // smoothed conditional P(s_{t-1} | s_t, h_{1:T}).
    Mat wfwd(M, M);
    for (int j = 0; j < M; ++j) {
      Vec col(M);
      for (int i = 0; i < M; ++i) col(i) = model.Phi(j, i) * prev_probs(i);
      double total = col.sum();
      if (total <= 0.0) {
        throw NumericError("smoother: no transition mass into regime " +
                           std::to_string(j + 1) + " at step " +
                           std::to_string(t));
      }
      wfwd.col(j) = col / total;
    }

    std::vector<std::vector<Mat>> J(M, std::vector<Mat>(M));
    std::vector<std::vector<Vec>> xs(M, std::vector<Vec>(M));
    std::vector<std::vector<Mat>> Ps(M, std::vector<Mat>(M));
    for (int j = 0; j < M; ++j) {
      const Mat& A = model.regimes[j].A;
      const GaussianBelief& pred = cur.per_regime_pred[j];
      const GaussianBelief& next = st.per_regime[t - 1][j];
      Mat dP = next.cov - pred.cov;
      Vec dx = next.mean - pred.mean;
      for (int i = 0; i < M; ++i) {
        J[i][j] = solve_spd(pred.cov, A * prev_filt[i].cov).transpose();
        xs[i][j] = prev_filt[i].mean + J[i][j] * dx;
        Ps[i][j] =
            symmetrize(prev_filt[i].cov + J[i][j] * dP * J[i][j].transpose());
      }
    }

    Vec Wt = st.W.row(t - 1).transpose();
    Mat pair(M, M);
    for (int j = 0; j < M; ++j) {
      for (int i = 0; i < M; ++i) pair(i, j) = wfwd(i, j) * Wt(j);
    }
    if (t >= 2) st.Wpair[t - 2] = pair;

    // Transition moments conditioned on the step-t regime.
    const Mat& merged_cov = st.merged[t].cov;
    for (int j = 0; j < M; ++j) {
      Vec xm = Vec::Zero(d);
      Mat Jbar = Mat::Zero(d, d);
      for (int i = 0; i < M; ++i) {
        xm += wfwd(i, j) * xs[i][j];
        Jbar += wfwd(i, j) * J[i][j];
      }
      Mat Pm = Mat::Zero(d, d);
      for (int i = 0; i < M; ++i) {
        Vec dm = xs[i][j] - xm;
        Pm += wfwd(i, j) * (Ps[i][j] + dm * dm.transpose());
      }
      st.prev_mean[t - 1][j] = xm;
      st.prev2[t - 1][j] = symmetrize(Pm + xm * xm.transpose());
      st.gain[t - 1][j] = Jbar;
      st.cross[t - 1][j] = st.per_regime[t - 1][j].mean * xm.transpose() +
                           merged_cov * Jbar.transpose();
    }

    // Smoothed state at t-1: first conditioned on the source regime, then
    // merged across regimes.
    Vec Wprev = pair.rowwise().sum();
    std::vector<GaussianBelief> prev_smooth(M);
    for (int i = 0; i < M; ++i) {
      double wi = std::max(Wprev(i), 1e-300);
      Vec mean = Vec::Zero(d);
      for (int j = 0; j < M; ++j) mean += (pair(i, j) / wi) * xs[i][j];
      Mat cov = Mat::Zero(d, d);
      for (int j = 0; j < M; ++j) {
        Vec dm = xs[i][j] - mean;
        cov += (pair(i, j) / wi) * (Ps[i][j] + dm * dm.transpose());
      }
      prev_smooth[i] = {mean, symmetrize(cov)};
    }
    Vec mm = Vec::Zero(d);
    for (int i = 0; i < M; ++i) mm += Wprev(i) * prev_smooth[i].mean;
    Mat mc = Mat::Zero(d, d);
    for (int i = 0; i < M; ++i) {
      Vec dm = prev_smooth[i].mean - mm;
      mc += Wprev(i) * (prev_smooth[i].cov + dm * dm.transpose());
    }
    st.merged[t - 1] = {mm, symmetrize(mc)};
    if (t >= 2) {
      st.per_regime[t - 2] = std::move(prev_smooth);
      st.W.row(t - 2) = Wprev.transpose();
    }
  }
  return st;
}

}  // namespace smds
