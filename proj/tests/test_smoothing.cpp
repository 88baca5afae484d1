#include <cmath>
#include <vector>

#include <doctest.h>

#include "oracles.hpp"
#include "smds/filtering.hpp"
#include "smds/simulate.hpp"
#include "smds/smoothing.hpp"

using smds::FilterOptions;
using smds::FilterResult;
using smds::Mat;
using smds::MultiscaleSeries;
using smds::Rng;
using smds::SimConfig;
using smds::SmoothedStats;
using smds::SwitchingModel;
using smds::Vec;

namespace {

SwitchingModel gaussian_only_model(int M, uint64_t seed) {
  SimConfig cfg;
  cfg.d = 4;
  cfg.C = 0;
  cfg.F = 3;
  cfg.M = M;
  cfg.shared_mode_pairs = 2;
  cfg.spike_only_pairs = 0;
  cfg.field_only_pairs = 0;
  cfg.field_period_steps = 2;
  Rng rng(seed);
  return smds::random_switching_model(cfg, rng);
}

SwitchingModel small_multiscale_model(int M, uint64_t seed) {
  SimConfig cfg;
  cfg.d = 4;
  cfg.C = 5;
  cfg.F = 3;
  cfg.M = M;
  cfg.shared_mode_pairs = 2;
  cfg.spike_only_pairs = 0;
  cfg.field_only_pairs = 0;
  cfg.field_period_steps = 3;
  Rng rng(seed);
  return smds::random_switching_model(cfg, rng);
}

double max_abs(const Mat& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("single-regime smoother matches the fixed-interval oracle") {
  SwitchingModel model = gaussian_only_model(1, 901);
  model.tau = 0.7;
  Rng rng(902);
  const int T = 120;
  MultiscaleSeries series = smds::simulate_series(model, T, rng);

  FilterOptions opts;
  opts.use_spikes = false;
  FilterResult fr = smds::smsnf_filter(model, series, opts);
  SmoothedStats st = smds::sms_run(model, fr);

  const auto& rp = model.regimes[0];
  oracle::LgssmResult ref =
      oracle::kalman_rts(rp.A, rp.Q, rp.C, rp.R, model.mu0, model.Lambda0,
                         series.fields, series.field_mask, model.tau);

  for (int t = 0; t <= T; ++t) {
    CHECK(max_abs(st.merged[t].mean - ref.smoothed[t].mean) < 1e-9);
    CHECK(max_abs(st.merged[t].cov - ref.smoothed[t].cov) < 1e-9);
  }
  for (int t = 1; t <= T; ++t) {
    CHECK(max_abs(st.per_regime[t - 1][0].mean - ref.smoothed[t].mean) < 1e-9);
    CHECK(max_abs(st.per_regime[t - 1][0].cov - ref.smoothed[t].cov) < 1e-9);
    CHECK(st.W(t - 1, 0) == doctest::Approx(1.0).epsilon(1e-12));

    Mat cross_ref = ref.smoothed[t].mean * ref.smoothed[t - 1].mean.transpose() +
                    ref.lag_one[t - 1];
    CHECK(max_abs(st.cross[t - 1][0] - cross_ref) < 1e-8);
    Mat prev2_ref = ref.smoothed[t - 1].cov +
                    ref.smoothed[t - 1].mean * ref.smoothed[t - 1].mean.transpose();
    CHECK(max_abs(st.prev2[t - 1][0] - prev2_ref) < 1e-8);
    CHECK(max_abs(st.prev_mean[t - 1][0] - ref.smoothed[t - 1].mean) < 1e-9);
  }
}

TEST_CASE("single-regime smoothing never widens the posterior") {
  SwitchingModel model = gaussian_only_model(1, 903);
  Rng rng(904);
  const int T = 80;
  MultiscaleSeries series = smds::simulate_series(model, T, rng);
  FilterOptions opts;
  opts.use_spikes = false;
  FilterResult fr = smds::smsnf_filter(model, series, opts);
  SmoothedStats st = smds::sms_run(model, fr);
  for (int t = 1; t <= T; ++t) {
    CHECK(st.merged[t].cov.trace() <=
          fr.steps[t - 1].merged.cov.trace() + 1e-10);
  }
  CHECK(st.merged[0].cov.trace() <= model.Lambda0.trace() + 1e-10);
}

TEST_CASE("final-step smoothed state equals the filtered state") {
  SwitchingModel model = small_multiscale_model(2, 905);
  Rng rng(906);
  const int T = 50;
  MultiscaleSeries series = smds::simulate_series(model, T, rng);
  FilterResult fr = smds::smsnf_filter(model, series);
  SmoothedStats st = smds::sms_run(model, fr);

  CHECK(max_abs(st.merged[T].mean - fr.steps[T - 1].merged.mean) == 0.0);
  CHECK(max_abs(st.merged[T].cov - fr.steps[T - 1].merged.cov) == 0.0);
  CHECK(max_abs(st.W.row(T - 1).transpose() - fr.steps[T - 1].regime_prob) ==
        0.0);
  for (int j = 0; j < 2; ++j) {
    CHECK(max_abs(st.per_regime[T - 1][j].mean -
                  fr.steps[T - 1].per_regime[j].mean) == 0.0);
  }
}

TEST_CASE("regime weight tables stay normalized and consistent") {
  SwitchingModel model = small_multiscale_model(3, 907);
  Rng rng(908);
  const int T = 60;
  MultiscaleSeries series = smds::simulate_series(model, T, rng);
  FilterResult fr = smds::smsnf_filter(model, series);
  SmoothedStats st = smds::sms_run(model, fr);

  for (int t = 1; t <= T; ++t) {
    CHECK(st.W.row(t - 1).sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(st.W.row(t - 1).minCoeff() >= 0.0);
  }
  for (int t = 2; t <= T; ++t) {
    const Mat& pair = st.Wpair[t - 2];
    CHECK(pair.minCoeff() >= 0.0);
    CHECK(pair.sum() == doctest::Approx(1.0).epsilon(1e-9));
    Vec col_sums = pair.colwise().sum().transpose();
    Vec row_sums = pair.rowwise().sum();
    CHECK(max_abs(col_sums - st.W.row(t - 1).transpose()) < 1e-10);
    CHECK(max_abs(row_sums - st.W.row(t - 2).transpose()) < 1e-10);
  }
}

TEST_CASE("identical regimes smooth exactly like a single regime") {
  SwitchingModel one = small_multiscale_model(1, 909);
  SwitchingModel two = one;
  two.regimes.push_back(one.regimes[0]);
  two.Phi = Mat::Constant(2, 2, 0.5);
  two.pi0 = Vec::Constant(2, 0.5);

  Rng rng(910);
  MultiscaleSeries series = smds::simulate_series(one, 40, rng);
  SmoothedStats st1 = smds::sms_run(one, smds::smsnf_filter(one, series));
  SmoothedStats st2 = smds::sms_run(two, smds::smsnf_filter(two, series));

  for (int t = 0; t <= 40; ++t) {
    CHECK(max_abs(st1.merged[t].mean - st2.merged[t].mean) < 1e-8);
    CHECK(max_abs(st1.merged[t].cov - st2.merged[t].cov) < 1e-8);
  }
  for (int t = 1; t <= 40; ++t) {
    CHECK(st2.W(t - 1, 0) == doctest::Approx(0.5).epsilon(1e-8));
    for (int j = 0; j < 2; ++j) {
      CHECK(max_abs(st2.cross[t - 1][j] - st1.cross[t - 1][0]) < 1e-8);
      CHECK(max_abs(st2.prev2[t - 1][j] - st1.prev2[t - 1][0]) < 1e-8);
    }
  }
}

TEST_CASE("smoothed regime weights sharpen an ambiguous filtered step") {
  SwitchingModel model = gaussian_only_model(2, 911);
  model.Phi << 0.97, 0.03, 0.03, 0.97;
  Rng rng(912);
  const int T = 200;
  MultiscaleSeries series = smds::simulate_series(model, T, rng);
  FilterOptions opts;
  opts.use_spikes = false;
  FilterResult fr = smds::smsnf_filter(model, series, opts);
  SmoothedStats st = smds::sms_run(model, fr);

  double filt_entropy = 0.0;
  double smooth_entropy = 0.0;
  for (int t = 1; t <= T; ++t) {
    for (int j = 0; j < 2; ++j) {
      double pf = fr.steps[t - 1].regime_prob(j);
      double ps = st.W(t - 1, j);
      if (pf > 0) filt_entropy -= pf * std::log(pf);
      if (ps > 0) smooth_entropy -= ps * std::log(ps);
    }
  }
  CHECK(smooth_entropy <= filt_entropy + 1e-9);
}
