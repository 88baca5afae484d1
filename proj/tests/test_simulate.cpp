#include <doctest.h>

#include <cmath>
#include <complex>

#include <Eigen/Eigenvalues>

#include "smds/linalg.hpp"
#include "smds/simulate.hpp"

using smds::Mat;
using smds::MultiscaleSeries;
using smds::Rng;
using smds::SimConfig;
using smds::SwitchingModel;
using smds::Vec;

TEST_CASE("config validation rejects inconsistent settings") {
  SimConfig cfg;
  cfg.d = 9;
  CHECK_THROWS_AS(smds::validate_sim_config(cfg), smds::ConfigError);
  cfg = SimConfig{};
  cfg.shared_mode_pairs = 4;
  CHECK_THROWS_AS(smds::validate_sim_config(cfg), smds::ConfigError);
  cfg = SimConfig{};
  cfg.eig_radius_range = {0.99, 0.98};
  CHECK_THROWS_AS(smds::validate_sim_config(cfg), smds::ConfigError);
}

TEST_CASE("dynamics eigenvalues stay in the configured radius band") {
  SimConfig cfg;
  Rng rng(21);
  Mat A, Q;
  std::vector<smds::ModeTag> tags;
  smds::random_dynamics(cfg, rng, A, Q, tags);
  Eigen::EigenSolver<Mat> es(A);
  for (int i = 0; i < cfg.d; ++i) {
    double mag = std::abs(es.eigenvalues()(i));
    CHECK(mag >= 0.99 - 1e-12);
    CHECK(mag <= 0.995 + 1e-12);
  }
  CHECK(smds::spectral_radius(A) < 1.0);
  for (int i = 0; i < cfg.d; ++i) {
    CHECK(Q(i, i) >= 0.01);
    CHECK(Q(i, i) <= 0.04);
  }
  REQUIRE(tags.size() == 5);
  CHECK(tags[0] == smds::ModeTag::kShared);
  CHECK(tags[3] == smds::ModeTag::kSpikeOnly);
  CHECK(tags[4] == smds::ModeTag::kFieldOnly);
}

TEST_CASE("zero rotation angle gives a symmetric transition") {
  SimConfig cfg;
  cfg.eig_angle_range = {0.0, 0.0};
  Rng rng(4);
  Mat A, Q;
  std::vector<smds::ModeTag> tags;
  smds::random_dynamics(cfg, rng, A, Q, tags);
  CHECK((A - A.transpose()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("baseline log rate matches the base-rate draw") {
  SimConfig cfg;
  cfg.base_rate_hz_range = {6.0, 6.0};
  Rng rng(2);
  Mat A, Q;
  std::vector<smds::ModeTag> tags;
  smds::random_dynamics(cfg, rng, A, Q, tags);
  Mat stat = smds::solve_discrete_lyapunov(A, Q);
  Vec alpha;
  Mat beta;
  smds::random_poisson_params(cfg, tags, stat, rng, alpha, beta);
  for (int c = 0; c < cfg.C; ++c) {
    CHECK(alpha(c) == doctest::Approx(std::log(0.06)).epsilon(1e-12));
  }
}

TEST_CASE("spike loadings are zero on field-only pairs and hit the max rate") {
  SimConfig cfg;
  Rng rng(3);
  Mat A, Q;
  std::vector<smds::ModeTag> tags;
  smds::random_dynamics(cfg, rng, A, Q, tags);
  Mat stat = smds::solve_discrete_lyapunov(A, Q);
  Vec alpha;
  Mat beta;
  smds::random_poisson_params(cfg, tags, stat, rng, alpha, beta);
  Vec stat_std = stat.diagonal().cwiseSqrt();
  for (int c = 0; c < cfg.C; ++c) {
    CHECK(beta(c, 8) == 0.0);
    CHECK(beta(c, 9) == 0.0);
    double peak_hz = std::exp(alpha(c) + 3.0 *
                              beta.row(c).cwiseAbs().dot(stat_std.transpose())) /
                     (cfg.dt_ms / 1000.0);
    CHECK(peak_hz >= 40.0 - 1e-6);
    CHECK(peak_hz <= 50.0 + 1e-6);
  }
}

TEST_CASE("field noise follows the SNR definition") {
  SimConfig cfg;
  cfg.snr_range = {0.3, 0.3};
  Rng rng(5);
  Mat A, Q;
  std::vector<smds::ModeTag> tags;
  smds::random_dynamics(cfg, rng, A, Q, tags);
  Mat stat = smds::solve_discrete_lyapunov(A, Q);
  Mat Cmat, R;
  smds::random_field_params(cfg, tags, stat, rng, Cmat, R);
  for (int f = 0; f < cfg.F; ++f) {
    CHECK(Cmat(f, 6) == 0.0);
    CHECK(Cmat(f, 7) == 0.0);
    double signal_var = Cmat.row(f) * stat * Cmat.row(f).transpose();
    CHECK(R(f, f) == doctest::Approx(signal_var / 0.09).epsilon(1e-10));
    double amplitude = 2.0 * std::sqrt(signal_var);
    CHECK(amplitude >= 26.0 - 1e-9);
    CHECK(amplitude <= 30.0 + 1e-9);
    for (int g = 0; g < cfg.F; ++g) {
      if (g != f) CHECK(R(f, g) == 0.0);
    }
  }
}

TEST_CASE("switching model wiring and determinism") {
  SimConfig cfg;
  cfg.M = 2;
  Rng rng_a(77), rng_b(77);
  SwitchingModel a = smds::random_switching_model(cfg, rng_a);
  SwitchingModel b = smds::random_switching_model(cfg, rng_b);
  CHECK(smds::validate_model(a).empty());
  CHECK(a.Phi(0, 0) == doctest::Approx(0.99));
  CHECK(a.Phi(1, 0) == doctest::Approx(0.01));
  CHECK((a.regimes[0].A - b.regimes[0].A).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.regimes[1].beta - b.regimes[1].beta).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.regimes[0].A - a.regimes[1].A).cwiseAbs().maxCoeff() > 0.0);

  cfg.M = 1;
  Rng rng_c(1);
  SwitchingModel single = smds::random_switching_model(cfg, rng_c);
  CHECK(single.Phi(0, 0) == 1.0);
  CHECK(single.pi0(0) == 1.0);
}

TEST_CASE("noiseless series follows the deterministic recursion") {
  SimConfig cfg;
  cfg.M = 1;
  Rng rng(9);
  SwitchingModel model = smds::random_switching_model(cfg, rng);
  for (auto& rp : model.regimes) {
    rp.Q = Mat::Zero(cfg.d, cfg.d);
    rp.R = Mat::Zero(cfg.F, cfg.F);
  }
  Rng sim_rng(10);
  MultiscaleSeries series = smds::simulate_series(model, 50, sim_rng);
  Vec x = series.latents.row(0).transpose();
  for (int t = 1; t <= 50; ++t) {
    x = model.regimes[0].A * x;
    CHECK((series.latents.row(t).transpose() - x).cwiseAbs().maxCoeff() <
          1e-12);
    if (series.field_mask[t - 1]) {
      Vec y = model.regimes[0].C * x;
      CHECK((series.fields.row(t - 1).transpose() - y).cwiseAbs().maxCoeff() <
            1e-10);
    }
  }
}

TEST_CASE("field mask follows the configured period") {
  SimConfig cfg;
  cfg.M = 1;
  Rng rng(12);
  SwitchingModel model = smds::random_switching_model(cfg, rng);
  Rng sim_rng(13);
  MultiscaleSeries series = smds::simulate_series(model, 23, sim_rng);
  for (int i = 0; i < 23; ++i) {
    CHECK(static_cast<bool>(series.field_mask[i]) == (i % 5 == 0));
    if (!series.field_mask[i]) {
      CHECK(series.fields.row(i).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("constant-rate neuron matches the Poisson mean") {
  SimConfig cfg;
  cfg.d = 2;
  cfg.C = 1;
  cfg.F = 0;
  cfg.M = 1;
  cfg.shared_mode_pairs = 1;
  cfg.spike_only_pairs = 0;
  cfg.field_only_pairs = 0;
  Rng rng(31);
  SwitchingModel model = smds::random_switching_model(cfg, rng);
  model.regimes[0].alpha(0) = std::log(0.06);
  model.regimes[0].beta.setZero();
  Rng sim_rng(32);
  MultiscaleSeries series = smds::simulate_series(model, 10000, sim_rng);
  double mean = series.spikes.col(0).cast<double>().mean();
  CHECK(std::abs(mean - 0.06) < 3.0 * std::sqrt(0.06 / 10000.0));
}

TEST_CASE("regime dwell fraction matches the stay probability") {
  SimConfig cfg;
  cfg.d = 2;
  cfg.C = 1;
  cfg.F = 0;
  cfg.M = 2;
  cfg.shared_mode_pairs = 1;
  cfg.spike_only_pairs = 0;
  cfg.field_only_pairs = 0;
  Rng rng(41);
  SwitchingModel model = smds::random_switching_model(cfg, rng);
  Rng sim_rng(42);
  const int T = 10000;
  MultiscaleSeries series = smds::simulate_series(model, T, sim_rng);
  int stays = 0;
  for (int t = 1; t < T; ++t) {
    if (series.regimes[t] == series.regimes[t - 1]) ++stays;
  }
  double dwell = static_cast<double>(stays) / (T - 1);
  CHECK(std::abs(dwell - 0.99) < 0.01);
  double se = 3.0 * std::sqrt(0.99 * 0.01 / (T - 1));
  CHECK(std::abs(dwell - 0.99) < se + 0.003);
}

TEST_CASE("empirical field SNR lands near the configured band") {
  SimConfig cfg;
  cfg.M = 1;
  Rng rng(51);
  SwitchingModel model = smds::random_switching_model(cfg, rng);
  Rng sim_rng(52);
  const int T = 10000;
  MultiscaleSeries series = smds::simulate_series(model, T, sim_rng);
  const Mat& Cmat = model.regimes[0].C;
  for (int f = 0; f < cfg.F; f += 7) {
    double s1 = 0.0, s2 = 0.0;
    for (int t = 1; t <= T; ++t) {
      double v = Cmat.row(f).dot(series.latents.row(t));
      s1 += v;
      s2 += v * v;
    }
    double var = s2 / T - (s1 / T) * (s1 / T);
    double snr = std::sqrt(var / model.regimes[0].R(f, f));
    CHECK(snr > 0.25);
    CHECK(snr < 0.40);
  }
}

TEST_CASE("behavior traces follow the readout map") {
  SimConfig cfg;
  cfg.M = 1;
  Rng rng(61);
  SwitchingModel model = smds::random_switching_model(cfg, rng);
  Mat stat = smds::stationary_cov_of(model.regimes[0]);
  smds::BehaviorMap map = smds::random_behavior_map(cfg, stat, rng);
  Rng sim_rng(62);
  const int T = 4000;
  MultiscaleSeries series = smds::simulate_series(model, T, sim_rng, &map);
  REQUIRE(series.behavior.rows() == T);
  REQUIRE(series.behavior.cols() == 2);
  for (int b = 0; b < 2; ++b) {
    double sxy = 0.0, sxx = 0.0, syy = 0.0, sx = 0.0, sy = 0.0;
    for (int t = 1; t <= T; ++t) {
      double clean = map.H.row(b).dot(series.latents.row(t));
      double obs = series.behavior(t - 1, b);
      sx += clean;
      sy += obs;
      sxx += clean * clean;
      syy += obs * obs;
      sxy += clean * obs;
    }
    double n = T;
    double cc = (sxy - sx * sy / n) /
                std::sqrt((sxx - sx * sx / n) * (syy - sy * sy / n));
    CHECK(cc > 0.9);
  }
}

TEST_CASE("identical seeds reproduce the full series") {
  SimConfig cfg;
  cfg.M = 2;
  Rng rng(71);
  SwitchingModel model = smds::random_switching_model(cfg, rng);
  Rng s1(72), s2(72);
  MultiscaleSeries a = smds::simulate_series(model, 300, s1);
  MultiscaleSeries b = smds::simulate_series(model, 300, s2);
  CHECK(a.spikes == b.spikes);
  CHECK((a.fields - b.fields).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.regimes == b.regimes);
  CHECK((a.latents - b.latents).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("rate overflow aborts with a diagnostic") {
  SimConfig cfg;
  cfg.d = 2;
  cfg.C = 1;
  cfg.F = 0;
  cfg.M = 1;
  cfg.shared_mode_pairs = 1;
  cfg.spike_only_pairs = 0;
  cfg.field_only_pairs = 0;
  Rng rng(81);
  SwitchingModel model = smds::random_switching_model(cfg, rng);
  model.regimes[0].alpha(0) = 40.0;
  Rng sim_rng(82);
  CHECK_THROWS_AS(smds::simulate_series(model, 10, sim_rng),
                  smds::NumericError);
}
