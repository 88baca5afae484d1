#include "smds/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "smds/cubature.hpp"
#include "smds/linalg.hpp"

namespace smds {

namespace {

double pearson(const Vec& a, const Vec& b, bool* degenerate = nullptr) {
  const int n = static_cast<int>(a.size());
  double ma = a.mean();
  double mb = b.mean();
  double va = 0.0, vb = 0.0, cov = 0.0;
  for (int i = 0; i < n; ++i) {
    double da = a(i) - ma;
    double db = b(i) - mb;
    va += da * da;
    vb += db * db;
    cov += da * db;
  }
  if (va <= 0.0 || vb <= 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  if (degenerate) *degenerate = false;
  return cov / std::sqrt(va * vb);
}

// Midrank AUC of scores against binary labels.
double rank_auc(const Vec& scores, const std::vector<char>& labels) {
  const int n = static_cast<int>(scores.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return scores(a) < scores(b); });
  std::vector<double> rank(n);
  int i = 0;
  while (i < n) {
    int j = i;
    while (j + 1 < n && scores(order[j + 1]) == scores(order[i])) ++j;
    double mid = 0.5 * (i + j) + 1.0;
    for (int k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos_ranks = 0.0;
  long long n_pos = 0;
  for (int t = 0; t < n; ++t) {
    if (labels[t]) {
      pos_ranks += rank[t];
      ++n_pos;
    }
  }
  long long n_neg = n - n_pos;
  return (pos_ranks - 0.5 * n_pos * (n_pos + 1)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double phi_upper(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

void append_per_dim(std::ostringstream& out, const char* name,
                    const Vec& values) {
  for (int i = 0; i < values.size(); ++i) {
    out << name << "," << i + 1 << ",";
    // NaN cells are written empty so the file stays locale-free
    if (std::isfinite(values(i))) out << values(i);
    out << "\n";
  }
}

void append_keyval(std::ostringstream& out, const char* name, double value) {
  // metrics that were never computed stay out of the report entirely
  if (!std::isfinite(value)) return;
  out << name << " " << value << "\n";
}

}  // namespace

std::string report_keyvals(const EvalReport& report) {
  std::ostringstream out;
  out.precision(12);
  append_keyval(out, "latent_cc", report.latent_cc);
  append_keyval(out, "latent_cc_normalized", report.latent_cc_normalized);
  append_keyval(out, "regime_accuracy", report.regime_accuracy);
  append_keyval(out, "field_pred_cc", report.field_pred_cc);
  append_keyval(out, "field_pred_cc_normalized",
                report.field_pred_cc_normalized);
  append_keyval(out, "spike_auc", report.spike_auc);
  append_keyval(out, "spike_pp", report.spike_pp);
  append_keyval(out, "spike_pp_normalized", report.spike_pp_normalized);
  append_keyval(out, "behavior_cc", report.behavior_cc);
  return out.str();
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream out;
  out.precision(12);
  out << "metric,index,value\n";
  append_per_dim(out, "latent_cc", report.latent_cc_per_dim);
  append_per_dim(out, "field_pred_cc", report.field_cc_per_dim);
  append_per_dim(out, "spike_auc", report.spike_auc_per_neuron);
  append_per_dim(out, "behavior_cc", report.behavior_cc_per_dim);
  return out.str();
}

AlignResult similarity_align(const Mat& x_hat, const Mat& x_true) {
  if (x_hat.rows() != x_true.rows() || x_hat.cols() != x_true.cols()) {
    throw ConfigError("similarity_align: shape mismatch");
  }
  const int d = static_cast<int>(x_hat.cols());
  if (x_hat.rows() <= d) {
    throw ConfigError("similarity_align: needs more steps than dimensions");
  }
  AlignResult res;
  Mat G = symmetrize(x_hat.transpose() * x_hat);
  Eigen::SelfAdjointEigenSolver<Mat> es(G);
  double max_eig = std::max(es.eigenvalues().maxCoeff(), 0.0);
  if (es.eigenvalues().minCoeff() <= 1e-8 * std::max(1.0, max_eig)) {
    G += 1e-8 * Mat::Identity(d, d);
    res.ridge_used = true;
  }
  res.transform = G.ldlt().solve(x_hat.transpose() * x_true);
  res.aligned = x_hat * res.transform;
  return res;
}

double latent_cc(const Mat& x_hat, const Mat& x_true, Vec* per_dim,
                 std::vector<int>* flagged) {
  if (x_hat.rows() != x_true.rows() || x_hat.cols() != x_true.cols()) {
    throw ConfigError("latent_cc: shape mismatch");
  }
  const int d = static_cast<int>(x_hat.cols());
  Vec cc(d);
  for (int k = 0; k < d; ++k) {
    bool degenerate = false;
    cc(k) = pearson(x_hat.col(k), x_true.col(k), &degenerate);
    if (degenerate && flagged) flagged->push_back(k);
  }
  if (per_dim) *per_dim = cc;
  return cc.mean();
}

double regime_accuracy(const std::vector<int>& s_true,
                       const std::vector<int>& s_hat, int M,
                       bool allow_large) {
  if (s_true.size() != s_hat.size() || s_true.empty()) {
    throw ConfigError("regime_accuracy: sequences must match and be nonempty");
  }
  if (M < 1) throw ConfigError("regime_accuracy: M must be >= 1");
  if (M > 8 && !allow_large) {
    throw ConfigError(
        "regime_accuracy: exhaustive search over " + std::to_string(M) +
        "! relabelings refused; pass allow_large to override");
  }
  const int T = static_cast<int>(s_true.size());
  // agree(a, b): steps where relabeling b as a would match the truth
  Mat agree = Mat::Zero(M, M);
  for (int t = 0; t < T; ++t) {
    int st = s_true[t] - 1;
    int sh = s_hat[t] - 1;
    if (st < 0 || st >= M || sh < 0 || sh >= M) {
      throw ConfigError("regime_accuracy: label outside 1.." +
                        std::to_string(M) + " at step " + std::to_string(t + 1));
    }
    agree(st, sh) += 1.0;
  }
  std::vector<int> perm(M);
  std::iota(perm.begin(), perm.end(), 0);
  double best = 0.0;
  do {
    double hits = 0.0;
    for (int b = 0; b < M; ++b) hits += agree(perm[b], b);
    best = std::max(best, hits);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / T;
}

double field_prediction_cc(const SwitchingModel& model,
                           const MultiscaleSeries& series,
                           const FilterResult& fr, Vec* per_dim) {
  const int T = series.num_steps();
  const int F = model.num_fields();
  const int M = model.num_regimes();
  if (F == 0) throw ConfigError("field_prediction_cc: model has no fields");
  if (static_cast<int>(fr.steps.size()) != T) {
    throw ConfigError("field_prediction_cc: filter output length mismatch");
  }
  std::vector<int> rows;
  for (int t = 0; t < T; ++t) {
    if (series.has_field(t)) rows.push_back(t);
  }
  if (rows.empty()) {
    throw ConfigError("field_prediction_cc: series has no field frames");
  }
  Mat pred(static_cast<int>(rows.size()), F);
  Mat actual(static_cast<int>(rows.size()), F);
  for (size_t i = 0; i < rows.size(); ++i) {
    int t = rows[i];
    Vec y_hat = Vec::Zero(F);
    for (int j = 0; j < M; ++j) {
      y_hat += fr.steps[t].regime_pred_prob(j) *
               (model.regimes[j].C * fr.steps[t].per_regime_pred[j].mean);
    }
    pred.row(i) = y_hat.transpose();
    actual.row(i) = series.fields.row(t);
  }
  Vec cc(F);
  for (int f = 0; f < F; ++f) cc(f) = pearson(pred.col(f), actual.col(f));
  if (per_dim) *per_dim = cc;
  return cc.mean();
}

SpikePpResult spike_pp(const SwitchingModel& model,
                       const MultiscaleSeries& series, const FilterResult& fr) {
  const int T = series.num_steps();
  const int C = model.num_cells();
  const int M = model.num_regimes();
  const int d = model.latent_dim();
  if (C == 0) throw ConfigError("spike_pp: model has no spike channels");
  if (static_cast<int>(fr.steps.size()) != T) {
    throw ConfigError("spike_pp: filter output length mismatch");
  }
  CubatureSet cub = cubature_points(d);
  const int P = cub.count();

  Mat scores(T, C);
  for (int t = 0; t < T; ++t) {
    Vec score = Vec::Zero(C);
    for (int j = 0; j < M; ++j) {
      const GaussianBelief& pred = fr.steps[t].per_regime_pred[j];
      Mat L = chol_lower_robust(pred.cov);
      Vec p_hit = Vec::Zero(C);
      for (int p = 0; p < P; ++p) {
        Vec x = pred.mean + L * cub.points.col(p);
        Vec logr = model.regimes[j].alpha + model.regimes[j].beta * x;
        for (int c = 0; c < C; ++c) {
          double rate = std::exp(std::min(logr(c), 700.0));
          p_hit(c) += cub.weights(p) * (1.0 - std::exp(-rate));
        }
      }
      // negative cubature weights can push the value out of [0, 1]
      p_hit = p_hit.cwiseMax(0.0).cwiseMin(1.0);
      score += fr.steps[t].regime_pred_prob(j) * p_hit;
    }
    scores.row(t) = score.transpose();
  }

  SpikePpResult res;
  res.per_neuron_auc = Vec::Constant(C, std::numeric_limits<double>::quiet_NaN());
  double auc_sum = 0.0;
  int included = 0;
  for (int c = 0; c < C; ++c) {
    std::vector<char> labels(T);
    int n_pos = 0;
    for (int t = 0; t < T; ++t) {
      labels[t] = series.spikes(t, c) >= 1;
      n_pos += labels[t];
    }
    if (n_pos == 0 || n_pos == T) {
      res.excluded.push_back(c);
      continue;
    }
    double auc = rank_auc(scores.col(c), labels);
    res.per_neuron_auc(c) = auc;
    auc_sum += auc;
    ++included;
  }
  res.auc = included > 0 ? auc_sum / included
                         : std::numeric_limits<double>::quiet_NaN();
  res.pp = 2.0 * res.auc - 1.0;
  return res;
}

double behavior_decode_cc(const Mat& train_x, const Mat& train_b,
                          const Mat& test_x, const Mat& test_b, Vec* per_dim,
                          bool* ridge_used) {
  if (train_x.rows() != train_b.rows() || test_x.rows() != test_b.rows() ||
      train_x.cols() != test_x.cols() || train_b.cols() != test_b.cols()) {
    throw ConfigError("behavior_decode_cc: shape mismatch");
  }
  const int d = static_cast<int>(train_x.cols());
  const int B = static_cast<int>(train_b.cols());
  const int n_train = static_cast<int>(train_x.rows());
  if (n_train <= d + 1) {
    throw ConfigError("behavior_decode_cc: too few training rows");
  }
  Mat Z(n_train, d + 1);
  Z.col(0).setOnes();
  Z.rightCols(d) = train_x;
  Mat G = symmetrize(Z.transpose() * Z);
  Eigen::SelfAdjointEigenSolver<Mat> es(G);
  double max_eig = std::max(es.eigenvalues().maxCoeff(), 0.0);
  bool ridged = false;
  if (es.eigenvalues().minCoeff() <= 1e-8 * std::max(1.0, max_eig)) {
    G += 1e-8 * Mat::Identity(d + 1, d + 1);
    ridged = true;
  }
  if (ridge_used) *ridge_used = ridged;
  Mat coeffs = G.ldlt().solve(Z.transpose() * train_b);  // (d+1) x B

  Mat Zt(test_x.rows(), d + 1);
  Zt.col(0).setOnes();
  Zt.rightCols(d) = test_x;
  Mat pred = Zt * coeffs;
  Vec cc(B);
  for (int b = 0; b < B; ++b) cc(b) = pearson(pred.col(b), test_b.col(b));
  if (per_dim) *per_dim = cc;
  return cc.mean();
}

double paired_test(const std::vector<double>& values_a,
                   const std::vector<double>& values_b) {
  if (values_a.size() != values_b.size() || values_a.empty()) {
    throw ConfigError("paired_test: samples must match and be nonempty");
  }
  std::vector<double> diffs;
  for (size_t i = 0; i < values_a.size(); ++i) {
    double delta = values_a[i] - values_b[i];
    if (delta != 0.0) diffs.push_back(delta);
  }
  const int n = static_cast<int>(diffs.size());
  if (n == 0) return 1.0;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return std::abs(diffs[a]) < std::abs(diffs[b]);
  });
  // midranks scaled by two so ties stay on an integer grid
  std::vector<long long> rank2(n);
  {
    int i = 0;
    while (i < n) {
      int j = i;
      while (j + 1 < n &&
             std::abs(diffs[order[j + 1]]) == std::abs(diffs[order[i]])) {
        ++j;
      }
      long long mid2 = i + j + 2;  // 2 * (average 1-based rank)
      for (int k = i; k <= j; ++k) rank2[order[k]] = mid2;
      i = j + 1;
    }
  }
  long long w2 = 0;
  long long total2 = 0;
  for (int i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (diffs[i] > 0.0) w2 += rank2[i];
  }

  if (n <= 50) {
    long long hi2 = std::max(w2, total2 - w2);
    std::vector<double> ways(total2 + 1, 0.0);
    ways[0] = 1.0;
    for (int i = 0; i < n; ++i) {
      for (long long s = total2; s >= rank2[i]; --s) {
        ways[s] += ways[s - rank2[i]];
      }
    }
    double upper = 0.0;
    for (long long s = hi2; s <= total2; ++s) upper += ways[s];
    double p = 2.0 * upper / std::pow(2.0, n);
    return std::min(1.0, p);
  }

  double mean = n * (n + 1) / 4.0;
  double var = n * (n + 1) * (2.0 * n + 1) / 24.0;
  {  // tie correction over groups of equal scaled ranks
    std::vector<long long> sorted(rank2);
    std::sort(sorted.begin(), sorted.end());
    size_t i = 0;
    while (i < sorted.size()) {
      size_t j = i;
      while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
      double t = static_cast<double>(j - i + 1);
      var -= (t * t * t - t) / 48.0;
      i = j + 1;
    }
  }
  double w = 0.5 * static_cast<double>(w2);
  double z = (std::abs(w - mean) - 0.5) / std::sqrt(var);
  double p = 2.0 * phi_upper(std::max(z, 0.0));
  return std::min(1.0, p);
}

std::vector<char> bh_correct(const std::vector<double>& p_values, double q) {
  if (!(q > 0.0 && q < 1.0)) {
    throw ConfigError("bh_correct: q must lie in (0, 1)");
  }
  const int m = static_cast<int>(p_values.size());
  std::vector<char> reject(m, 0);
  if (m == 0) return reject;
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return p_values[a] < p_values[b]; });
  int cutoff = -1;
  for (int k = m; k >= 1; --k) {
    if (p_values[order[k - 1]] <= q * k / m) {
      cutoff = k;
      break;
    }
  }
  for (int k = 0; k < cutoff; ++k) reject[order[k]] = 1;
  return reject;
}

}  // namespace smds
