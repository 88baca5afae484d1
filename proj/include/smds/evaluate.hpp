#pragma once

#include <limits>
#include <string>
#include <vector>

#include "smds/filtering.hpp"
#include "smds/model.hpp"

namespace smds {

/// Metric bundle for one fitted model on one series.  Values start as NaN and
/// are filled only for the streams the method consumes; normalized entries
/// divide by the true-model value of the same run when one is available.
struct EvalReport {
  double latent_cc = std::numeric_limits<double>::quiet_NaN();
  double latent_cc_normalized = std::numeric_limits<double>::quiet_NaN();
  double regime_accuracy = std::numeric_limits<double>::quiet_NaN();
  double field_pred_cc = std::numeric_limits<double>::quiet_NaN();
  double field_pred_cc_normalized = std::numeric_limits<double>::quiet_NaN();
  double spike_auc = std::numeric_limits<double>::quiet_NaN();
  double spike_pp = std::numeric_limits<double>::quiet_NaN();
  double spike_pp_normalized = std::numeric_limits<double>::quiet_NaN();
  double behavior_cc = std::numeric_limits<double>::quiet_NaN();
  Vec latent_cc_per_dim;
  Vec field_cc_per_dim;
  Vec spike_auc_per_neuron;  // NaN where a neuron was excluded
  Vec behavior_cc_per_dim;
};

/// Flat "key value" lines for every scalar metric.
std::string report_keyvals(const EvalReport& report);

/// Per-dimension table: metric,index,value rows with a header line.
std::string report_csv(const EvalReport& report);

struct AlignResult {
  Mat transform;  // d x d map applied on the right of x_hat
  Mat aligned;    // x_hat * transform
  bool ridge_used = false;
};

/// Least-squares linear map from estimated onto true latents.
AlignResult similarity_align(const Mat& x_hat, const Mat& x_true);

/// Per-dimension Pearson correlation, averaged.  Zero-variance dimensions
/// score 0 and are reported through flagged when given.
double latent_cc(const Mat& x_hat, const Mat& x_true, Vec* per_dim = nullptr,
                 std::vector<int>* flagged = nullptr);

/// Largest mean agreement over all M! relabelings of s_hat; labels are
/// 1-based.  Refuses M > 8 unless allow_large is set.
double regime_accuracy(const std::vector<int>& s_true,
                       const std::vector<int>& s_hat, int M,
                       bool allow_large = false);

/// Pearson correlation of the one-step field prediction, mixing per-regime
/// predictions with the predicted regime probabilities, against the observed
/// frames; per feature, averaged.
double field_prediction_cc(const SwitchingModel& model,
                           const MultiscaleSeries& series,
                           const FilterResult& fr, Vec* per_dim = nullptr);

struct SpikePpResult {
  double auc;            // mean over included neurons
  double pp;             // 2 * auc - 1
  Vec per_neuron_auc;    // NaN for excluded neurons
  std::vector<int> excluded;
};

/// One-step spike prediction skill.  The score of step t is the predicted
/// probability of at least one count, obtained as the cubature expectation of
/// 1 - exp(-rate) under each regime's predicted belief, mixed with the
/// predicted regime probabilities; ranked against the binary outcome per
/// neuron with a midrank area under the curve.  Neurons whose outcome never
/// varies are excluded from the average.
SpikePpResult spike_pp(const SwitchingModel& model,
                       const MultiscaleSeries& series, const FilterResult& fr);

/// Linear readout with intercept fit on the training pair and scored on the
/// test pair; per behavior dimension Pearson correlation, averaged.
double behavior_decode_cc(const Mat& train_x, const Mat& train_b,
                          const Mat& test_x, const Mat& test_b,
                          Vec* per_dim = nullptr, bool* ridge_used = nullptr);

/// Two-sided Wilcoxon signed-rank p-value for paired samples: exact sign-flip
/// distribution up to n = 50 nonzero differences, normal approximation with
/// tie correction beyond.  All-zero differences give p = 1.
double paired_test(const std::vector<double>& values_a,
                   const std::vector<double>& values_b);

/// Benjamini-Hochberg step-up rejection flags at level q, in input order.
std::vector<char> bh_correct(const std::vector<double>& p_values, double q);

}  // namespace smds
