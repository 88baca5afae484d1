#pragma once

#include <vector>

#include "smds/filtering.hpp"

namespace smds {

/// Backward-pass output over a full series.  Time indexing: merged covers
/// t = 0..T; per-regime quantities cover t = 1..T at index t-1; W row t-1 is
/// the smoothed regime distribution at step t; Wpair[t-2] pairs step t-1
/// (rows) with step t (columns) for t = 2..T.  cross[t-1][j] and
/// prev2[t-1][j] are the transition moments <x_t x_{t-1}'> and
/// <x_{t-1} x_{t-1}'> conditioned on the step-t regime j, with gain[t-1][j]
/// the matching mixture-averaged smoother gain.
struct SmoothedStats {
  std::vector<GaussianBelief> merged;
  std::vector<std::vector<GaussianBelief>> per_regime;
  Mat W;
  std::vector<Mat> Wpair;
  std::vector<std::vector<Mat>> cross;
  std::vector<std::vector<Mat>> prev2;
  std::vector<std::vector<Vec>> prev_mean;
  std::vector<std::vector<Mat>> gain;
};

SmoothedStats sms_run(const SwitchingModel& model, const FilterResult& fr);

}  // namespace smds
