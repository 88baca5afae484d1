#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "smds/evaluate.hpp"
#include "smds/learning.hpp"
#include "smds/simulate.hpp"

namespace smds {

/// Fit methods of the batch runner.  The kf/pcf/msnf family is stationary
/// (M=1); the s-prefixed family is the switching counterpart (M>=2).
enum class Method { kKfEm, kPcfEm, kMsnfEm, kSkfEm, kSpcfEm, kSmsnfEm };

Method method_from_string(const std::string& name);
std::string method_name(Method method);
Modality method_modality(Method method);
bool method_is_switching(Method method);

struct FusionConfig {
  std::string base_modality = "field";  // "field" or "spike"
  int base_channels = 5;
  std::vector<int> added_channels = {0, 5, 10, 20};
  int repeats = 3;
};

/// Settings for one batch command.  The top-level seed drives every random
/// choice; the seeds inside sim/em are overwritten by finalize_config.
struct ExperimentConfig {
  SimConfig sim;
  EmConfig em;
  Method method = Method::kSmsnfEm;
  std::vector<Method> methods;  // xval comparison set; empty means {method}
  int folds = 5;
  std::vector<double> tau_grid = {0.01, 0.05, 0.1, 0.2, 0.5, 1.0};
  FusionConfig fusion;
  std::uint64_t seed = 0;
  int workers = 1;
  bool force = false;
  // set when the config file or CLI pinned the value explicitly
  bool modality_explicit = false;
  bool regimes_explicit = false;
};

/// Reads a JSON config; unknown keys are rejected so typos cannot silently
/// fall back to defaults.
ExperimentConfig load_experiment_config(const std::string& path);

/// Fills method-implied settings (modality, regime count) where they were not
/// pinned, propagates the top-level seed, and rejects inconsistent
/// method/modality/M combinations.
void finalize_config(ExperimentConfig& cfg);

/// Derived per-method EM settings used by xval and fit.
EmConfig em_config_for_method(const ExperimentConfig& cfg, Method method);

/// Contiguous fold k of `folds` over T steps as a [begin, end) pair; the
/// blocks partition 0..T exactly.
std::pair<int, int> fold_bounds(int T, int folds, int k);

/// Steps [begin, end) of a series, with latents keeping the state row just
/// before the block.
MultiscaleSeries slice_series(const MultiscaleSeries& series, int begin,
                              int end);

/// The complement of [begin, end), pieces joined in time order.
MultiscaleSeries splice_out(const MultiscaleSeries& series, int begin, int end);

/// Column subsets of the spike and field blocks.
MultiscaleSeries select_channels(const MultiscaleSeries& series,
                                 const std::vector<int>& spike_idx,
                                 const std::vector<int>& field_idx);

/// Filtered merged state means as a T x d matrix.
Mat filtered_latents(const FilterResult& fr);

/// Runs the causal filter and fills every metric the model and series
/// support: latent CC when ground-truth latents exist, regime accuracy when
/// labels exist and the model switches, field prediction CC and spike
/// predictive power per available stream, and the true-model-normalized
/// variants when true_model is given.  Behavior decoding needs a train/test
/// pair and is filled by the commands that have one.
EvalReport evaluate_model_on(const SwitchingModel& model,
                             const MultiscaleSeries& series,
                             const SwitchingModel* true_model = nullptr);

/// One fusion work item: the channel subsets are prefixes of one shuffled
/// order per repeat, so larger added counts nest the smaller ones, and the
/// EM seed depends only on the repeat so curves are paired.
struct FusionItem {
  int repeat = 0;
  int added_count = 0;
  std::vector<int> base_idx;
  std::vector<int> added_idx;
  std::uint64_t em_seed = 0;
};

std::vector<FusionItem> fusion_plan(const ExperimentConfig& cfg, int C, int F);

/// Runs items[i]() for all i across `workers` threads; the first exception
/// wins and is rethrown after all threads join.
void run_work_queue(int workers, const std::vector<std::function<void()>>& items);

// Batch commands.  Every command writes its outputs plus a manifest.json
// (inputs, canonical config echo, config hash, library versions) under
// out_dir and is deterministic given (config, seed).

/// Simulates one system and writes train/, test/, true_model.json.
void cmd_simulate(const ExperimentConfig& cfg, const std::string& out_dir);

/// Fits the configured method on a bundle; writes model.json, fit_log.json.
void cmd_fit(const ExperimentConfig& cfg, const std::string& bundle_dir,
             const std::string& out_dir);

/// Evaluates a model file on a bundle; writes report.txt, report.csv.
EvalReport cmd_eval(const std::string& model_path,
                    const std::string& bundle_dir,
                    const std::string& true_model_path,
                    const std::string& out_dir);

/// Inner 4-fold cross-validated grid search for the field likelihood scale,
/// fit with the stationary multiscale method; ties break toward the smallest
/// value.  Writes tau_sweep.csv, chosen_tau.txt; returns the chosen tau.
double cmd_sweep_tau(const ExperimentConfig& cfg, const std::string& bundle_dir,
                     const std::string& out_dir);

/// Contiguous-block cross-validation of one or more methods; writes per-fold
/// reports, aggregate.csv, and comparisons.csv with signed-rank tests and
/// step-up correction when several methods are listed.
void cmd_xval(const ExperimentConfig& cfg, const std::string& bundle_dir,
              const std::string& out_dir);

/// Channel-fusion curve: fixed base channels of one modality plus growing
/// subsets of the other; writes fusion.csv with one row per (repeat, added).
void cmd_fusion_sweep(const ExperimentConfig& cfg,
                      const std::string& bundle_dir,
                      const std::string& out_dir);

}  // namespace smds
