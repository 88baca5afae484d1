#include "smds/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "smds/bundle.hpp"
#include "smds/filtering.hpp"

namespace smds {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr std::uint64_t kFusionShuffleSalt = 0x66757365;
constexpr std::uint64_t kFusionFitSalt = 0x66697473;

std::string format_real(double v) {
  if (std::isnan(v)) return std::string();
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out.good()) throw IoError("write failed for " + path.string());
}

void make_out_dir(const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir);
}

struct MethodRow {
  Method method;
  const char* name;
  Modality modality;
  bool switching;
};

constexpr MethodRow kMethods[] = {
    {Method::kKfEm, "kf-em", Modality::kGaussianOnly, false},
    {Method::kPcfEm, "pcf-em", Modality::kPoissonOnly, false},
    {Method::kMsnfEm, "msnf-em", Modality::kMultiscale, false},
    {Method::kSkfEm, "skf-em", Modality::kGaussianOnly, true},
    {Method::kSpcfEm, "spcf-em", Modality::kPoissonOnly, true},
    {Method::kSmsnfEm, "smsnf-em", Modality::kMultiscale, true},
};

const MethodRow& method_row(Method m) {
  for (const MethodRow& row : kMethods) {
    if (row.method == m) return row;
  }
  throw ConfigError("unknown method id");
}

std::string modality_name(Modality m) {
  switch (m) {
    case Modality::kMultiscale:
      return "multiscale";
    case Modality::kGaussianOnly:
      return "gaussian-only";
    case Modality::kPoissonOnly:
      return "poisson-only";
  }
  throw ConfigError("unknown modality id");
}

Modality modality_from_string(const std::string& name) {
  if (name == "multiscale") return Modality::kMultiscale;
  if (name == "gaussian-only") return Modality::kGaussianOnly;
  if (name == "poisson-only") return Modality::kPoissonOnly;
  throw ConfigError("config: unknown modality '" + name + "'");
}

void expect_keys(const json& obj, const std::string& where,
                 std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError("config: unknown key '" + item.key() + "' in " +
                        where);
    }
  }
}

template <typename T>
void read_key(const json& obj, const std::string& where, const char* key,
              T& out) {
  if (!obj.contains(key)) return;
  try {
    obj.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError("config: bad value for " + where + "." + key + ": " +
                      e.what());
  }
}

void read_range(const json& obj, const std::string& where, const char* key,
                std::array<double, 2>& out) {
  if (!obj.contains(key)) return;
  std::vector<double> vals;
  read_key(obj, where, key, vals);
  if (vals.size() != 2) {
    throw ConfigError("config: " + where + "." + key +
                      " must be a two-element array");
  }
  out = {vals[0], vals[1]};
}

void parse_sim(const json& obj, SimConfig& sim) {
  expect_keys(obj, "sim",
              {"d", "C", "F", "M", "T_train", "T_test", "dt_ms",
               "field_period_steps", "stay_prob", "eig_radius_range",
               "eig_angle_range", "shared_mode_pairs", "spike_only_pairs",
               "field_only_pairs", "q_eig_range", "base_rate_hz_range",
               "max_rate_hz_range", "field_value_range", "snr_range",
               "behavior_dims", "behavior_noise_std"});
  read_key(obj, "sim", "d", sim.d);
  read_key(obj, "sim", "C", sim.C);
  read_key(obj, "sim", "F", sim.F);
  read_key(obj, "sim", "M", sim.M);
  read_key(obj, "sim", "T_train", sim.T_train);
  read_key(obj, "sim", "T_test", sim.T_test);
  read_key(obj, "sim", "dt_ms", sim.dt_ms);
  read_key(obj, "sim", "field_period_steps", sim.field_period_steps);
  read_key(obj, "sim", "stay_prob", sim.stay_prob);
  read_range(obj, "sim", "eig_radius_range", sim.eig_radius_range);
  read_range(obj, "sim", "eig_angle_range", sim.eig_angle_range);
  read_key(obj, "sim", "shared_mode_pairs", sim.shared_mode_pairs);
  read_key(obj, "sim", "spike_only_pairs", sim.spike_only_pairs);
  read_key(obj, "sim", "field_only_pairs", sim.field_only_pairs);
  read_range(obj, "sim", "q_eig_range", sim.q_eig_range);
  read_range(obj, "sim", "base_rate_hz_range", sim.base_rate_hz_range);
  read_range(obj, "sim", "max_rate_hz_range", sim.max_rate_hz_range);
  read_range(obj, "sim", "field_value_range", sim.field_value_range);
  read_range(obj, "sim", "snr_range", sim.snr_range);
  read_key(obj, "sim", "behavior_dims", sim.behavior_dims);
  read_key(obj, "sim", "behavior_noise_std", sim.behavior_noise_std);
}

void parse_em(const json& obj, ExperimentConfig& cfg) {
  expect_keys(obj, "em",
              {"M", "d", "max_iters", "modality", "tau",
               "share_observation_params", "init_A_scale", "init_stay_prob",
               "convergence_tol", "newton_max_iters", "newton_tol"});
  if (obj.contains("M")) {
    read_key(obj, "em", "M", cfg.em.M);
    cfg.regimes_explicit = true;
  }
  if (obj.contains("modality")) {
    std::string name;
    read_key(obj, "em", "modality", name);
    cfg.em.modality = modality_from_string(name);
    cfg.modality_explicit = true;
  }
  read_key(obj, "em", "d", cfg.em.d);
  read_key(obj, "em", "max_iters", cfg.em.max_iters);
  read_key(obj, "em", "tau", cfg.em.tau);
  read_key(obj, "em", "share_observation_params",
           cfg.em.share_observation_params);
  read_key(obj, "em", "init_A_scale", cfg.em.init_A_scale);
  read_key(obj, "em", "init_stay_prob", cfg.em.init_stay_prob);
  read_key(obj, "em", "convergence_tol", cfg.em.convergence_tol);
  read_key(obj, "em", "newton_max_iters", cfg.em.newton_max_iters);
  read_key(obj, "em", "newton_tol", cfg.em.newton_tol);
}

void parse_fusion(const json& obj, FusionConfig& fusion) {
  expect_keys(obj, "fusion",
              {"base_modality", "base_channels", "added_channels", "repeats"});
  read_key(obj, "fusion", "base_modality", fusion.base_modality);
  read_key(obj, "fusion", "base_channels", fusion.base_channels);
  read_key(obj, "fusion", "added_channels", fusion.added_channels);
  read_key(obj, "fusion", "repeats", fusion.repeats);
}

json range_to_json(const std::array<double, 2>& r) {
  return json::array({r[0], r[1]});
}

json config_to_json(const ExperimentConfig& cfg) {
  json sim;
  sim["d"] = cfg.sim.d;
  sim["C"] = cfg.sim.C;
  sim["F"] = cfg.sim.F;
  sim["M"] = cfg.sim.M;
  sim["T_train"] = cfg.sim.T_train;
  sim["T_test"] = cfg.sim.T_test;
  sim["dt_ms"] = cfg.sim.dt_ms;
  sim["field_period_steps"] = cfg.sim.field_period_steps;
  sim["stay_prob"] = cfg.sim.stay_prob;
  sim["eig_radius_range"] = range_to_json(cfg.sim.eig_radius_range);
  sim["eig_angle_range"] = range_to_json(cfg.sim.eig_angle_range);
  sim["shared_mode_pairs"] = cfg.sim.shared_mode_pairs;
  sim["spike_only_pairs"] = cfg.sim.spike_only_pairs;
  sim["field_only_pairs"] = cfg.sim.field_only_pairs;
  sim["q_eig_range"] = range_to_json(cfg.sim.q_eig_range);
  sim["base_rate_hz_range"] = range_to_json(cfg.sim.base_rate_hz_range);
  sim["max_rate_hz_range"] = range_to_json(cfg.sim.max_rate_hz_range);
  sim["field_value_range"] = range_to_json(cfg.sim.field_value_range);
  sim["snr_range"] = range_to_json(cfg.sim.snr_range);
  sim["behavior_dims"] = cfg.sim.behavior_dims;
  sim["behavior_noise_std"] = cfg.sim.behavior_noise_std;

  json em;
  em["M"] = cfg.em.M;
  em["d"] = cfg.em.d;
  em["max_iters"] = cfg.em.max_iters;
  em["modality"] = modality_name(cfg.em.modality);
  em["tau"] = cfg.em.tau;
  em["share_observation_params"] = cfg.em.share_observation_params;
  em["init_A_scale"] = cfg.em.init_A_scale;
  em["init_stay_prob"] = cfg.em.init_stay_prob;
  em["convergence_tol"] = cfg.em.convergence_tol;
  em["newton_max_iters"] = cfg.em.newton_max_iters;
  em["newton_tol"] = cfg.em.newton_tol;

  json fusion;
  fusion["base_modality"] = cfg.fusion.base_modality;
  fusion["base_channels"] = cfg.fusion.base_channels;
  fusion["added_channels"] = cfg.fusion.added_channels;
  fusion["repeats"] = cfg.fusion.repeats;

  json out;
  out["sim"] = sim;
  out["em"] = em;
  out["method"] = method_name(cfg.method);
  json methods = json::array();
  for (Method m : cfg.methods) methods.push_back(method_name(m));
  out["methods"] = methods;
  out["folds"] = cfg.folds;
  out["tau_grid"] = cfg.tau_grid;
  out["fusion"] = fusion;
  out["seed"] = cfg.seed;
  out["workers"] = cfg.workers;
  return out;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

void write_manifest(const std::string& out_dir, const std::string& command,
                    const ExperimentConfig* cfg,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
  json manifest;
  manifest["command"] = command;
  if (cfg != nullptr) {
    json echo = config_to_json(*cfg);
    manifest["config"] = echo;
    manifest["config_hash"] = hex64(fnv1a(echo.dump()));
  }
  manifest["inputs"] = inputs;
  manifest["outputs"] = outputs;
  json versions;
  versions["smds"] = kVersion;
  versions["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." +
                      std::to_string(EIGEN_MAJOR_VERSION) + "." +
                      std::to_string(EIGEN_MINOR_VERSION);
  versions["nlohmann_json"] = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) +
                              "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) +
                              "." + std::to_string(NLOHMANN_JSON_VERSION_PATCH);
  manifest["versions"] = versions;
  write_text(fs::path(out_dir) / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<int> shuffled_indices(int n, Rng& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

std::string join_indices(const std::vector<int>& idx) {
  std::string out;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (i > 0) out += ';';
    out += std::to_string(idx[i]);
  }
  return out;
}

double decode_cc(const SwitchingModel& model, const MultiscaleSeries& train,
                 const MultiscaleSeries& test, Vec* per_dim = nullptr) {
  FilterResult fr_train = smsnf_filter(model, train);
  FilterResult fr_test = smsnf_filter(model, test);
  return behavior_decode_cc(filtered_latents(fr_train), train.behavior,
                            filtered_latents(fr_test), test.behavior, per_dim);
}

void check_eval_dims(const SwitchingModel& model,
                     const MultiscaleSeries& series) {
  if (model.num_cells() > 0 && series.num_cells() != model.num_cells()) {
    throw ConfigError("eval: model expects " +
                      std::to_string(model.num_cells()) +
                      " spike channels, bundle has " +
                      std::to_string(series.num_cells()));
  }
  if (model.num_fields() > 0 && series.num_fields() != model.num_fields()) {
    throw ConfigError("eval: model expects " +
                      std::to_string(model.num_fields()) +
                      " field channels, bundle has " +
                      std::to_string(series.num_fields()));
  }
}

}  // namespace

Method method_from_string(const std::string& name) {
  for (const MethodRow& row : kMethods) {
    if (name == row.name) return row.method;
  }
  throw ConfigError("unknown method '" + name +
                    "' (expected one of kf-em, pcf-em, msnf-em, skf-em, "
                    "spcf-em, smsnf-em)");
}

std::string method_name(Method method) { return method_row(method).name; }

Modality method_modality(Method method) { return method_row(method).modality; }

bool method_is_switching(Method method) { return method_row(method).switching; }

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path);
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  if (!root.is_object()) {
    throw ConfigError("config " + path + ": top level must be an object");
  }
  expect_keys(root, "top level",
              {"sim", "em", "method", "methods", "folds", "tau_grid", "fusion",
               "seed", "workers"});
  ExperimentConfig cfg;
  if (root.contains("sim")) parse_sim(root["sim"], cfg.sim);
  if (root.contains("em")) parse_em(root["em"], cfg);
  if (root.contains("method")) {
    std::string name;
    read_key(root, "top level", "method", name);
    cfg.method = method_from_string(name);
  }
  if (root.contains("methods")) {
    std::vector<std::string> names;
    read_key(root, "top level", "methods", names);
    cfg.methods.clear();
    for (const std::string& n : names) {
      cfg.methods.push_back(method_from_string(n));
    }
  }
  read_key(root, "top level", "folds", cfg.folds);
  read_key(root, "top level", "tau_grid", cfg.tau_grid);
  if (root.contains("fusion")) parse_fusion(root["fusion"], cfg.fusion);
  read_key(root, "top level", "seed", cfg.seed);
  read_key(root, "top level", "workers", cfg.workers);
  return cfg;
}

void finalize_config(ExperimentConfig& cfg) {
  if (!cfg.modality_explicit) {
    cfg.em.modality = method_modality(cfg.method);
  }
  if (!cfg.regimes_explicit) {
    cfg.em.M =
        method_is_switching(cfg.method) ? std::max(2, cfg.em.M) : 1;
  }
  const std::string name = method_name(cfg.method);
  if (cfg.em.modality != method_modality(cfg.method)) {
    throw ConfigError("method " + name + " requires the " +
                      modality_name(method_modality(cfg.method)) +
                      " modality, config says " +
                      modality_name(cfg.em.modality));
  }
  if (method_is_switching(cfg.method)) {
    if (cfg.em.M < 2) {
      throw ConfigError("method " + name + " switches regimes and needs M >= 2");
    }
  } else if (cfg.em.M != 1) {
    throw ConfigError("method " + name + " is stationary and fixes M = 1");
  }
  if (cfg.folds < 2) throw ConfigError("folds must be at least 2");
  if (cfg.workers < 1) throw ConfigError("workers must be positive");
  if (cfg.tau_grid.empty()) throw ConfigError("tau grid must not be empty");
  for (double t : cfg.tau_grid) {
    if (!(t > 0.0) || !std::isfinite(t)) {
      throw ConfigError("tau grid entries must be positive");
    }
  }
  if (cfg.methods.empty()) cfg.methods = {cfg.method};
  cfg.em.seed = cfg.seed;
  cfg.sim.seed = cfg.seed;
}

EmConfig em_config_for_method(const ExperimentConfig& cfg, Method method) {
  EmConfig em = cfg.em;
  em.modality = method_modality(method);
  em.M = method_is_switching(method) ? std::max(2, cfg.em.M) : 1;
  return em;
}

std::pair<int, int> fold_bounds(int T, int folds, int k) {
  if (folds < 1 || k < 0 || k >= folds) {
    throw ConfigError("fold index out of range");
  }
  auto edge = [&](int i) {
    return static_cast<int>(static_cast<long long>(T) * i / folds);
  };
  return {edge(k), edge(k + 1)};
}

MultiscaleSeries slice_series(const MultiscaleSeries& series, int begin,
                              int end) {
  const int T = series.num_steps();
  if (begin < 0 || end > T || begin >= end) {
    throw ConfigError("slice bounds out of range");
  }
  const int len = end - begin;
  MultiscaleSeries out;
  out.dt_ms = series.dt_ms;
  out.field_period_steps = series.field_period_steps;
  out.spikes = series.spikes.middleRows(begin, len);
  out.fields = series.fields.middleRows(begin, len);
  out.field_mask.assign(series.field_mask.begin() + begin,
                        series.field_mask.begin() + end);
  if (series.behavior.size() > 0) {
    out.behavior = series.behavior.middleRows(begin, len);
  }
  if (!series.regimes.empty()) {
    out.regimes.assign(series.regimes.begin() + begin,
                       series.regimes.begin() + end);
  }
  if (series.latents.size() > 0) {
    out.latents = series.latents.middleRows(begin, len + 1);
  }
  return out;
}

MultiscaleSeries splice_out(const MultiscaleSeries& series, int begin,
                            int end) {
  const int T = series.num_steps();
  if (begin < 0 || end > T || begin >= end) {
    throw ConfigError("splice bounds out of range");
  }
  if (begin == 0) return slice_series(series, end, T);
  if (end == T) return slice_series(series, 0, begin);
  MultiscaleSeries head = slice_series(series, 0, begin);
  MultiscaleSeries tail = slice_series(series, end, T);
  MultiscaleSeries out;
  out.dt_ms = series.dt_ms;
  out.field_period_steps = series.field_period_steps;
  const int Th = head.num_steps();
  const int Tt = tail.num_steps();
  out.spikes.resize(Th + Tt, series.spikes.cols());
  out.spikes << head.spikes, tail.spikes;
  out.fields.resize(Th + Tt, series.fields.cols());
  out.fields << head.fields, tail.fields;
  out.field_mask = head.field_mask;
  out.field_mask.insert(out.field_mask.end(), tail.field_mask.begin(),
                        tail.field_mask.end());
  if (series.behavior.size() > 0) {
    out.behavior.resize(Th + Tt, series.behavior.cols());
    out.behavior << head.behavior, tail.behavior;
  }
  if (!series.regimes.empty()) {
    out.regimes = head.regimes;
    out.regimes.insert(out.regimes.end(), tail.regimes.begin(),
                       tail.regimes.end());
  }
  if (series.latents.size() > 0) {
    // keep the state row entering each piece; the tail keeps its own row so
    // the seam is explicit rather than interpolated
    out.latents.resize(Th + Tt + 1, series.latents.cols());
    out.latents << head.latents, tail.latents.bottomRows(Tt);
  }
  return out;
}

MultiscaleSeries select_channels(const MultiscaleSeries& series,
                                 const std::vector<int>& spike_idx,
                                 const std::vector<int>& field_idx) {
  const int T = series.num_steps();
  for (int c : spike_idx) {
    if (c < 0 || c >= series.num_cells()) {
      throw ConfigError("spike channel index out of range");
    }
  }
  for (int f : field_idx) {
    if (f < 0 || f >= series.num_fields()) {
      throw ConfigError("field channel index out of range");
    }
  }
  MultiscaleSeries out;
  out.dt_ms = series.dt_ms;
  out.field_period_steps = series.field_period_steps;
  out.behavior = series.behavior;
  out.regimes = series.regimes;
  out.latents = series.latents;
  out.spikes.resize(T, static_cast<int>(spike_idx.size()));
  for (std::size_t i = 0; i < spike_idx.size(); ++i) {
    out.spikes.col(i) = series.spikes.col(spike_idx[i]);
  }
  out.fields.resize(T, static_cast<int>(field_idx.size()));
  for (std::size_t i = 0; i < field_idx.size(); ++i) {
    out.fields.col(i) = series.fields.col(field_idx[i]);
  }
  if (field_idx.empty()) {
    out.field_mask.assign(T, 0);
  } else {
    out.field_mask = series.field_mask;
  }
  return out;
}

Mat filtered_latents(const FilterResult& fr) {
  const int T = static_cast<int>(fr.steps.size());
  const int d = T > 0 ? static_cast<int>(fr.steps[0].merged.mean.size()) : 0;
  Mat out(T, d);
  for (int t = 0; t < T; ++t) {
    out.row(t) = fr.steps[t].merged.mean.transpose();
  }
  return out;
}

EvalReport evaluate_model_on(const SwitchingModel& model,
                             const MultiscaleSeries& series,
                             const SwitchingModel* true_model) {
  check_eval_dims(model, series);
  const int T = series.num_steps();
  FilterResult fr = smsnf_filter(model, series);
  EvalReport rep;

  if (series.latents.size() > 0) {
    Mat x_hat = filtered_latents(fr);
    Mat x_true = series.latents.bottomRows(T);
    AlignResult align = similarity_align(x_hat, x_true);
    rep.latent_cc = latent_cc(align.aligned, x_true, &rep.latent_cc_per_dim);
  }

  if (!series.regimes.empty() && model.num_regimes() > 1) {
    std::vector<int> s_hat(T);
    int max_label = model.num_regimes();
    for (int t = 0; t < T; ++t) {
      int best = 0;
      fr.steps[t].regime_prob.maxCoeff(&best);
      s_hat[t] = best + 1;
    }
    for (int s : series.regimes) max_label = std::max(max_label, s);
    rep.regime_accuracy =
        regime_accuracy(series.regimes, s_hat, max_label);
  }

  if (model.num_fields() > 0 && series.num_fields() > 0) {
    rep.field_pred_cc =
        field_prediction_cc(model, series, fr, &rep.field_cc_per_dim);
  }

  if (model.num_cells() > 0 && series.num_cells() > 0) {
    SpikePpResult pp = spike_pp(model, series, fr);
    rep.spike_auc = pp.auc;
    rep.spike_pp = pp.pp;
    rep.spike_auc_per_neuron = pp.per_neuron_auc;
  }

  if (true_model != nullptr) {
    EvalReport base = evaluate_model_on(*true_model, series, nullptr);
    auto normalize = [](double learned, double reference) {
      if (!std::isfinite(learned) || !std::isfinite(reference) ||
          std::abs(reference) < 1e-12) {
        return std::numeric_limits<double>::quiet_NaN();
      }
      return learned / reference;
    };
    rep.latent_cc_normalized = normalize(rep.latent_cc, base.latent_cc);
    rep.field_pred_cc_normalized =
        normalize(rep.field_pred_cc, base.field_pred_cc);
    rep.spike_pp_normalized = normalize(rep.spike_pp, base.spike_pp);
  }
  return rep;
}

std::vector<FusionItem> fusion_plan(const ExperimentConfig& cfg, int C,
                                    int F) {
  const FusionConfig& fu = cfg.fusion;
  const bool field_base = fu.base_modality == "field";
  if (!field_base && fu.base_modality != "spike") {
    throw ConfigError("fusion base_modality must be 'field' or 'spike'");
  }
  const int base_pool = field_base ? F : C;
  const int added_pool = field_base ? C : F;
  if (fu.base_channels < 1 || fu.base_channels > base_pool) {
    throw ConfigError("fusion base_channels out of range (pool of " +
                      std::to_string(base_pool) + ")");
  }
  if (fu.repeats < 1) throw ConfigError("fusion repeats must be positive");
  if (fu.added_channels.empty()) {
    throw ConfigError("fusion added_channels must not be empty");
  }
  for (int a : fu.added_channels) {
    if (a < 0 || a > added_pool) {
      throw ConfigError("fusion added count " + std::to_string(a) +
                        " out of range (pool of " +
                        std::to_string(added_pool) + ")");
    }
  }
  std::vector<FusionItem> plan;
  for (int r = 0; r < fu.repeats; ++r) {
    Rng rng(derive_seed(cfg.seed, kFusionShuffleSalt + r));
    std::vector<int> base_order = shuffled_indices(base_pool, rng);
    std::vector<int> added_order = shuffled_indices(added_pool, rng);
    std::vector<int> base(base_order.begin(),
                          base_order.begin() + fu.base_channels);
    std::sort(base.begin(), base.end());
    for (int a : fu.added_channels) {
      FusionItem item;
      item.repeat = r;
      item.added_count = a;
      item.base_idx = base;
      item.added_idx.assign(added_order.begin(), added_order.begin() + a);
      std::sort(item.added_idx.begin(), item.added_idx.end());
      item.em_seed = derive_seed(cfg.seed, kFusionFitSalt + r);
      plan.push_back(std::move(item));
    }
  }
  return plan;
}

void run_work_queue(int workers,
                    const std::vector<std::function<void()>>& items) {
  if (items.empty()) return;
  const int n =
      std::min<int>(workers, static_cast<int>(items.size()));
  if (n <= 1) {
    for (const auto& item : items) item();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  auto worker = [&]() {
    while (true) {
      std::size_t i = next.fetch_add(1);
      if (i >= items.size()) return;
      {
        std::lock_guard<std::mutex> lock(err_mu);
        if (err) return;
      }
      try {
        items[i]();
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(n);
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

void cmd_simulate(const ExperimentConfig& cfg, const std::string& out_dir) {
  validate_sim_config(cfg.sim);
  make_out_dir(out_dir);
  fs::path root(out_dir);
  fs::path train_dir = root / "train";
  fs::path test_dir = root / "test";
  fs::path model_path = root / "true_model.json";
  for (const fs::path& p :
       {train_dir / "meta.json", test_dir / "meta.json", model_path}) {
    if (fs::exists(p)) {
      if (!cfg.force) {
        throw IoError("output exists: " + p.string() + " (use --force)");
      }
    }
  }
  if (cfg.force) {
    fs::remove_all(train_dir);
    fs::remove_all(test_dir);
  }

  Rng rng(cfg.seed);
  SwitchingModel model = random_switching_model(cfg.sim, rng);
  BehaviorMap bmap;
  const bool with_behavior = cfg.sim.behavior_dims > 0;
  if (with_behavior) {
    bmap = random_behavior_map(cfg.sim, stationary_cov_of(model.regimes[0]),
                               rng);
  }
  MultiscaleSeries train = simulate_series(model, cfg.sim.T_train, rng,
                                           with_behavior ? &bmap : nullptr);
  MultiscaleSeries test = simulate_series(model, cfg.sim.T_test, rng,
                                          with_behavior ? &bmap : nullptr);
  write_bundle(train_dir.string(), train, cfg.sim.M);
  write_bundle(test_dir.string(), test, cfg.sim.M);
  write_model_file(model_path.string(), model);
  write_manifest(out_dir, "simulate", &cfg, {},
                 {"train/", "test/", "true_model.json"});
}

void cmd_fit(const ExperimentConfig& cfg, const std::string& bundle_dir,
             const std::string& out_dir) {
  MultiscaleSeries series = read_bundle(bundle_dir);
  make_out_dir(out_dir);
  fs::path model_path = fs::path(out_dir) / "model.json";
  if (fs::exists(model_path) && !cfg.force) {
    throw IoError("output exists: " + model_path.string() + " (use --force)");
  }

  EmConfig em = em_config_for_method(cfg, cfg.method);
  EmResult res = em_fit(series, em);
  write_model_file(model_path.string(), res.model);

  json log;
  log["method"] = method_name(cfg.method);
  json iters = json::array();
  for (std::size_t i = 0; i < res.trace.iters.size(); ++i) {
    const EmIterate& it = res.trace.iters[i];
    json row;
    row["iter"] = i + 1;
    row["ell"] = it.ell;
    row["delta_params"] = it.delta_params;
    row["seconds"] = it.seconds;
    iters.push_back(row);
  }
  log["iterations"] = iters;
  log["warnings"] = res.trace.warnings;
  write_text(fs::path(out_dir) / "fit_log.json", log.dump(2) + "\n");
  write_manifest(out_dir, "fit", &cfg, {bundle_dir},
                 {"model.json", "fit_log.json"});
}

EvalReport cmd_eval(const std::string& model_path,
                    const std::string& bundle_dir,
                    const std::string& true_model_path,
                    const std::string& out_dir) {
  SwitchingModel model = read_model_file(model_path);
  MultiscaleSeries series = read_bundle(bundle_dir);
  SwitchingModel true_model;
  const bool with_true = !true_model_path.empty();
  if (with_true) true_model = read_model_file(true_model_path);
  EvalReport rep =
      evaluate_model_on(model, series, with_true ? &true_model : nullptr);
  make_out_dir(out_dir);
  write_text(fs::path(out_dir) / "report.txt", report_keyvals(rep));
  write_text(fs::path(out_dir) / "report.csv", report_csv(rep));
  std::vector<std::string> inputs = {model_path, bundle_dir};
  if (with_true) inputs.push_back(true_model_path);
  write_manifest(out_dir, "eval", nullptr, inputs,
                 {"report.txt", "report.csv"});
  return rep;
}

double cmd_sweep_tau(const ExperimentConfig& cfg,
                     const std::string& bundle_dir,
                     const std::string& out_dir) {
  MultiscaleSeries series = read_bundle(bundle_dir);
  if (series.behavior.size() == 0) {
    throw ConfigError("sweep-tau requires behavior.csv in the bundle");
  }
  if (series.num_fields() == 0) {
    throw ConfigError("sweep-tau needs field channels to scale");
  }
  make_out_dir(out_dir);

  std::vector<double> grid = cfg.tau_grid;
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  const int G = static_cast<int>(grid.size());
  const int folds = 4;
  std::string table = "tau,fold,behavior_cc\n";
  double chosen = grid[0];
  double chosen_cc = std::numeric_limits<double>::quiet_NaN();

  if (G > 1) {
    const int T = series.num_steps();
    for (int k = 0; k < folds; ++k) {
      auto [lo, hi] = fold_bounds(T, folds, k);
      if (hi - lo < 2 || T - (hi - lo) < cfg.em.d + 2) {
        throw ConfigError("series too short for the inner four-fold sweep");
      }
    }
    std::vector<double> cc(G * folds,
                           std::numeric_limits<double>::quiet_NaN());
    std::vector<std::function<void()>> items;
    for (int gi = 0; gi < G; ++gi) {
      for (int k = 0; k < folds; ++k) {
        items.push_back([&, gi, k]() {
          auto [lo, hi] = fold_bounds(series.num_steps(), folds, k);
          MultiscaleSeries train = splice_out(series, lo, hi);
          MultiscaleSeries test = slice_series(series, lo, hi);
          EmConfig em = cfg.em;
          em.modality = Modality::kMultiscale;
          em.M = 1;
          em.tau = grid[gi];
          em.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(k));
          EmResult fit = em_fit(train, em);
          cc[gi * folds + k] = decode_cc(fit.model, train, test);
        });
      }
    }
    run_work_queue(cfg.workers, items);

    double best_mean = -std::numeric_limits<double>::infinity();
    for (int gi = 0; gi < G; ++gi) {
      double sum = 0.0;
      for (int k = 0; k < folds; ++k) {
        table += format_real(grid[gi]) + "," + std::to_string(k + 1) + "," +
                 format_real(cc[gi * folds + k]) + "\n";
        sum += cc[gi * folds + k];
      }
      double mean = sum / folds;
      if (mean > best_mean) {
        best_mean = mean;
        chosen = grid[gi];
        chosen_cc = mean;
      }
    }
  }

  write_text(fs::path(out_dir) / "tau_sweep.csv", table);
  std::string summary = "chosen_tau " + format_real(chosen) + "\n";
  summary += "mean_behavior_cc " + format_real(chosen_cc) + "\n";
  summary += "sweep_method msnf-em\n";
  write_text(fs::path(out_dir) / "chosen_tau.txt", summary);
  write_manifest(out_dir, "sweep-tau", &cfg, {bundle_dir},
                 {"tau_sweep.csv", "chosen_tau.txt"});
  return chosen;
}

namespace {

double report_metric(const EvalReport& rep, const std::string& name) {
  if (name == "latent_cc") return rep.latent_cc;
  if (name == "regime_accuracy") return rep.regime_accuracy;
  if (name == "field_pred_cc") return rep.field_pred_cc;
  if (name == "spike_auc") return rep.spike_auc;
  if (name == "spike_pp") return rep.spike_pp;
  if (name == "behavior_cc") return rep.behavior_cc;
  return std::numeric_limits<double>::quiet_NaN();
}

const std::vector<std::string>& aggregate_metrics() {
  static const std::vector<std::string> names = {
      "latent_cc", "regime_accuracy", "field_pred_cc",
      "spike_auc", "spike_pp",        "behavior_cc"};
  return names;
}

}  // namespace

void cmd_xval(const ExperimentConfig& cfg, const std::string& bundle_dir,
              const std::string& out_dir) {
  MultiscaleSeries series = read_bundle(bundle_dir);
  const int T = series.num_steps();
  const int folds = cfg.folds;
  for (int k = 0; k < folds; ++k) {
    auto [lo, hi] = fold_bounds(T, folds, k);
    if (hi - lo < 2 || T - (hi - lo) < cfg.em.d + 2) {
      throw ConfigError("series too short for " + std::to_string(folds) +
                        " folds");
    }
  }
  make_out_dir(out_dir);
  const std::vector<Method>& methods = cfg.methods;
  const int n_methods = static_cast<int>(methods.size());
  const bool with_behavior = series.behavior.size() > 0;

  for (Method m : methods) {
    make_out_dir((fs::path(out_dir) / method_name(m)).string());
  }

  std::vector<std::vector<EvalReport>> reports(
      n_methods, std::vector<EvalReport>(folds));
  std::vector<std::function<void()>> items;
  for (int mi = 0; mi < n_methods; ++mi) {
    for (int k = 0; k < folds; ++k) {
      items.push_back([&, mi, k]() {
        auto [lo, hi] = fold_bounds(series.num_steps(), folds, k);
        MultiscaleSeries train = splice_out(series, lo, hi);
        MultiscaleSeries test = slice_series(series, lo, hi);
        EmConfig em = em_config_for_method(cfg, methods[mi]);
        em.seed = derive_seed(
            cfg.seed, static_cast<std::uint64_t>(mi) * folds + k);
        EmResult fit = em_fit(train, em);
        EvalReport rep = evaluate_model_on(fit.model, test, nullptr);
        if (with_behavior) {
          rep.behavior_cc = decode_cc(fit.model, train, test,
                                      &rep.behavior_cc_per_dim);
        }
        fs::path mdir = fs::path(out_dir) / method_name(methods[mi]);
        std::string stem = "fold" + std::to_string(k + 1);
        write_text(mdir / (stem + "_report.txt"), report_keyvals(rep));
        write_text(mdir / (stem + "_report.csv"), report_csv(rep));
        reports[mi][k] = std::move(rep);
      });
    }
  }
  run_work_queue(cfg.workers, items);

  std::string agg = "method,metric,mean,stderr,folds\n";
  for (int mi = 0; mi < n_methods; ++mi) {
    for (const std::string& metric : aggregate_metrics()) {
      std::vector<double> vals;
      for (int k = 0; k < folds; ++k) {
        double v = report_metric(reports[mi][k], metric);
        if (std::isfinite(v)) vals.push_back(v);
      }
      if (vals.empty()) continue;
      double mean =
          std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
      double se = std::numeric_limits<double>::quiet_NaN();
      if (vals.size() > 1) {
        double ss = 0.0;
        for (double v : vals) ss += (v - mean) * (v - mean);
        se = std::sqrt(ss / (vals.size() - 1)) /
             std::sqrt(static_cast<double>(vals.size()));
      }
      agg += method_name(methods[mi]) + "," + metric + "," +
             format_real(mean) + "," + format_real(se) + "," +
             std::to_string(vals.size()) + "\n";
    }
  }
  write_text(fs::path(out_dir) / "aggregate.csv", agg);

  std::vector<std::string> outputs = {"aggregate.csv"};
  if (n_methods >= 2) {
    struct Comparison {
      std::string metric;
      int a;
      int b;
      double mean_a;
      double mean_b;
      double p;
    };
    std::vector<Comparison> comps;
    for (const std::string& metric : aggregate_metrics()) {
      for (int a = 0; a < n_methods; ++a) {
        for (int b = a + 1; b < n_methods; ++b) {
          std::vector<double> va, vb;
          for (int k = 0; k < folds; ++k) {
            double x = report_metric(reports[a][k], metric);
            double y = report_metric(reports[b][k], metric);
            if (std::isfinite(x) && std::isfinite(y)) {
              va.push_back(x);
              vb.push_back(y);
            }
          }
          if (va.empty()) continue;
          Comparison c;
          c.metric = metric;
          c.a = a;
          c.b = b;
          c.mean_a = std::accumulate(va.begin(), va.end(), 0.0) / va.size();
          c.mean_b = std::accumulate(vb.begin(), vb.end(), 0.0) / vb.size();
          c.p = paired_test(va, vb);
          comps.push_back(std::move(c));
        }
      }
    }
    std::vector<double> ps;
    for (const Comparison& c : comps) ps.push_back(c.p);
    std::vector<char> sig;
    if (!ps.empty()) sig = bh_correct(ps, 0.05);
    std::string text =
        "metric,method_a,method_b,mean_a,mean_b,p_value,significant\n";
    for (std::size_t i = 0; i < comps.size(); ++i) {
      const Comparison& c = comps[i];
      text += c.metric + "," + method_name(methods[c.a]) + "," +
              method_name(methods[c.b]) + "," + format_real(c.mean_a) + "," +
              format_real(c.mean_b) + "," + format_real(c.p) + "," +
              (sig[i] ? "1" : "0") + "\n";
    }
    write_text(fs::path(out_dir) / "comparisons.csv", text);
    outputs.push_back("comparisons.csv");
  }
  for (Method m : methods) outputs.push_back(method_name(m) + "/");
  write_manifest(out_dir, "xval", &cfg, {bundle_dir}, outputs);
}

void cmd_fusion_sweep(const ExperimentConfig& cfg,
                      const std::string& bundle_dir,
                      const std::string& out_dir) {
  MultiscaleSeries series = read_bundle(bundle_dir);
  if (series.num_cells() == 0 || series.num_fields() == 0) {
    throw ConfigError("fusion-sweep needs both spike and field channels");
  }
  if (series.behavior.size() == 0) {
    throw ConfigError("fusion-sweep requires behavior.csv in the bundle");
  }
  const int T = series.num_steps();
  if (T < 2 * (cfg.em.d + 2)) {
    throw ConfigError("series too short to split for the fusion sweep");
  }
  make_out_dir(out_dir);

  std::vector<FusionItem> plan =
      fusion_plan(cfg, series.num_cells(), series.num_fields());
  const bool field_base = cfg.fusion.base_modality == "field";
  MultiscaleSeries train_half = slice_series(series, 0, T / 2);
  MultiscaleSeries test_half = slice_series(series, T / 2, T);

  std::vector<double> cc(plan.size(),
                         std::numeric_limits<double>::quiet_NaN());
  std::vector<std::function<void()>> items;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    items.push_back([&, i]() {
      const FusionItem& item = plan[i];
      const std::vector<int>& spike_idx =
          field_base ? item.added_idx : item.base_idx;
      const std::vector<int>& field_idx =
          field_base ? item.base_idx : item.added_idx;
      MultiscaleSeries train = select_channels(train_half, spike_idx, field_idx);
      MultiscaleSeries test = select_channels(test_half, spike_idx, field_idx);
      EmConfig em = cfg.em;
      em.seed = item.em_seed;
      if (train.num_cells() == 0) {
        em.modality = Modality::kGaussianOnly;
      } else if (train.num_fields() == 0) {
        em.modality = Modality::kPoissonOnly;
      } else {
        em.modality = Modality::kMultiscale;
      }
      EmResult fit = em_fit(train, em);
      cc[i] = decode_cc(fit.model, train, test);
    });
  }
  run_work_queue(cfg.workers, items);

  std::string text =
      "base_count,added_count,repeat,behavior_cc,base_channels,added_channels\n";
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const FusionItem& item = plan[i];
    text += std::to_string(item.base_idx.size()) + "," +
            std::to_string(item.added_count) + "," +
            std::to_string(item.repeat + 1) + "," + format_real(cc[i]) + "," +
            join_indices(item.base_idx) + "," + join_indices(item.added_idx) +
            "\n";
  }
  write_text(fs::path(out_dir) / "fusion.csv", text);
  write_manifest(out_dir, "fusion-sweep", &cfg, {bundle_dir}, {"fusion.csv"});
}

}  // namespace smds
