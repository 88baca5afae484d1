#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "smds/harness.hpp"
#include "smds/model.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::string out = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int workers = 0;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
  CLI::Option* cfg =
      cmd->add_option("--config", args.config, "experiment config file");
  if (config_required) cfg->required();
  cmd->add_option("--out", args.out, "output directory");
  cmd->add_option("--seed", args.seed, "override the config seed")
      ->each([&args](const std::string&) { args.seed_set = true; });
  cmd->add_option("--workers", args.workers, "parallel worker count");
  cmd->add_flag("--force", args.force, "overwrite existing outputs");
}

smds::ExperimentConfig resolve_config(const CommonArgs& args) {
  smds::ExperimentConfig cfg;
  if (!args.config.empty()) {
    cfg = smds::load_experiment_config(args.config);
  }
  if (args.seed_set) cfg.seed = args.seed;
  if (args.workers > 0) cfg.workers = args.workers;
  if (args.force) cfg.force = true;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"switching multiscale dynamical system toolkit"};
  app.require_subcommand(1);

  CommonArgs sim_args;
  CLI::App* sim = app.add_subcommand(
      "simulate", "draw a random system and write train/test bundles");
  add_common(sim, sim_args, true);

  CommonArgs fit_args;
  std::string fit_bundle;
  std::string fit_method;
  int fit_regimes = 0;
  int fit_latent_dim = 0;
  int fit_iters = 0;
  double fit_tau = 0.0;
  bool fit_share_obs = false;
  CLI::App* fit =
      app.add_subcommand("fit", "learn a model from a bundle with EM");
  add_common(fit, fit_args, false);
  fit->add_option("--bundle", fit_bundle, "training data bundle directory")
      ->required();
  fit->add_option("--method", fit_method,
                  "kf-em, pcf-em, msnf-em, skf-em, spcf-em, or smsnf-em");
  fit->add_option("--regimes", fit_regimes, "number of regimes to learn");
  fit->add_option("--latent-dim", fit_latent_dim, "latent state dimension");
  fit->add_option("--iters", fit_iters, "EM iteration cap");
  fit->add_option("--tau", fit_tau, "field likelihood scaling factor");
  fit->add_flag("--share-obs", fit_share_obs,
                "share observation parameters across regimes");

  std::string eval_model;
  std::string eval_bundle;
  std::string eval_true_model;
  std::string eval_out = "out";
  CLI::App* eval =
      app.add_subcommand("eval", "filter a bundle and score a saved model");
  eval->add_option("--model", eval_model, "learned model file")->required();
  eval->add_option("--bundle", eval_bundle, "evaluation bundle directory")
      ->required();
  eval->add_option("--true-model", eval_true_model,
                   "reference model for normalized metrics");
  eval->add_option("--out", eval_out, "output directory");

  CommonArgs xval_args;
  std::string xval_bundle;
  CLI::App* xval = app.add_subcommand(
      "xval", "contiguous-fold cross-validation over the configured methods");
  add_common(xval, xval_args, true);
  xval->add_option("--bundle", xval_bundle, "session bundle directory")
      ->required();

  CommonArgs tau_args;
  std::string tau_bundle;
  CLI::App* sweep = app.add_subcommand(
      "sweep-tau", "pick the field scaling by inner four-fold decoding");
  add_common(sweep, tau_args, true);
  sweep->add_option("--bundle", tau_bundle, "training bundle directory")
      ->required();

  CommonArgs fusion_args;
  std::string fusion_bundle;
  CLI::App* fusion = app.add_subcommand(
      "fusion-sweep", "behavior decoding as channels of the other scale join");
  add_common(fusion, fusion_args, true);
  fusion->add_option("--bundle", fusion_bundle, "session bundle directory")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  }

  try {
    if (sim->parsed()) {
      smds::ExperimentConfig cfg = resolve_config(sim_args);
      smds::finalize_config(cfg);
      smds::cmd_simulate(cfg, sim_args.out);
    } else if (fit->parsed()) {
      smds::ExperimentConfig cfg = resolve_config(fit_args);
      if (!fit_method.empty()) {
        cfg.method = smds::method_from_string(fit_method);
      }
      if (fit_regimes > 0) {
        cfg.em.M = fit_regimes;
        cfg.regimes_explicit = true;
      }
      if (fit_latent_dim > 0) cfg.em.d = fit_latent_dim;
      if (fit_iters > 0) cfg.em.max_iters = fit_iters;
      if (fit_tau > 0.0) cfg.em.tau = fit_tau;
      if (fit_share_obs) cfg.em.share_observation_params = true;
      smds::finalize_config(cfg);
      smds::cmd_fit(cfg, fit_bundle, fit_args.out);
    } else if (eval->parsed()) {
      smds::cmd_eval(eval_model, eval_bundle, eval_true_model, eval_out);
    } else if (xval->parsed()) {
      smds::ExperimentConfig cfg = resolve_config(xval_args);
      smds::finalize_config(cfg);
      smds::cmd_xval(cfg, xval_bundle, xval_args.out);
    } else if (sweep->parsed()) {
      smds::ExperimentConfig cfg = resolve_config(tau_args);
      smds::finalize_config(cfg);
      smds::cmd_sweep_tau(cfg, tau_bundle, tau_args.out);
    } else if (fusion->parsed()) {
      smds::ExperimentConfig cfg = resolve_config(fusion_args);
      smds::finalize_config(cfg);
      smds::cmd_fusion_sweep(cfg, fusion_bundle, fusion_args.out);
    }
  } catch (const smds::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const smds::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const smds::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
