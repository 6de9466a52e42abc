#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mlfm/experiments.hpp"
#include "mlfm/infer_ag.hpp"
#include "mlfm/infer_mixsa.hpp"
#include "mlfm/io.hpp"
#include "mlfm/simulator.hpp"

namespace fs = std::filesystem;
using namespace mlfm;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::optional<int> reps;
};

void add_common(CLI::App *app, Common &c, bool config_required) {
  auto *opt = app->add_option("--config", c.config, "JSON configuration file");
  if (config_required)
    opt->required();
  opt->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "base random seed");
  app->add_option("--out", c.out, "output directory")->capture_default_str();
  app->add_option("--reps", c.reps, "number of replications")->check(CLI::PositiveNumber);
}

Json load_json(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error &e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::ofstream open_out(const fs::path &dir, const std::string &name) {
  fs::create_directories(dir);
  std::ofstream os(dir / name);
  if (!os)
    throw std::runtime_error("cannot write " + (dir / name).string());
  return os;
}

void write_meta(const fs::path &dir, const std::string &command, const Json &config, std::uint64_t seed,
                double wall) {
  auto os = open_out(dir, "meta.json");
  write_json(os, Json{{"command", command}, {"version", kVersion}, {"seed", seed}, {"wall_time_s", wall},
                      {"config", config}});
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Data paths in a config are relative to the config file.
fs::path resolve(const std::string &config_path, const std::string &p) {
  const fs::path path(p);
  return path.is_absolute() ? path : fs::path(config_path).parent_path() / path;
}

Observations load_observations(const Common &c, const Json &cfg, Trajectory &data) {
  if (!cfg.contains("data"))
    throw ConfigError("config: 'data' (trajectory CSV) is required");
  std::ifstream in(resolve(c.config, cfg.at("data").get<std::string>()));
  if (!in)
    throw ConfigError("cannot open data file " + cfg.at("data").get<std::string>());
  data = read_trajectory_csv(in);
  std::vector<double> t(data.t.data(), data.t.data() + data.t.size());
  return Observations{TimeGrid(std::move(t)), data.x, cfg.value("noise_sd", 0.0)};
}

// ---------------------------------------------------------------- simulate

int cmd_simulate(const Common &c) {
  const auto start = std::chrono::steady_clock::now();
  const Json cfg = load_json(c.config);
  if (!cfg.contains("model"))
    throw ConfigError("simulate: 'model' is required");
  const ModelFile mf = model_from_json(cfg.at("model"));
  if (!mf.beta_given)
    throw ConfigError("simulate: model.beta is required");
  const ModelSpec &spec = mf.spec;
  const std::uint64_t seed = c.seed.value_or(cfg.value("seed", std::uint64_t{1}));
  const int reps = c.reps.value_or(cfg.value("reps", 1));

  TimeGrid grid = cfg.contains("times") ? TimeGrid(cfg.at("times").get<std::vector<double>>())
                                        : TimeGrid::uniform(cfg.value("t0", 0.0), cfg.value("t1", 6.0),
                                                            cfg.value("dt", 0.5));
  const double noise_sd = cfg.value("noise_sd", 0.05);
  const double fine_step = grid.size() > 1 ? grid.min_spacing() / cfg.value("fine_factor", 50.0) : 1.0;
  const TimeGrid fine = refine_grid(grid, fine_step);
  const bool fundamental = cfg.value("fundamental", false);
  Vector x0;
  if (!fundamental) {
    if (!cfg.contains("x0"))
      throw ConfigError("simulate: 'x0' is required unless 'fundamental' is true");
    x0 = vector_from_json(cfg.at("x0"), "x0");
    if (x0.size() != spec.dim_state())
      throw ConfigError("simulate: x0 has the wrong dimension");
  }

  const fs::path out(c.out);
  for (int rep = 0; rep < reps; ++rep) {
    const std::uint64_t rs = derive_seed(seed, static_cast<std::uint64_t>(rep));
    Matrix g(spec.n_forces(), static_cast<Eigen::Index>(fine.size()));
    for (Eigen::Index r = 0; r < spec.n_forces(); ++r)
      g.row(r) = gp_sample(fine, spec.force_kernels[static_cast<std::size_t>(r)],
                           derive_seed(rs, static_cast<std::uint64_t>(r)))
                     .transpose();
    const DensePath path{fine, g};
    const Matrix states_fine = fundamental ? stack_fundamental(simulate_fundamental(spec, path, fine))
                                           : simulate_state(spec, path, x0, fine);
    const Matrix states = detail::restrict_rows(fine, states_fine, grid);
    const Matrix g_obs = detail::restrict_rows(fine, g.transpose(), grid);
    const Observations obs = observe(grid, states, noise_sd, derive_seed(rs, 100));

    const std::string suffix = reps > 1 ? "_" + std::to_string(rep) : "";
    auto truth_os = open_out(out, "truth" + suffix + ".csv");
    write_trajectory_csv(truth_os, Trajectory{fine.as_vector(), states_fine, g.transpose()});
    auto obs_os = open_out(out, "observations" + suffix + ".csv");
    write_trajectory_csv(obs_os, Trajectory{grid.as_vector(), obs.values, g_obs});
  }
  Json echo = cfg;
  echo["model"] = model_to_json(spec);
  echo["reps"] = reps;
  write_meta(out, "simulate", echo, seed, seconds_since(start));
  return 0;
}

// ---------------------------------------------------------------- fit-ag

int cmd_fit_ag(const Common &c) {
  const auto start = std::chrono::steady_clock::now();
  const Json cfg = load_json(c.config);
  if (!cfg.contains("model"))
    throw ConfigError("fit-ag: 'model' is required");
  const ModelFile mf = model_from_json(cfg.at("model"));
  Trajectory data;
  const Observations obs = load_observations(c, cfg, data);
  if (obs.values.cols() != mf.spec.dim_state())
    throw ConfigError("fit-ag: data and model state dimensions differ");
  const std::uint64_t seed = c.seed.value_or(cfg.value("seed", std::uint64_t{1}));
  const double noise_var = cfg.value("obs_noise_var", std::pow(cfg.value("noise_sd", 0.05), 2));

  AGConfig ag;
  if (cfg.contains("state_hyp")) {
    ag.obs_noise_var = noise_var;
    ag.gamma.assign(static_cast<std::size_t>(obs.values.cols()), kDefaultGamma);
  } else {
    ag = make_ag_config(obs, noise_var, derive_seed(seed, 1));
  }
  // a given beta is held fixed unless the config asks for it to be updated
  ag.update_beta = !mf.beta_given;
  apply_ag_config(cfg, ag);
  if (!mf.beta_given)
    ag.update_beta = true;
  AGState init = default_ag_init(obs, mf.spec, ag, derive_seed(seed, 2));
  if (mf.beta_given)
    init.beta = mf.spec.beta;
  const AGFit fit = ag_map(obs, mf.spec, ag, init);

  Json result = ag_fit_to_json(fit, ag, obs.grid, seed);
  if (data.g.cols() == mf.spec.n_forces() && data.g.cols() > 0)
    result["g_error"] = (fit.state.g.transpose() - data.g).norm();
  const fs::path out(c.out);
  auto js = open_out(out, "fit_ag.json");
  write_json(js, result);
  auto csv = open_out(out, "fit_ag.csv");
  write_trajectory_csv(csv, Trajectory{obs.grid.as_vector(), fit.state.X.transpose(), fit.state.g.transpose()});
  write_meta(out, "fit-ag", cfg, seed, seconds_since(start));
  std::cout << "AG: " << fit.iterations << " sweeps, converged=" << fit.converged
            << ", objective=" << detail::fmt17(fit.trace.back()) << '\n';
  return 0;
}

// ---------------------------------------------------------------- fit-mixsa

int cmd_fit_mixsa(const Common &c) {
  const auto start = std::chrono::steady_clock::now();
  const Json cfg = load_json(c.config);
  if (!cfg.contains("model"))
    throw ConfigError("fit-mixsa: 'model' is required");
  const ModelFile mf = model_from_json(cfg.at("model"));
  Trajectory data;
  const Observations obs = load_observations(c, cfg, data);
  if (obs.values.cols() != mf.spec.dim_state())
    throw ConfigError("fit-mixsa: data and model state dimensions differ");
  const std::uint64_t seed = c.seed.value_or(cfg.value("seed", std::uint64_t{1}));

  MixSAConfig mc = mixsa_config_from_json(cfg, obs);
  if (!cfg.contains("update_beta"))
    mc.update_beta = !mf.beta_given;
  MixSAInit init{Matrix::Zero(mf.spec.n_forces(), static_cast<Eigen::Index>(obs.grid.size())), mf.spec.beta};
  if (!mf.beta_given) {
    mc.update_beta = true;
    Rng rng(derive_seed(seed, 2));
    init.beta = std::sqrt(mf.spec.beta_prior_var) *
                standard_normal(rng, mf.spec.beta.size()).reshaped(mf.spec.beta.rows(), mf.spec.beta.cols());
  }
  const MixSAFit fit = mixsa_em(obs, mf.spec, mc, init, derive_seed(seed, 3));

  Json result = mixsa_fit_to_json(fit, obs.grid, seed);
  if (data.g.cols() == mf.spec.n_forces() && data.g.cols() > 0)
    result["g_error"] = (fit.g.transpose() - data.g).norm();

  // responsibility-weighted component means at the observation times
  const SuccessiveApproximations sa(obs.grid, mf.spec, fit.cfg);
  Matrix x = Matrix::Zero(obs.values.rows(), obs.values.cols());
  for (Eigen::Index v = 0; v < fit.cfg.n_mixtures(); ++v)
    x += fit.resp.col(v).asDiagonal() * sa.mean(v, fit.g, fit.beta);

  const fs::path out(c.out);
  auto js = open_out(out, "fit_mixsa.json");
  write_json(js, result);
  auto csv = open_out(out, "fit_mixsa.csv");
  write_trajectory_csv(csv, Trajectory{obs.grid.as_vector(), x, fit.g.transpose()});
  write_meta(out, "fit-mixsa", cfg, seed, seconds_since(start));
  std::cout << "MixSA: " << fit.iterations << " cycles, converged=" << fit.converged
            << ", objective=" << detail::fmt17(fit.trace.back()) << '\n';
  return 0;
}

// ---------------------------------------------------------------- experiment

int cmd_experiment(const Common &c, const std::string &which) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentConfig base;
  base.experiment = which;
  ExperimentConfig cfg = c.config.empty() ? base : experiment_from_json(load_json(c.config), base);
  if (cfg.experiment != which)
    throw ConfigError("experiment: config names '" + cfg.experiment + "' but '" + which + "' was requested");
  if (c.seed)
    cfg.base_seed = *c.seed;
  if (c.reps)
    cfg.n_reps = *c.reps;
  cfg.validate();

  const auto records = run_experiment(cfg);
  const auto summary = summarize(records);
  const fs::path out(c.out);
  auto err = open_out(out, "errors.csv");
  write_errors_csv(err, records);
  auto sum = open_out(out, "summary.csv");
  write_summary_csv(sum, summary);
  write_meta(out, "experiment " + which, experiment_to_json(cfg), cfg.base_seed, seconds_since(start));
  write_summary_csv(std::cout, summary);
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Multiplicative latent force models: simulation, fitting and experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Common sim, ag, mix, exp;
  auto *s = app.add_subcommand("simulate", "simulate forces, states and noisy observations");
  add_common(s, sim, true);
  auto *a = app.add_subcommand("fit-ag", "MAP fit by adaptive gradient matching");
  add_common(a, ag, true);
  auto *m = app.add_subcommand("fit-mixsa", "MAP fit by a mixture of successive approximations");
  add_common(m, mix, true);
  auto *e = app.add_subcommand("experiment", "run a replicated simulation study");
  e->require_subcommand(1);
  auto *kubo = e->add_subcommand("kubo", "random-frequency oscillator study");
  auto *so3 = e->add_subcommand("so3", "rotation-group fundamental solution study");
  add_common(kubo, exp, false);
  add_common(so3, exp, false);

  CLI11_PARSE(app, argc, argv);
  try {
    if (s->parsed())
      return cmd_simulate(sim);
    if (a->parsed())
      return cmd_fit_ag(ag);
    if (m->parsed())
      return cmd_fit_mixsa(mix);
    if (kubo->parsed())
      return cmd_experiment(exp, "kubo");
    if (so3->parsed())
      return cmd_experiment(exp, "so3");
  } catch (const ConfigError &ex) {
    std::cerr << "config error: " << ex.what() << '\n';
    return 2;
  } catch (const std::exception &ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
