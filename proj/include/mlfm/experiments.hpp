#ifndef MLFM_EXPERIMENTS_HPP
#define MLFM_EXPERIMENTS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "mlfm/gp_core.hpp"
#include "mlfm/infer_ag.hpp"
#include "mlfm/infer_mixsa.hpp"
#include "mlfm/model.hpp"
#include "mlfm/random.hpp"
#include "mlfm/simulator.hpp"

namespace mlfm {

struct ExperimentConfig {
  std::string experiment = "kubo"; ///< kubo | so3
  std::vector<double> dts{0.5, 0.75, 1.0};
  double t0 = 0.0;
  double t1 = 6.0;
  int n_reps = 20;
  std::uint64_t base_seed = 1;
  double noise_sd = 0.05;
  KernelHyp force_kernel{1.0, 1.0};
  double fine_factor = 50.0; ///< fine step is min(dts) / fine_factor
  double beta_prior_var = 1.0;

  // AG
  double gamma = 1e-2;
  int ag_max_iter = 500;
  double ag_tol = 1e-9;

  // MixSA
  std::vector<int> mixtures{1, 2, 3}; ///< kubo: component counts at fixed order
  int kubo_order = 5;
  std::vector<int> orders{3, 5, 7};   ///< so3: orders at fixed component count
  int so3_mixtures = 2;
  int mixsa_max_iter = 200;
  double mixsa_tol = 1e-8;
  int mixsa_inner_iter = 50;
  int mixsa_substeps = 4;
  int mixsa_restarts = 8;
  bool mixsa_known_noise = true; ///< fix alpha at 1 / noise_sd^2 instead of estimating it

  int threads = 1;

  void validate() const {
    if (experiment != "kubo" && experiment != "so3")
      throw std::invalid_argument("ExperimentConfig: experiment must be kubo or so3");
    if (dts.empty())
      throw std::invalid_argument("ExperimentConfig: at least one dt required");
    for (double dt : dts)
      if (!(dt > 0.0))
        throw std::invalid_argument("ExperimentConfig: dt must be positive");
    if (!(t1 > t0))
      throw std::invalid_argument("ExperimentConfig: horizon must be increasing");
    if (n_reps < 1)
      throw std::invalid_argument("ExperimentConfig: n_reps must be at least 1");
    if (noise_sd < 0.0)
      throw std::invalid_argument("ExperimentConfig: noise_sd must be nonnegative");
    force_kernel.validate();
  }
};

struct ErrorRecord {
  int rep = 0;
  std::string method;
  std::string setting;
  double dt = 0.0;
  double error = 0.0;
  std::string status = "ok";
};

struct SummaryRow {
  std::string method;
  std::string setting;
  double dt = 0.0;
  double mean_error = 0.0;
  double sd_error = 0.0;
  int n_ok = 0;
};

/// Frobenius norm of the difference over all grid points.
inline double reconstruction_error(const Matrix &x_true, const Matrix &x_hat) {
  if (x_true.rows() != x_hat.rows() || x_true.cols() != x_hat.cols())
    throw std::invalid_argument("reconstruction_error: shape mismatch");
  return (x_true - x_hat).norm();
}

namespace detail {

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Observation grid restricted from a truth fine grid; every dt must be an
/// integer multiple of the fine step.
inline TimeGrid obs_grid(const ExperimentConfig &cfg, double dt) { return TimeGrid::uniform(cfg.t0, cfg.t1, dt); }

inline double fine_step(const ExperimentConfig &cfg) {
  return *std::min_element(cfg.dts.begin(), cfg.dts.end()) / cfg.fine_factor;
}

inline Matrix restrict_rows(const TimeGrid &fine, const Matrix &rows_fine, const TimeGrid &coarse) {
  const auto idx = locate_nodes(fine, coarse);
  Matrix out(static_cast<Eigen::Index>(idx.size()), rows_fine.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = rows_fine.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

/// Runs `body(rep)` for every replication on up to `threads` workers; the
/// results are gathered by replication index.
inline std::vector<std::vector<ErrorRecord>> for_each_rep(int n_reps, int threads,
                                                         const std::function<std::vector<ErrorRecord>(int)> &body) {
  std::vector<std::vector<ErrorRecord>> out(static_cast<std::size_t>(n_reps));
  const int workers = std::max(1, std::min(threads, n_reps));
  if (workers == 1) {
    for (int rep = 0; rep < n_reps; ++rep)
      out[static_cast<std::size_t>(rep)] = body(rep);
    return out;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int rep = w; rep < n_reps; rep += workers)
          out[static_cast<std::size_t>(rep)] = body(rep);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  for (auto &t : pool)
    t.join();
  for (auto &e : errors)
    if (e)
      std::rethrow_exception(e);
  return out;
}

inline std::vector<ErrorRecord> flatten(std::vector<std::vector<ErrorRecord>> nested) {
  std::vector<ErrorRecord> out;
  for (auto &v : nested)
    for (auto &r : v)
      out.push_back(std::move(r));
  std::stable_sort(out.begin(), out.end(), [](const ErrorRecord &a, const ErrorRecord &b) { return a.rep < b.rep; });
  return out;
}

template <typename Fn> ErrorRecord guarded(int rep, std::string method, std::string setting, double dt, Fn &&fn) {
  ErrorRecord rec{rep, std::move(method), std::move(setting), dt, 0.0, "ok"};
  try {
    const auto [err, converged] = fn();
    if (!std::isfinite(err) || err < 0.0) {
      rec.status = "failed";
      rec.error = 0.0;
    } else {
      rec.error = err;
      if (!converged)
        rec.status = "nonconverged";
    }
  } catch (const std::exception &) {
    rec.status = "failed";
  }
  return rec;
}

} // namespace detail

/// Ground truth for one replication: forces and states on the fine grid.
struct KuboTruth {
  TimeGrid fine;
  Matrix g_fine;      ///< 1 x N_fine
  Matrix states_fine; ///< N_fine x 2
};

inline ModelSpec kubo_spec(const KernelHyp &force_kernel, double beta_prior_var = 1.0) {
  ModelSpec spec;
  spec.basis = preset_basis("so2");
  spec.beta = Matrix(2, 1);
  spec.beta << 0.0, 1.0;
  spec.force_kernels = {force_kernel};
  spec.beta_prior_var = beta_prior_var;
  return spec;
}

inline KuboTruth kubo_truth(const ExperimentConfig &cfg, std::uint64_t seed) {
  KuboTruth t;
  t.fine = TimeGrid::uniform(cfg.t0, cfg.t1, detail::fine_step(cfg));
  t.g_fine = gp_sample(t.fine, cfg.force_kernel, derive_seed(seed, 1)).transpose();
  Rng rng(derive_seed(seed, 2));
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  const double theta = angle(rng);
  Vector x0(2);
  x0 << std::cos(theta), std::sin(theta);
  const ModelSpec spec = kubo_spec(cfg.force_kernel);
  t.states_fine = simulate_state(spec, DensePath{t.fine, t.g_fine}, x0, t.fine);
  return t;
}

/// Kubo oscillator study: force-recovery error for gradient matching and for the
/// successive-approximation mixture at each component count.
inline std::vector<ErrorRecord> run_kubo(const ExperimentConfig &cfg) {
  cfg.validate();
  const ModelSpec spec = kubo_spec(cfg.force_kernel, cfg.beta_prior_var);
  const double noise_var = std::max(cfg.noise_sd * cfg.noise_sd, 1e-8);

  auto body = [&](int rep) {
    std::vector<ErrorRecord> recs;
    const std::uint64_t seed = derive_seed(cfg.base_seed, static_cast<std::uint64_t>(rep));
    const KuboTruth truth = kubo_truth(cfg, seed);
    for (std::size_t di = 0; di < cfg.dts.size(); ++di) {
      const double dt = cfg.dts[di];
      const TimeGrid grid = detail::obs_grid(cfg, dt);
      const Matrix states = detail::restrict_rows(truth.fine, truth.states_fine, grid);
      const Vector g_true = detail::restrict_rows(truth.fine, truth.g_fine.transpose(), grid).col(0);
      const Observations obs = observe(grid, states, cfg.noise_sd, derive_seed(seed, 100 + di));

      recs.push_back(detail::guarded(rep, "AG", "MAP", dt, [&] {
        AGConfig ag = make_ag_config(obs, noise_var, derive_seed(seed, 200 + di));
        for (auto &gam : ag.gamma)
          gam = cfg.gamma;
        ag.update_beta = false;
        ag.max_iter = cfg.ag_max_iter;
        ag.tol = cfg.ag_tol;
        const AGFit fit = ag_map(obs, spec, ag, default_ag_init(obs, spec, ag, 0));
        return std::pair{(fit.state.g.row(0).transpose() - g_true).norm(), fit.converged && !fit.diverged};
      }));

      for (int dmix : cfg.mixtures) {
        recs.push_back(detail::guarded(rep, "MixSA", "D=" + std::to_string(dmix), dt, [&] {
          MixSAConfig mc = make_mixsa_config(obs, equally_spaced_anchors(grid, dmix), cfg.kubo_order);
          mc.update_beta = false;
          mc.max_iter = cfg.mixsa_max_iter;
          mc.tol = cfg.mixsa_tol;
          mc.inner_iter = cfg.mixsa_inner_iter;
          mc.substeps = cfg.mixsa_substeps;
          mc.restarts = cfg.mixsa_restarts;
          if (cfg.mixsa_known_noise) {
            mc.alpha = 1.0 / noise_var;
            mc.update_alpha = false;
          }
          const MixSAInit init{Matrix::Zero(1, static_cast<Eigen::Index>(grid.size())), spec.beta};
          const MixSAFit fit = mixsa_em(obs, spec, mc, init, derive_seed(seed, 300 + di));
          return std::pair{(fit.g.row(0).transpose() - g_true).norm(), fit.converged};
        }));
      }
    }
    return recs;
  };
  return detail::flatten(detail::for_each_rep(cfg.n_reps, cfg.threads, body));
}

struct So3Truth {
  TimeGrid fine;
  Matrix g_fine;      ///< 1 x N_fine
  Matrix beta;        ///< 2 x 3, rows on the unit sphere
  Matrix states_fine; ///< N_fine x 9, column-stacked fundamental solution
};

inline ModelSpec so3_spec(const KernelHyp &force_kernel, const Matrix &beta, double beta_prior_var = 1.0) {
  ModelSpec spec;
  spec.basis = preset_basis("so3");
  spec.beta = beta;
  spec.force_kernels = {force_kernel};
  spec.beta_prior_var = beta_prior_var;
  return spec;
}

/// Same model acting on the three stacked columns of the fundamental solution.
inline ModelSpec lifted(const ModelSpec &spec, Eigen::Index copies) {
  ModelSpec out = spec;
  out.basis = lift_basis(spec.basis, copies);
  return out;
}

inline So3Truth so3_truth(const ExperimentConfig &cfg, std::uint64_t seed) {
  So3Truth t;
  t.fine = TimeGrid::uniform(cfg.t0, cfg.t1, detail::fine_step(cfg));
  t.g_fine = gp_sample(t.fine, cfg.force_kernel, derive_seed(seed, 1)).transpose();
  Rng rng(derive_seed(seed, 2));
  t.beta = Matrix(2, 3);
  t.beta.row(0) = uniform_sphere(rng, 3).transpose();
  t.beta.row(1) = uniform_sphere(rng, 3).transpose();
  const ModelSpec spec = so3_spec(cfg.force_kernel, t.beta);
  t.states_fine = stack_fundamental(simulate_fundamental(spec, DensePath{t.fine, t.g_fine}, t.fine));
  return t;
}

/// Re-solves the fundamental solution at estimated grid forces and
/// coefficients; returns N x 9 on `grid`. Between grid points the force is the
/// GP posterior mean given its estimated grid values.
inline Matrix so3_resolve(const ExperimentConfig &cfg, const TimeGrid &grid, const Matrix &g_hat,
                          const Matrix &beta_hat) {
  // at most 1e-3 keeps the second-order integration error below 1e-6
  const TimeGrid fine = refine_grid(grid, std::min(grid.min_spacing() / cfg.fine_factor, 1e-3));
  const ModelSpec spec = so3_spec(cfg.force_kernel, beta_hat);
  Matrix g_fine(g_hat.rows(), static_cast<Eigen::Index>(fine.size()));
  for (Eigen::Index r = 0; r < g_hat.rows(); ++r)
    g_fine.row(r) = gp_interpolate(grid, g_hat.row(r).transpose(), fine, cfg.force_kernel).transpose();
  const DensePath path{fine, g_fine};
  return stack_fundamental(simulate_fundamental(spec, path, grid));
}

/// SO(3) study: reconstruction error of the fundamental solution for
/// gradient matching and for the two-component mixture at each order.
inline std::vector<ErrorRecord> run_so3(const ExperimentConfig &cfg) {
  cfg.validate();
  auto body = [&](int rep) {
    std::vector<ErrorRecord> recs;
    const std::uint64_t seed = derive_seed(cfg.base_seed, static_cast<std::uint64_t>(rep));
    const So3Truth truth = so3_truth(cfg, seed);
    const ModelSpec spec = lifted(so3_spec(cfg.force_kernel, Matrix::Zero(2, 3), cfg.beta_prior_var), 3);
    const double noise_var = std::max(cfg.noise_sd * cfg.noise_sd, 1e-8);
    Rng init_rng(derive_seed(seed, 3));
    Matrix beta_init(2, 3);
    beta_init.row(0) = uniform_sphere(init_rng, 3).transpose();
    beta_init.row(1) = uniform_sphere(init_rng, 3).transpose();

    for (std::size_t di = 0; di < cfg.dts.size(); ++di) {
      const double dt = cfg.dts[di];
      const TimeGrid grid = detail::obs_grid(cfg, dt);
      const Matrix states = detail::restrict_rows(truth.fine, truth.states_fine, grid);
      const Observations obs = observe(grid, states, cfg.noise_sd, derive_seed(seed, 100 + di));
      const auto n = static_cast<Eigen::Index>(grid.size());

      recs.push_back(detail::guarded(rep, "AG", "MAP", dt, [&] {
        AGConfig ag = make_ag_config(obs, noise_var, derive_seed(seed, 200 + di));
        for (auto &gam : ag.gamma)
          gam = cfg.gamma;
        ag.max_iter = cfg.ag_max_iter;
        ag.tol = cfg.ag_tol;
        AGState init = default_ag_init(obs, spec, ag, 0);
        init.beta = beta_init;
        const AGFit fit = ag_map(obs, spec, ag, init);
        const Matrix x_hat = so3_resolve(cfg, grid, fit.state.g, fit.state.beta);
        return std::pair{reconstruction_error(states, x_hat), fit.converged && !fit.diverged};
      }));

      for (int order : cfg.orders) {
        recs.push_back(detail::guarded(rep, "MixSA", "M=" + std::to_string(order), dt, [&] {
          MixSAConfig mc = make_mixsa_config(obs, equally_spaced_anchors(grid, cfg.so3_mixtures), order);
          mc.max_iter = cfg.mixsa_max_iter;
          mc.tol = cfg.mixsa_tol;
          mc.inner_iter = cfg.mixsa_inner_iter;
          mc.substeps = cfg.mixsa_substeps;
          mc.restarts = cfg.mixsa_restarts;
          if (cfg.mixsa_known_noise) {
            mc.alpha = 1.0 / noise_var;
            mc.update_alpha = false;
          }
          const MixSAInit init{Matrix::Zero(1, n), beta_init};
          const MixSAFit fit = mixsa_em(obs, spec, mc, init, derive_seed(seed, 300 + di));
          const Matrix x_hat = so3_resolve(cfg, grid, fit.g, fit.beta);
          return std::pair{reconstruction_error(states, x_hat), fit.converged};
        }));
      }
    }
    return recs;
  };
  return detail::flatten(detail::for_each_rep(cfg.n_reps, cfg.threads, body));
}

inline std::vector<ErrorRecord> run_experiment(const ExperimentConfig &cfg) {
  return cfg.experiment == "kubo" ? run_kubo(cfg) : run_so3(cfg);
}

/// Mean and sample standard deviation per (method, setting, dt) over the
/// records whose status is not "failed". Rows keep first-appearance order.
inline std::vector<SummaryRow> summarize(const std::vector<ErrorRecord> &records) {
  std::vector<SummaryRow> rows;
  std::vector<std::vector<double>> values;
  for (const auto &rec : records) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const SummaryRow &r) {
      return r.method == rec.method && r.setting == rec.setting && r.dt == rec.dt;
    });
    std::size_t idx;
    if (it == rows.end()) {
      rows.push_back(SummaryRow{rec.method, rec.setting, rec.dt, 0.0, 0.0, 0});
      values.emplace_back();
      idx = rows.size() - 1;
    } else {
      idx = static_cast<std::size_t>(it - rows.begin());
    }
    if (rec.status != "failed")
      values[idx].push_back(rec.error);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto &v = values[i];
    rows[i].n_ok = static_cast<int>(v.size());
    if (v.empty()) {
      rows[i].mean_error = std::numeric_limits<double>::quiet_NaN();
      rows[i].sd_error = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    double mean = 0.0;
    for (double x : v)
      mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v)
      ss += (x - mean) * (x - mean);
    rows[i].mean_error = mean;
    rows[i].sd_error = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  }
  return rows;
}

inline double summary_mean(const std::vector<SummaryRow> &rows, const std::string &method, const std::string &setting,
                           double dt) {
  for (const auto &r : rows)
    if (r.method == method && r.setting == setting && std::abs(r.dt - dt) < 1e-12)
      return r.mean_error;
  throw std::out_of_range("summary_mean: no row for " + method + " " + setting);
}

inline void write_errors_csv(std::ostream &os, const std::vector<ErrorRecord> &records) {
  os << "rep,method,setting,dt,error,status\n";
  for (const auto &r : records)
    os << r.rep << ',' << r.method << ',' << r.setting << ',' << detail::fmt17(r.dt) << ','
       << detail::fmt17(r.error) << ',' << r.status << '\n';
}

inline void write_summary_csv(std::ostream &os, const std::vector<SummaryRow> &rows) {
  os << "method,setting,dt,mean_error,sd_error,n_ok\n";
  for (const auto &r : rows)
    os << r.method << ',' << r.setting << ',' << detail::fmt17(r.dt) << ',' << detail::fmt17(r.mean_error) << ','
       << detail::fmt17(r.sd_error) << ',' << r.n_ok << '\n';
}

} // namespace mlfm

#endif // MLFM_EXPERIMENTS_HPP
