#ifndef MLFM_INFER_AG_HPP
#define MLFM_INFER_AG_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mlfm/gp_core.hpp"
#include "mlfm/model.hpp"
#include "mlfm/random.hpp"
#include "mlfm/simulator.hpp"

namespace mlfm {

inline constexpr double kDefaultGamma = 1e-3;

struct AGConfig {
  std::vector<double> gamma;          ///< temperature per state dimension
  std::vector<KernelHyp> state_hyp;   ///< interpolating-GP hyperparameters per state dimension
  double obs_noise_var = 0.05 * 0.05; ///< variance of the Gaussian observation model
  int max_iter = 500;
  double tol = 1e-9;
  bool update_x = true;
  bool update_g = true;
  bool update_beta = true;

  void validate(Eigen::Index k) const {
    if (static_cast<Eigen::Index>(gamma.size()) != k || static_cast<Eigen::Index>(state_hyp.size()) != k)
      throw std::invalid_argument("AGConfig: gamma and state_hyp need one entry per state dimension");
    for (double g : gamma)
      if (!(g > 0.0))
        throw std::invalid_argument("AGConfig: gamma must be positive");
    for (const auto &h : state_hyp)
      h.validate();
    if (!(obs_noise_var > 0.0))
      throw std::invalid_argument("AGConfig: obs_noise_var must be positive");
    if (!(tol > 0.0))
      throw std::invalid_argument("AGConfig: tol must be positive");
  }
};

/// The (X, g, B) triple. X is K x N (row k is x_k), g is R x N.
struct AGState {
  Matrix X;
  Matrix g;
  Matrix beta;
};

/// Per-state-dimension linear representations of the ODE right-hand side.
///   u[k] : K x N,         row j      = u_kj = sum_r A_r(k,j) g_r
///   v[k] : (R+1) x N,     row r      = v_kr = sum_j A_r(k,j) x_j
///   w[k] : (R+1)D x N,    row r*D+d  = w_krd = g_r o sum_j L_d(k,j) x_j
/// with g_0 = 1 throughout.
struct LinearReps {
  std::vector<Matrix> u, v, w;

  /// f via sum_j u_kj o x_j; returns K x N.
  Matrix f_from_u(const Matrix &x) const {
    Matrix f = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t k = 0; k < u.size(); ++k)
      f.row(static_cast<Eigen::Index>(k)) = (u[k].array() * x.array()).colwise().sum();
    return f;
  }

  Matrix f_from_v(const Matrix &g_aug) const {
    Matrix f(static_cast<Eigen::Index>(v.size()), g_aug.cols());
    for (std::size_t k = 0; k < v.size(); ++k)
      f.row(static_cast<Eigen::Index>(k)) = (v[k].array() * g_aug.array()).colwise().sum();
    return f;
  }

  Matrix f_from_w(const Matrix &beta) const {
    const Vector b = beta.transpose().reshaped(); // row-major (r, d)
    Matrix f(static_cast<Eigen::Index>(w.size()), w.front().cols());
    for (std::size_t k = 0; k < w.size(); ++k)
      f.row(static_cast<Eigen::Index>(k)) = b.transpose() * w[k];
    return f;
  }
};

/// Prepends the constant force g_0 = 1 as row 0.
inline Matrix augment_forces(const Matrix &g) {
  Matrix out(g.rows() + 1, g.cols());
  out.row(0).setOnes();
  out.bottomRows(g.rows()) = g;
  return out;
}

inline LinearReps linear_reps(const AGState &state, const BasisSet &basis) {
  const Eigen::Index k_dim = state.X.rows();
  const Eigen::Index n = state.X.cols();
  const Eigen::Index r1 = state.beta.rows();
  const Eigen::Index d_dim = basis.n_basis();
  if (basis.dim_state() != k_dim || state.g.rows() + 1 != r1 || state.g.cols() != n ||
      state.beta.cols() != d_dim)
    throw std::invalid_argument("linear_reps: inconsistent shapes");

  const auto a = structure_matrices(basis, state.beta);
  const Matrix g_aug = augment_forces(state.g);

  LinearReps reps;
  reps.u.assign(static_cast<std::size_t>(k_dim), Matrix::Zero(k_dim, n));
  reps.v.assign(static_cast<std::size_t>(k_dim), Matrix::Zero(r1, n));
  reps.w.assign(static_cast<std::size_t>(k_dim), Matrix::Zero(r1 * d_dim, n));

  for (Eigen::Index r = 0; r < r1; ++r) {
    const Matrix &ar = a[static_cast<std::size_t>(r)];
    const Matrix ax = ar * state.X; // row k = v_kr
    for (Eigen::Index k = 0; k < k_dim; ++k) {
      auto ks = static_cast<std::size_t>(k);
      reps.v[ks].row(r) = ax.row(k);
      for (Eigen::Index j = 0; j < k_dim; ++j)
        reps.u[ks].row(j) += ar(k, j) * g_aug.row(r);
    }
  }
  for (Eigen::Index d = 0; d < d_dim; ++d) {
    const Matrix lx = basis[d] * state.X;
    for (Eigen::Index k = 0; k < k_dim; ++k)
      for (Eigen::Index r = 0; r < r1; ++r)
        reps.w[static_cast<std::size_t>(k)].row(r * d_dim + d) = g_aug.row(r).array() * lx.row(k).array();
  }
  return reps;
}

inline LinearReps linear_reps(const AGState &state, const ModelSpec &spec) {
  return linear_reps(state, spec.basis);
}

/// Fixed quantities of the gradient-matching density on one time grid:
/// gradient operators, expert precisions (C_{dx|x} + gamma I)^{-1}, and the
/// inverse prior covariances of the states and forces.
class GradientMatching {
public:
  GradientMatching(const TimeGrid &grid, const ModelSpec &spec, const AGConfig &cfg)
      : grid_(grid), spec_(spec), cfg_(cfg) {
    spec_.validate();
    cfg_.validate(spec_.dim_state());
    const auto n = static_cast<Eigen::Index>(grid_.size());
    const Matrix eye = Matrix::Identity(n, n);
    for (Eigen::Index k = 0; k < spec_.dim_state(); ++k) {
      const auto ks = static_cast<std::size_t>(k);
      GradientOperator op = gradient_operator(grid_, cfg_.state_hyp[ks]);
      Matrix c = op.cov + cfg_.gamma[ks] * eye;
      expert_prec_.push_back(detail::symmetrize(detail::robust_llt(c, 0.0).solve(eye)));
      grad_.push_back(std::move(op));
      const Matrix cphi = cov_matrix(grid_, cfg_.state_hyp[ks]);
      state_prec_.push_back(detail::symmetrize(detail::robust_llt(cphi, 0.0).solve(eye)));
    }
    for (const auto &psi : spec_.force_kernels) {
      Matrix cpsi = cov_matrix(grid_, psi);
      force_prec_.push_back(detail::symmetrize(detail::robust_llt(cpsi, 0.0).solve(eye)));
      force_cov_.push_back(std::move(cpsi));
    }
  }

  const TimeGrid &grid() const { return grid_; }
  const ModelSpec &spec() const { return spec_; }
  const AGConfig &config() const { return cfg_; }
  const GradientOperator &gradient(Eigen::Index k) const { return grad_[static_cast<std::size_t>(k)]; }
  const Matrix &expert_precision(Eigen::Index k) const { return expert_prec_[static_cast<std::size_t>(k)]; }
  const Matrix &state_precision(Eigen::Index k) const { return state_prec_[static_cast<std::size_t>(k)]; }
  const Matrix &force_covariance(Eigen::Index r) const { return force_cov_[static_cast<std::size_t>(r)]; }
  const Matrix &force_precision(Eigen::Index r) const { return force_prec_[static_cast<std::size_t>(r)]; }

  Eigen::Index n() const { return static_cast<Eigen::Index>(grid_.size()); }
  Eigen::Index k_dim() const { return spec_.dim_state(); }
  Eigen::Index r_dim() const { return spec_.n_forces(); }
  Eigen::Index d_dim() const { return spec_.n_basis(); }

  void check_state(const AGState &s) const {
    if (s.X.rows() != k_dim() || s.X.cols() != n() || s.g.rows() != r_dim() || s.g.cols() != n() ||
        s.beta.rows() != r_dim() + 1 || s.beta.cols() != d_dim())
      throw std::invalid_argument("AGState: shapes inconsistent with the model");
  }

  /// eta_k = f_k - m_{dx_k|x_k}, as a K x N matrix.
  Matrix eta(const AGState &s) const {
    const LinearReps reps = linear_reps(s, spec_.basis);
    Matrix e = reps.f_from_u(s.X);
    for (Eigen::Index k = 0; k < k_dim(); ++k)
      e.row(k) -= (gradient(k).mean_map * s.X.row(k).transpose()).transpose();
    return e;
  }

  /// Marginal gradient-matching log density over X, up to a constant.
  double log_density(const AGState &s) const {
    check_state(s);
    const Matrix e = eta(s);
    double total = 0.0;
    for (Eigen::Index k = 0; k < k_dim(); ++k) {
      const Vector ek = e.row(k).transpose();
      const Vector xk = s.X.row(k).transpose();
      total += ek.dot(expert_precision(k) * ek) + xk.dot(state_precision(k) * xk);
    }
    return -0.5 * total;
  }

  double force_log_prior(const Matrix &g) const {
    double total = 0.0;
    for (Eigen::Index r = 0; r < r_dim(); ++r) {
      const Vector gr = g.row(r).transpose();
      total += gr.dot(force_precision(r) * gr);
    }
    return -0.5 * total;
  }

  double beta_log_prior(const Matrix &beta) const { return -0.5 * beta.squaredNorm() / spec_.beta_prior_var; }

  double obs_log_lik(const AGState &s, const Observations &obs) const {
    return -0.5 * (obs.values.transpose() - s.X).squaredNorm() / cfg_.obs_noise_var;
  }

  /// Objective maximized by the MAP driver (all terms up to constants).
  double joint_log_density(const AGState &s, const Observations *obs) const {
    double total = log_density(s) + force_log_prior(s.g) + beta_log_prior(s.beta);
    if (obs != nullptr)
      total += obs_log_lik(s, *obs);
    return total;
  }

  /// Gaussian conditional of vec(g) = (g_1; ...; g_R).
  GaussianDist cond_g(const AGState &s) const {
    check_state(s);
    const Eigen::Index nn = n(), rr = r_dim();
    const LinearReps reps = linear_reps(s, spec_.basis);
    Matrix prec = Matrix::Zero(rr * nn, rr * nn);
    Vector rhs = Vector::Zero(rr * nn);
    for (Eigen::Index k = 0; k < k_dim(); ++k) {
      const Matrix &q = expert_precision(k);
      const Matrix &vk = reps.v[static_cast<std::size_t>(k)];
      const Vector target = gradient(k).mean_map * s.X.row(k).transpose() - vk.row(0).transpose();
      for (Eigen::Index r = 0; r < rr; ++r) {
        const auto vr = vk.row(r + 1).transpose().asDiagonal();
        rhs.segment(r * nn, nn) += vr * (q * target);
        for (Eigen::Index t = 0; t < rr; ++t) {
          const auto vt = vk.row(t + 1).transpose().asDiagonal();
          prec.block(r * nn, t * nn, nn, nn) += vr * q * vt;
        }
      }
    }
    for (Eigen::Index r = 0; r < rr; ++r)
      prec.block(r * nn, r * nn, nn, nn) += force_precision(r);
    return from_precision(std::move(prec), rhs);
  }

  /// Gaussian conditional of vec(B) in row-major (r, d) order.
  GaussianDist cond_beta(const AGState &s) const {
    check_state(s);
    const Eigen::Index p = (r_dim() + 1) * d_dim();
    const LinearReps reps = linear_reps(s, spec_.basis);
    Matrix prec = Matrix::Identity(p, p) / spec_.beta_prior_var;
    Vector rhs = Vector::Zero(p);
    for (Eigen::Index k = 0; k < k_dim(); ++k) {
      const Matrix wk = reps.w[static_cast<std::size_t>(k)].transpose(); // N x P
      const Matrix qw = expert_precision(k) * wk;
      prec += wk.transpose() * qw;
      rhs += qw.transpose() * (gradient(k).mean_map * s.X.row(k).transpose());
    }
    return from_precision(std::move(prec), rhs);
  }

  /// Gaussian conditional of vec(X) = (x_1; ...; x_K). Without observations
  /// the conditional is the zero-mean density implied by the gradient-matching
  /// term and the state prior alone.
  GaussianDist cond_x(const AGState &s, const Observations *obs) const {
    check_state(s);
    const Eigen::Index nn = n(), kk = k_dim();
    const LinearReps reps = linear_reps(s, spec_.basis);
    // eta = E vec(X) with E_kj = diag(u_kj) - delta_kj D_k
    Matrix e = Matrix::Zero(kk * nn, kk * nn);
    for (Eigen::Index k = 0; k < kk; ++k) {
      const Matrix &uk = reps.u[static_cast<std::size_t>(k)];
      for (Eigen::Index j = 0; j < kk; ++j)
        e.block(k * nn, j * nn, nn, nn).diagonal() = uk.row(j).transpose();
      e.block(k * nn, k * nn, nn, nn) -= gradient(k).mean_map;
    }
    Matrix qe(kk * nn, kk * nn);
    for (Eigen::Index k = 0; k < kk; ++k)
      qe.middleRows(k * nn, nn) = expert_precision(k) * e.middleRows(k * nn, nn);
    Matrix prec = e.transpose() * qe;
    for (Eigen::Index k = 0; k < kk; ++k)
      prec.block(k * nn, k * nn, nn, nn) += state_precision(k);
    Vector rhs = Vector::Zero(kk * nn);
    if (obs != nullptr) {
      if (obs->values.rows() != nn || obs->values.cols() != kk)
        throw std::invalid_argument("cond_x: observations must be N x K");
      prec.diagonal().array() += 1.0 / cfg_.obs_noise_var;
      rhs = obs->values.reshaped() / cfg_.obs_noise_var;
    }
    return from_precision(std::move(prec), rhs);
  }

private:
  static GaussianDist from_precision(Matrix prec, const Vector &rhs) {
    prec = detail::symmetrize(prec);
    auto llt = detail::robust_llt(prec, 1e-12);
    GaussianDist out;
    out.mean = llt.solve(rhs);
    out.cov = detail::symmetrize(llt.solve(Matrix::Identity(prec.rows(), prec.cols())));
    out.precision = std::move(prec);
    return out;
  }

  TimeGrid grid_;
  ModelSpec spec_;
  AGConfig cfg_;
  std::vector<GradientOperator> grad_;
  std::vector<Matrix> expert_prec_, state_prec_, force_prec_, force_cov_;
};

// Free-function forms.

inline double ag_log_density(const AGState &state, const ModelSpec &spec, const AGConfig &cfg,
                             const TimeGrid &grid) {
  return GradientMatching(grid, spec, cfg).log_density(state);
}

inline GaussianDist cond_g(const AGState &state, const ModelSpec &spec, const AGConfig &cfg, const TimeGrid &grid) {
  return GradientMatching(grid, spec, cfg).cond_g(state);
}

inline GaussianDist cond_beta(const AGState &state, const ModelSpec &spec, const AGConfig &cfg,
                              const TimeGrid &grid) {
  return GradientMatching(grid, spec, cfg).cond_beta(state);
}

inline GaussianDist cond_x(const AGState &state, const ModelSpec &spec, const AGConfig &cfg,
                           const Observations &obs) {
  return GradientMatching(obs.grid, spec, cfg).cond_x(state, &obs);
}

/// Fills gamma with the default temperature and fits one interpolating-GP
/// hyperparameter set per observed state dimension.
inline AGConfig make_ag_config(const Observations &obs, double obs_noise_var, std::uint64_t seed = 0) {
  AGConfig cfg;
  cfg.obs_noise_var = obs_noise_var;
  for (Eigen::Index k = 0; k < obs.values.cols(); ++k) {
    const Vector y = obs.values.col(k);
    cfg.state_hyp.push_back(fit_hyperparams(obs.grid, y, obs_noise_var, derive_seed(seed, static_cast<std::uint64_t>(k))).hyp);
    cfg.gamma.push_back(kDefaultGamma);
  }
  return cfg;
}

/// X from the observations, g = 0, beta either the spec's value (when it is
/// not being updated) or a random draw scaled by `beta_scale`.
inline AGState default_ag_init(const Observations &obs, const ModelSpec &spec, const AGConfig &cfg,
                               std::uint64_t seed, double beta_scale = 0.1) {
  AGState s;
  s.X = obs.values.transpose();
  s.g = Matrix::Zero(spec.n_forces(), static_cast<Eigen::Index>(obs.grid.size()));
  if (cfg.update_beta) {
    Rng rng(seed);
    s.beta = beta_scale * standard_normal(rng, spec.beta.size()).reshaped(spec.beta.rows(), spec.beta.cols());
  } else {
    s.beta = spec.beta;
  }
  return s;
}

struct AGFit {
  AGState state;
  std::vector<double> trace; ///< joint objective after each sweep (entry 0 is the initial value)
  int iterations = 0;
  bool converged = false;
  bool diverged = false;
};

namespace detail {

inline void assign_beta(AGState &s, const Vector &vec_beta) {
  s.beta = vec_beta.reshaped(s.beta.cols(), s.beta.rows()).transpose();
}

inline void assign_g(AGState &s, const Vector &vec_g) {
  s.g = vec_g.reshaped(s.g.cols(), s.g.rows()).transpose();
}

inline void assign_x(AGState &s, const Vector &vec_x) { s.X = vec_x.reshaped(s.X.cols(), s.X.rows()).transpose(); }

} // namespace detail

/// Iterated conditional modes: each enabled block is set to its conditional
/// mean in the order X, g, B until the joint objective stalls.
inline AGFit ag_map(const Observations &obs, const ModelSpec &spec, const AGConfig &cfg, const AGState &init) {
  const GradientMatching gm(obs.grid, spec, cfg);
  gm.check_state(init);
  if (!init.X.allFinite() || !init.g.allFinite() || !init.beta.allFinite())
    throw std::invalid_argument("ag_map: initial state must be finite");

  AGFit fit;
  fit.state = init;
  double obj = gm.joint_log_density(fit.state, &obs);
  fit.trace.push_back(obj);
  for (int iter = 0; iter < cfg.max_iter; ++iter) {
    AGState next = fit.state;
    if (cfg.update_x)
      detail::assign_x(next, gm.cond_x(next, &obs).mean);
    if (cfg.update_g && gm.r_dim() > 0)
      detail::assign_g(next, gm.cond_g(next).mean);
    if (cfg.update_beta)
      detail::assign_beta(next, gm.cond_beta(next).mean);
    const double next_obj = gm.joint_log_density(next, &obs);
    fit.iterations = iter + 1;
    if (!std::isfinite(next_obj)) {
      fit.diverged = true;
      break;
    }
    fit.state = std::move(next);
    fit.trace.push_back(next_obj);
    const double change = next_obj - obj;
    obj = next_obj;
    if (std::abs(change) < cfg.tol * (1.0 + std::abs(obj))) {
      fit.converged = true;
      break;
    }
  }
  return fit;
}

/// Systematic-scan Gibbs sampler over the enabled blocks.
inline std::vector<AGState> ag_gibbs(const Observations &obs, const ModelSpec &spec, const AGConfig &cfg,
                                     const AGState &init, int n_samples, std::uint64_t rng_seed) {
  if (n_samples < 1)
    throw std::invalid_argument("ag_gibbs: n_samples must be at least 1");
  const GradientMatching gm(obs.grid, spec, cfg);
  gm.check_state(init);
  Rng rng(rng_seed);
  std::vector<AGState> chain;
  chain.reserve(static_cast<std::size_t>(n_samples));
  AGState s = init;
  for (int i = 0; i < n_samples; ++i) {
    if (cfg.update_x)
      detail::assign_x(s, gm.cond_x(s, &obs).sample(rng));
    if (cfg.update_g && gm.r_dim() > 0)
      detail::assign_g(s, gm.cond_g(s).sample(rng));
    if (cfg.update_beta)
      detail::assign_beta(s, gm.cond_beta(s).sample(rng));
    chain.push_back(s);
  }
  return chain;
}

} // namespace mlfm

#endif // MLFM_INFER_AG_HPP
