#ifndef MLFM_INFER_MIXSA_HPP
#define MLFM_INFER_MIXSA_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "mlfm/gp_core.hpp"
#include "mlfm/model.hpp"
#include "mlfm/random.hpp"
#include "mlfm/simulator.hpp"

namespace mlfm {

/// Mixture of truncated successive-approximation (Picard) regressions.
struct MixSAConfig {
  int order = 5;                    ///< number of Picard applications M
  std::vector<Eigen::Index> anchors; ///< 0-based grid indices of the local initial times
  Vector weights_pi;                ///< mixture weights
  double alpha = 1.0;               ///< precision of the local regressions
  std::vector<Vector> mu;           ///< local initial conditions, one K-vector per anchor
  bool update_pi = true;
  bool update_alpha = true;
  bool update_g = true;
  bool update_beta = true;
  bool update_mu = true;
  int max_iter = 200;
  double tol = 1e-8;
  int inner_iter = 50;    ///< gradient steps per M-step
  double alpha_max = 1e10;
  int substeps = 1;       ///< working-grid subdivisions per observation interval
  int restarts = 0;       ///< extra EM starts drawn from the priors
  int screen_cycles = 20; ///< cycles each start runs before the best one is kept

  Eigen::Index n_mixtures() const { return static_cast<Eigen::Index>(anchors.size()); }

  void validate(Eigen::Index n, Eigen::Index k) const {
    if (order < 1)
      throw std::invalid_argument("MixSAConfig: order must be at least 1");
    if (anchors.empty())
      throw std::invalid_argument("MixSAConfig: at least one anchor required");
    for (auto a : anchors)
      if (a < 0 || a >= n)
        throw std::invalid_argument("MixSAConfig: anchor outside the grid");
    if (weights_pi.size() != n_mixtures())
      throw std::invalid_argument("MixSAConfig: one weight per anchor required");
    if ((weights_pi.array() < 0.0).any() || std::abs(weights_pi.sum() - 1.0) > 1e-9)
      throw std::invalid_argument("MixSAConfig: weights must lie on the simplex");
    if (static_cast<Eigen::Index>(mu.size()) != n_mixtures())
      throw std::invalid_argument("MixSAConfig: one initial condition per anchor required");
    for (const auto &m : mu)
      if (m.size() != k)
        throw std::invalid_argument("MixSAConfig: initial conditions must be K-vectors");
    if (!(alpha > 0.0))
      throw std::invalid_argument("MixSAConfig: alpha must be positive");
    if (!(tol > 0.0))
      throw std::invalid_argument("MixSAConfig: tol must be positive");
    if (substeps < 1)
      throw std::invalid_argument("MixSAConfig: substeps must be at least 1");
  }
};

/// Anchors at the grid points nearest to the centres of `count` equal
/// sub-intervals.
inline std::vector<Eigen::Index> equally_spaced_anchors(const TimeGrid &grid, Eigen::Index count) {
  if (count < 1)
    throw std::invalid_argument("equally_spaced_anchors: count must be positive");
  std::vector<Eigen::Index> out;
  const double span = grid.back() - grid.front();
  for (Eigen::Index v = 0; v < count; ++v) {
    const double target = grid.front() + (static_cast<double>(v) + 0.5) * span / static_cast<double>(count);
    Eigen::Index best = 0;
    for (std::size_t i = 1; i < grid.size(); ++i)
      if (std::abs(grid[i] - target) < std::abs(grid[static_cast<std::size_t>(best)] - target) - 1e-12)
        best = static_cast<Eigen::Index>(i);
    out.push_back(best);
  }
  return out;
}

/// Uniform weights, mu from the observations at the anchors.
inline MixSAConfig make_mixsa_config(const Observations &obs, std::vector<Eigen::Index> anchors, int order) {
  MixSAConfig cfg;
  cfg.order = order;
  cfg.anchors = std::move(anchors);
  const auto d = static_cast<Eigen::Index>(cfg.anchors.size());
  cfg.weights_pi = Vector::Constant(d, 1.0 / static_cast<double>(d));
  for (auto a : cfg.anchors)
    cfg.mu.push_back(obs.values.row(a).transpose());
  return cfg;
}

/// Row n holds the composite-trapezoid weights of the integral from
/// t_anchor to t_n (negated when t_n precedes the anchor).
inline Matrix trapz_weights(const TimeGrid &grid, Eigen::Index anchor) {
  const auto n = static_cast<Eigen::Index>(grid.size());
  if (anchor < 0 || anchor >= n)
    throw std::invalid_argument("trapz_weights: anchor outside the grid");
  Matrix w = Matrix::Zero(n, n);
  for (Eigen::Index row = anchor + 1; row < n; ++row) {
    w.row(row) = w.row(row - 1);
    const double h = grid[static_cast<std::size_t>(row)] - grid[static_cast<std::size_t>(row - 1)];
    w(row, row - 1) += 0.5 * h;
    w(row, row) += 0.5 * h;
  }
  for (Eigen::Index row = anchor - 1; row >= 0; --row) {
    w.row(row) = w.row(row + 1);
    const double h = grid[static_cast<std::size_t>(row + 1)] - grid[static_cast<std::size_t>(row)];
    w(row, row) -= 0.5 * h;
    w(row, row + 1) -= 0.5 * h;
  }
  return w;
}

/// A(t_i) for every grid node, from grid-valued forces g (R x N).
inline std::vector<Matrix> node_coefficients(const BasisSet &basis, const Matrix &beta, const Matrix &g) {
  const auto a = structure_matrices(basis, beta);
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(g.cols()));
  for (Eigen::Index i = 0; i < g.cols(); ++i)
    out.push_back(coefficient_at(a, g.col(i)));
  return out;
}

/// Discretized integral operator on block vectors (v_1, ..., v_N): block
/// (n, i) is w_ni A(t_i).
inline Matrix discrete_K(const Matrix &g, const Matrix &beta, const Matrix &quad, const BasisSet &basis) {
  const Eigen::Index n = quad.rows();
  const Eigen::Index k = basis.dim_state();
  if (quad.cols() != n || g.cols() != n || beta.rows() != g.rows() + 1)
    throw std::invalid_argument("discrete_K: inconsistent shapes");
  const auto a = node_coefficients(basis, beta, g);
  Matrix out(n * k, n * k);
  for (Eigen::Index row = 0; row < n; ++row)
    for (Eigen::Index col = 0; col < n; ++col)
      out.block(row * k, col * k, k, k) = quad(row, col) * a[static_cast<std::size_t>(col)];
  return out;
}

namespace detail {

/// One Picard application on node values z (N x K): z_anchor + W (A_i z_i).
inline Matrix picard_step(const Matrix &z, Eigen::Index anchor, const Matrix &quad, const std::vector<Matrix> &a) {
  Matrix az(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    az.row(i) = (a[static_cast<std::size_t>(i)] * z.row(i).transpose()).transpose();
  Matrix out = quad * az;
  out.rowwise() += z.row(anchor);
  return out;
}

inline double log_sum_exp(const Eigen::Ref<const Vector> &v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m))
    return m;
  return m + std::log((v.array() - m).exp().sum());
}

} // namespace detail

/// M Picard applications starting from the constant path mu; N x K.
inline Matrix picard_mean(Eigen::Index anchor, int order, const Vector &mu, const Matrix &g, const Matrix &beta,
                          const Matrix &quad, const BasisSet &basis) {
  if (order < 1)
    throw std::invalid_argument("picard_mean: order must be at least 1");
  if (mu.size() != basis.dim_state())
    throw std::invalid_argument("picard_mean: mu must be a K-vector");
  const auto a = node_coefficients(basis, beta, g);
  Matrix z = mu.transpose().replicate(quad.rows(), 1);
  for (int m = 0; m < order; ++m)
    z = detail::picard_step(z, anchor, quad, a);
  return z;
}

/// Gradients of a weighted local log density with respect to vec(g) in
/// (r, n) order, vec(B) in row-major (r, d) order, and the component's mu.
struct PicardGradient {
  double value = 0.0;
  Vector g;
  Vector beta;
  Vector mu;
};

/// Fixed quantities of the mixture on one observation grid. Forces are
/// parameterized at the observation times; the Picard operator acts on a
/// working grid that subdivides every observation interval into
/// `substeps` equal parts, with forces linearly interpolated onto it.
class SuccessiveApproximations {
public:
  SuccessiveApproximations(const TimeGrid &grid, const ModelSpec &spec, const MixSAConfig &cfg)
      : grid_(grid), spec_(spec), cfg_(cfg) {
    spec_.validate();
    const auto n = static_cast<Eigen::Index>(grid_.size());
    cfg_.validate(n, spec_.dim_state());
    const Eigen::Index s = cfg_.substeps;
    std::vector<double> t;
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
      const double a = grid_[static_cast<std::size_t>(i)], b = grid_[static_cast<std::size_t>(i + 1)];
      for (Eigen::Index j = 0; j < s; ++j)
        t.push_back(a + (b - a) * static_cast<double>(j) / static_cast<double>(s));
    }
    t.push_back(grid_.back());
    work_ = TimeGrid(std::move(t));
    const auto nf = static_cast<Eigen::Index>(work_.size());
    interp_ = Matrix::Zero(nf, n);
    for (Eigen::Index f = 0; f < nf; ++f) {
      const Eigen::Index i = std::min(f / s, n - 1);
      const Eigen::Index j = f - i * s;
      if (j == 0) {
        interp_(f, i) = 1.0;
      } else {
        const double c = static_cast<double>(j) / static_cast<double>(s);
        interp_(f, i) = 1.0 - c;
        interp_(f, i + 1) = c;
      }
    }
    for (auto a : cfg_.anchors)
      quad_.push_back(trapz_weights(work_, a * s));
  }

  const MixSAConfig &config() const { return cfg_; }
  MixSAConfig &config() { return cfg_; }
  const ModelSpec &spec() const { return spec_; }
  const TimeGrid &working_grid() const { return work_; }
  /// Forces on the working grid from forces at observation times.
  Matrix working_forces(const Matrix &g) const { return g * interp_.transpose(); }
  const Matrix &quad(Eigen::Index v) const { return quad_[static_cast<std::size_t>(v)]; }

  /// Picard mean of component v at the observation times; N x K.
  Matrix mean(Eigen::Index v, const Matrix &g, const Matrix &beta) const {
    const Matrix full = picard_mean(cfg_.anchors[static_cast<std::size_t>(v)] * cfg_.substeps, cfg_.order,
                                    cfg_.mu[static_cast<std::size_t>(v)], working_forces(g), beta, quad(v),
                                    spec_.basis);
    return observed_rows(full);
  }

  /// Per-observation log N(y_n | m_{v,n}, alpha^{-1} I); N x D.
  Matrix pointwise_log_density(const Observations &obs, const Matrix &g, const Matrix &beta) const {
    check(obs, g, beta);
    const Eigen::Index n = obs.values.rows(), k = obs.values.cols();
    const double c = 0.5 * static_cast<double>(k) * std::log(cfg_.alpha / (2.0 * std::numbers::pi));
    Matrix out(n, cfg_.n_mixtures());
    for (Eigen::Index v = 0; v < cfg_.n_mixtures(); ++v) {
      const Matrix resid = obs.values - mean(v, g, beta);
      out.col(v) = (c - 0.5 * cfg_.alpha * resid.rowwise().squaredNorm().array()).matrix();
    }
    return out;
  }

  double local_log_density(const Observations &obs, Eigen::Index v, const Matrix &g, const Matrix &beta) const {
    return pointwise_log_density(obs, g, beta).col(v).sum();
  }

  double mixture_log_lik(const Observations &obs, const Matrix &g, const Matrix &beta) const {
    return mixture_from_pointwise(pointwise_log_density(obs, g, beta));
  }

  /// Row n is the posterior over components for observation n.
  Matrix responsibilities(const Observations &obs, const Matrix &g, const Matrix &beta) const {
    return responsibilities_from_pointwise(pointwise_log_density(obs, g, beta));
  }

  double mixture_from_pointwise(const Matrix &lp) const {
    const Vector log_pi = cfg_.weights_pi.array().log();
    double total = 0.0;
    for (Eigen::Index n = 0; n < lp.rows(); ++n)
      total += detail::log_sum_exp(lp.row(n).transpose() + log_pi);
    return total;
  }

  Matrix responsibilities_from_pointwise(const Matrix &lp) const {
    const Vector log_pi = cfg_.weights_pi.array().log();
    Matrix r(lp.rows(), lp.cols());
    for (Eigen::Index n = 0; n < lp.rows(); ++n) {
      const Vector s = lp.row(n).transpose() + log_pi;
      const double lse = detail::log_sum_exp(s);
      r.row(n) = (s.array() - lse).exp().transpose();
    }
    return r;
  }

  /// Exact gradient of sum_n weights_n log N(y_n | m_{v,n}, alpha^{-1} I) by
  /// forward accumulation of tangents through the Picard applications.
  PicardGradient picard_gradient(const Observations &obs, Eigen::Index v, const Matrix &g, const Matrix &beta,
                                 const Vector &weights) const {
    check(obs, g, beta);
    const Eigen::Index n = obs.values.rows(), k = obs.values.cols();
    const Eigen::Index rr = g.rows(), dd = spec_.n_basis();
    const Eigen::Index nf = interp_.rows(), s = cfg_.substeps;
    if (weights.size() != n)
      throw std::invalid_argument("picard_gradient: one weight per observation required");
    const Eigen::Index anchor = cfg_.anchors[static_cast<std::size_t>(v)] * s;
    const Matrix &w = quad(v);
    const Matrix gf = working_forces(g);
    const auto sm = structure_matrices(spec_.basis, beta);
    const auto a = node_coefficients(spec_.basis, beta, gf);
    const Matrix g_aug = augment_g(gf);

    const Eigen::Index n_g = rr * n, n_b = (rr + 1) * dd, n_mu = k;
    const Eigen::Index n_par = n_g + n_b + n_mu;
    // tangents[p] is dZ/dtheta_p on the working grid, N_f x K
    std::vector<Matrix> tangents(static_cast<std::size_t>(n_par), Matrix::Zero(nf, k));
    for (Eigen::Index j = 0; j < k; ++j)
      tangents[static_cast<std::size_t>(n_g + n_b + j)].col(j).setOnes();

    Matrix z = cfg_.mu[static_cast<std::size_t>(v)].transpose().replicate(nf, 1);
    for (int m = 0; m < cfg_.order; ++m) {
      for (auto &t : tangents)
        t = detail::picard_step(t, anchor, w, a);
      // explicit dependence of the operator on g and B, evaluated at the old z
      for (Eigen::Index r = 0; r < rr; ++r) {
        const Matrix az = z * sm[static_cast<std::size_t>(r + 1)].transpose(); // row f = (A_r z_f)^T
        for (Eigen::Index i = 0; i < n; ++i) {
          const Eigen::Index lo = std::max<Eigen::Index>(0, (i - 1) * s + 1);
          const Eigen::Index hi = std::min<Eigen::Index>(nf - 1, (i + 1) * s - 1);
          Matrix scaled = Matrix::Zero(nf, k);
          for (Eigen::Index f = lo; f <= hi; ++f)
            scaled.row(f) = interp_(f, i) * az.row(f);
          tangents[static_cast<std::size_t>(r * n + i)] += w * scaled;
        }
      }
      for (Eigen::Index d = 0; d < dd; ++d) {
        const Matrix lz = z * spec_.basis[d].transpose(); // row f = (L_d z_f)^T
        for (Eigen::Index r = 0; r <= rr; ++r) {
          const Matrix scaled = g_aug.row(r).transpose().asDiagonal() * lz;
          tangents[static_cast<std::size_t>(n_g + r * dd + d)] += w * scaled;
        }
      }
      z = detail::picard_step(z, anchor, w, a);
    }

    const Matrix resid = obs.values - observed_rows(z);
    const Matrix wres = cfg_.alpha * (weights.asDiagonal() * resid);
    const double c = 0.5 * static_cast<double>(k) * std::log(cfg_.alpha / (2.0 * std::numbers::pi));
    PicardGradient out;
    out.value = (weights.array() * (c - 0.5 * cfg_.alpha * resid.rowwise().squaredNorm().array())).sum();
    Vector grad(n_par);
    for (Eigen::Index p = 0; p < n_par; ++p)
      grad(p) = (wres.array() * observed_rows(tangents[static_cast<std::size_t>(p)]).array()).sum();
    out.g = grad.head(n_g);
    out.beta = grad.segment(n_g, n_b);
    out.mu = grad.tail(n_mu);
    return out;
  }

  PicardGradient picard_gradient(const Observations &obs, Eigen::Index v, const Matrix &g, const Matrix &beta) const {
    return picard_gradient(obs, v, g, beta, Vector::Ones(obs.values.rows()));
  }

  /// Same gradient as picard_gradient, computed by back-propagating the
  /// residual through the Picard applications. Cost is independent of the
  /// number of parameters; the EM driver uses this form.
  PicardGradient picard_gradient_reverse(const Observations &obs, Eigen::Index v, const Matrix &g,
                                         const Matrix &beta, const Vector &weights) const {
    check(obs, g, beta);
    const Eigen::Index n = obs.values.rows(), k = obs.values.cols();
    const Eigen::Index rr = g.rows(), dd = spec_.n_basis();
    const Eigen::Index nf = interp_.rows(), s = cfg_.substeps;
    if (weights.size() != n)
      throw std::invalid_argument("picard_gradient: one weight per observation required");
    const Eigen::Index anchor = cfg_.anchors[static_cast<std::size_t>(v)] * s;
    const Matrix &w = quad(v);
    const Matrix gf = working_forces(g);
    const auto sm = structure_matrices(spec_.basis, beta);
    const auto a = node_coefficients(spec_.basis, beta, gf);

    std::vector<Matrix> iterates{cfg_.mu[static_cast<std::size_t>(v)].transpose().replicate(nf, 1)};
    for (int m = 0; m < cfg_.order; ++m)
      iterates.push_back(detail::picard_step(iterates.back(), anchor, w, a));

    const Matrix resid = obs.values - observed_rows(iterates.back());
    const double c = 0.5 * static_cast<double>(k) * std::log(cfg_.alpha / (2.0 * std::numbers::pi));
    PicardGradient out;
    out.value = (weights.array() * (c - 0.5 * cfg_.alpha * resid.rowwise().squaredNorm().array())).sum();

    // adjoint of the final iterate
    Matrix adj = Matrix::Zero(nf, k);
    for (Eigen::Index i = 0; i < n; ++i)
      adj.row(i * s) = cfg_.alpha * weights(i) * resid.row(i);
    std::vector<Matrix> adj_a(static_cast<std::size_t>(nf), Matrix::Zero(k, k));
    for (int m = cfg_.order - 1; m >= 0; --m) {
      const Matrix &z = iterates[static_cast<std::size_t>(m)];
      const Matrix h = w.transpose() * adj; // row f: adjoint of A_f z_f
      Matrix next(nf, k);
      for (Eigen::Index f = 0; f < nf; ++f) {
        const auto fs = static_cast<std::size_t>(f);
        next.row(f) = (a[fs].transpose() * h.row(f).transpose()).transpose();
        adj_a[fs] += h.row(f).transpose() * z.row(f);
      }
      next.row(anchor) += adj.colwise().sum();
      adj = std::move(next);
    }

    // chain rule through A_f = sum_r g_aug(r, f) A_r and g_f = interp * g
    Matrix dg_work(rr, nf);
    for (Eigen::Index r = 0; r < rr; ++r)
      for (Eigen::Index f = 0; f < nf; ++f)
        dg_work(r, f) = (adj_a[static_cast<std::size_t>(f)].array() * sm[static_cast<std::size_t>(r + 1)].array()).sum();
    const Matrix dg = dg_work * interp_;
    out.g = dg.transpose().reshaped();
    out.beta = Vector::Zero((rr + 1) * dd);
    for (Eigen::Index f = 0; f < nf; ++f) {
      const Matrix &da = adj_a[static_cast<std::size_t>(f)];
      for (Eigen::Index d = 0; d < dd; ++d) {
        const double ip = (da.array() * spec_.basis[d].array()).sum();
        out.beta(d) += ip;
        for (Eigen::Index r = 0; r < rr; ++r)
          out.beta((r + 1) * dd + d) += gf(r, f) * ip;
      }
    }
    out.mu = adj.colwise().sum().transpose();
    return out;
  }

private:
  static Matrix augment_g(const Matrix &g) {
    Matrix out(g.rows() + 1, g.cols());
    out.row(0).setOnes();
    out.bottomRows(g.rows()) = g;
    return out;
  }

  Matrix observed_rows(const Matrix &full) const {
    if (cfg_.substeps == 1)
      return full;
    const auto n = static_cast<Eigen::Index>(grid_.size());
    Matrix out(n, full.cols());
    for (Eigen::Index i = 0; i < n; ++i)
      out.row(i) = full.row(i * cfg_.substeps);
    return out;
  }

  void check(const Observations &obs, const Matrix &g, const Matrix &beta) const {
    const auto n = static_cast<Eigen::Index>(grid_.size());
    if (obs.values.rows() != n || obs.values.cols() != spec_.dim_state())
      throw std::invalid_argument("MixSA: observations must be N x K on the model grid");
    if (g.rows() != spec_.n_forces() || g.cols() != n)
      throw std::invalid_argument("MixSA: forces must be R x N");
    if (beta.rows() != spec_.n_forces() + 1 || beta.cols() != spec_.n_basis())
      throw std::invalid_argument("MixSA: beta must be (R+1) x D");
  }

  TimeGrid grid_;
  ModelSpec spec_;
  MixSAConfig cfg_;
  TimeGrid work_;
  Matrix interp_; ///< N_f x N linear interpolation from observation times
  std::vector<Matrix> quad_;
};

// Free-function forms.

inline double local_log_density(const Observations &obs, Eigen::Index v, const ModelSpec &spec,
                                const MixSAConfig &cfg, const Matrix &g, const Matrix &beta) {
  return SuccessiveApproximations(obs.grid, spec, cfg).local_log_density(obs, v, g, beta);
}

inline double mixture_log_lik(const Observations &obs, const ModelSpec &spec, const MixSAConfig &cfg,
                              const Matrix &g, const Matrix &beta) {
  return SuccessiveApproximations(obs.grid, spec, cfg).mixture_log_lik(obs, g, beta);
}

inline Matrix responsibilities(const Observations &obs, const ModelSpec &spec, const MixSAConfig &cfg,
                               const Matrix &g, const Matrix &beta) {
  return SuccessiveApproximations(obs.grid, spec, cfg).responsibilities(obs, g, beta);
}

inline PicardGradient picard_gradient(const Observations &obs, Eigen::Index v, const ModelSpec &spec,
                                      const MixSAConfig &cfg, const Matrix &g, const Matrix &beta) {
  return SuccessiveApproximations(obs.grid, spec, cfg).picard_gradient(obs, v, g, beta);
}

class MonotonicityError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct MixSAInit {
  Matrix g;
  Matrix beta;
};

struct MixSAFit {
  Matrix g;
  Matrix beta;
  MixSAConfig cfg;           ///< with fitted mu, pi and alpha
  Matrix resp;               ///< N x D responsibilities at the final parameters
  std::vector<double> trace; ///< penalized objective after each cycle (entry 0 is the initial value)
  int iterations = 0;
  bool converged = false;
};

namespace detail {

/// Force and coefficient log priors on the observation grid.
class MixSAPrior {
public:
  MixSAPrior(const TimeGrid &grid, const ModelSpec &spec) : beta_var_(spec.beta_prior_var) {
    const auto n = static_cast<Eigen::Index>(grid.size());
    for (const auto &psi : spec.force_kernels) {
      const Matrix c = cov_matrix(grid, psi);
      force_prec_.push_back(symmetrize(robust_llt(c, 0.0).solve(Matrix::Identity(n, n))));
    }
  }

  double value(const Matrix &g, const Matrix &beta) const {
    double total = -0.5 * beta.squaredNorm() / beta_var_;
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const Vector gr = g.row(r).transpose();
      total -= 0.5 * gr.dot(force_prec_[static_cast<std::size_t>(r)] * gr);
    }
    return total;
  }

  Vector grad_g(const Matrix &g) const {
    Vector out(g.size());
    const Eigen::Index n = g.cols();
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      out.segment(r * n, n) = -(force_prec_[static_cast<std::size_t>(r)] * g.row(r).transpose());
    return out;
  }

  Vector grad_beta(const Matrix &beta) const { return -Vector(beta.transpose().reshaped()) / beta_var_; }

private:
  double beta_var_;
  std::vector<Matrix> force_prec_;
};

/// Parameter packing for the M-step: vec(g) in (r, n) order, vec(B)
/// row-major, then each mu_v; only enabled blocks are included.
struct MStepPacking {
  bool use_g, use_beta, use_mu;
  Eigen::Index r, n, b_rows, b_cols, k, d;

  Eigen::Index size() const {
    return (use_g ? r * n : 0) + (use_beta ? b_rows * b_cols : 0) + (use_mu ? k * d : 0);
  }

  Vector pack(const Matrix &g, const Matrix &beta, const std::vector<Vector> &mu) const {
    Vector out(size());
    Eigen::Index off = 0;
    if (use_g) {
      out.segment(off, r * n) = g.transpose().reshaped();
      off += r * n;
    }
    if (use_beta) {
      out.segment(off, b_rows * b_cols) = beta.transpose().reshaped();
      off += b_rows * b_cols;
    }
    if (use_mu)
      for (const auto &m : mu) {
        out.segment(off, k) = m;
        off += k;
      }
    return out;
  }

  void unpack(const Vector &x, Matrix &g, Matrix &beta, std::vector<Vector> &mu) const {
    Eigen::Index off = 0;
    if (use_g) {
      g = x.segment(off, r * n).reshaped(n, r).transpose();
      off += r * n;
    }
    if (use_beta) {
      beta = x.segment(off, b_rows * b_cols).reshaped(b_cols, b_rows).transpose();
      off += b_rows * b_cols;
    }
    if (use_mu)
      for (auto &m : mu) {
        m = x.segment(off, k);
        off += k;
      }
  }
};

} // namespace detail

namespace detail {

/// One EM trajectory: owns the current parameters and the mixture state.
class MixSARun {
public:
  MixSARun(const Observations &obs, const ModelSpec &spec, const MixSAConfig &cfg, const MixSAPrior &prior,
           const MixSAInit &init)
      : obs_(&obs), prior_(&prior), sa_(obs.grid, spec, cfg),
        pack_{sa_.config().update_g && spec.n_forces() > 0,
              sa_.config().update_beta,
              sa_.config().update_mu,
              spec.n_forces(),
              obs.values.rows(),
              spec.n_forces() + 1,
              spec.n_basis(),
              obs.values.cols(),
              sa_.config().n_mixtures()} {
    fit_.g = init.g;
    fit_.beta = init.beta;
    if (fit_.g.rows() != spec.n_forces() || fit_.g.cols() != obs.values.rows() ||
        fit_.beta.rows() != spec.n_forces() + 1 || fit_.beta.cols() != spec.n_basis())
      throw std::invalid_argument("mixsa_em: initial g or beta has the wrong shape");
    obj_ = penalized();
    if (!std::isfinite(obj_))
      throw std::runtime_error("mixsa_em: non-finite initial objective");
    fit_.trace.push_back(obj_);
  }

  double objective() const { return obj_; }
  bool done() const { return fit_.converged; }

  /// Runs up to `cycles` further EM cycles; stops early on convergence.
  void run(int cycles) {
    for (int c = 0; c < cycles && !fit_.converged; ++c)
      cycle();
  }

  MixSAFit finish() {
    fit_.cfg = sa_.config();
    fit_.resp = sa_.responsibilities(*obs_, fit_.g, fit_.beta);
    return fit_;
  }

private:
  double penalized() const {
    return sa_.mixture_log_lik(*obs_, fit_.g, fit_.beta) + prior_->value(fit_.g, fit_.beta);
  }

  double q_value(const Matrix &resp, const Matrix &g, const Matrix &beta) const {
    const Matrix lp = sa_.pointwise_log_density(*obs_, g, beta);
    return (resp.array() * lp.array()).sum() + prior_->value(g, beta);
  }

  Vector q_grad(const Matrix &resp, const Matrix &g, const Matrix &beta) const {
    const Eigen::Index dmix = sa_.config().n_mixtures();
    Vector gg = pack_.use_g ? prior_->grad_g(g) : Vector();
    Vector gb = pack_.use_beta ? prior_->grad_beta(beta) : Vector();
    Vector out(pack_.size());
    Eigen::Index off = (pack_.use_g ? gg.size() : 0) + (pack_.use_beta ? gb.size() : 0);
    for (Eigen::Index v = 0; v < dmix; ++v) {
      const PicardGradient pg = sa_.picard_gradient_reverse(*obs_, v, g, beta, resp.col(v));
      if (pack_.use_g)
        gg += pg.g;
      if (pack_.use_beta)
        gb += pg.beta;
      if (pack_.use_mu) {
        out.segment(off, pack_.k) = pg.mu;
        off += pack_.k;
      }
    }
    off = 0;
    if (pack_.use_g) {
      out.segment(off, gg.size()) = gg;
      off += gg.size();
    }
    if (pack_.use_beta)
      out.segment(off, gb.size()) = gb;
    return out;
  }

  /// Gradient ascent on Q with Barzilai-Borwein trial steps and Armijo
  /// backtracking. Once the achievable gain in Q drops to rounding level, a
  /// trial step is accepted when the slope along the search direction is
  /// still positive at the trial point.
  void ascend(const Matrix &resp) {
    MixSAConfig &cfg = sa_.config();
    Vector x = pack_.pack(fit_.g, fit_.beta, cfg.mu);
    double q = q_value(resp, fit_.g, fit_.beta);
    Vector grad = q_grad(resp, fit_.g, fit_.beta);
    Vector prev_x, prev_grad;
    double step = 1.0 / std::max(1.0, grad.norm());
    Matrix g_new = fit_.g, b_new = fit_.beta;
    for (int it = 0; it < cfg.inner_iter; ++it) {
      const double gnorm2 = grad.squaredNorm();
      if (!(gnorm2 > 0.0) || !std::isfinite(gnorm2))
        break;
      if (prev_x.size() > 0) {
        const Vector sx = x - prev_x, sy = grad - prev_grad;
        const double curv = sx.dot(sy);
        if (curv < 0.0)
          step = sx.squaredNorm() / -curv;
      }
      const std::vector<Vector> mu_old = cfg.mu;
      const double rounding = 1e-13 * (1.0 + std::abs(q));
      bool accepted = false;
      Vector grad_new;
      for (int bt = 0; bt < 60; ++bt) {
        const Vector trial = x + step * grad;
        pack_.unpack(trial, g_new, b_new, cfg.mu);
        const double q_new = q_value(resp, g_new, b_new);
        if (std::isfinite(q_new) && q_new >= q + 1e-4 * step * gnorm2) {
          accepted = true;
        } else if (std::isfinite(q_new) && std::abs(q_new - q) <= rounding) {
          grad_new = q_grad(resp, g_new, b_new);
          accepted = grad_new.dot(grad) > 0.0;
        }
        if (accepted) {
          prev_x = std::move(x);
          prev_grad = std::move(grad);
          x = trial;
          q = std::max(q, q_new);
          fit_.g = g_new;
          fit_.beta = b_new;
          break;
        }
        cfg.mu = mu_old;
        step *= 0.5;
      }
      if (!accepted || step * std::sqrt(gnorm2) <= 1e-12 * (1.0 + x.norm()))
        return;
      grad = grad_new.size() > 0 ? std::move(grad_new) : q_grad(resp, fit_.g, fit_.beta);
    }
  }

  void cycle() {
    MixSAConfig &cfg = sa_.config();
    const Matrix resp = sa_.responsibilities(*obs_, fit_.g, fit_.beta);
    if (pack_.size() > 0)
      ascend(resp);
    if (cfg.update_alpha) {
      double ss = 0.0;
      for (Eigen::Index v = 0; v < cfg.n_mixtures(); ++v) {
        const Matrix resid = obs_->values - sa_.mean(v, fit_.g, fit_.beta);
        ss += (resp.col(v).array() * resid.rowwise().squaredNorm().array()).sum();
      }
      const double denom = resp.sum() * static_cast<double>(obs_->values.cols());
      cfg.alpha = (ss > 0.0) ? std::min(denom / ss, cfg.alpha_max) : cfg.alpha_max;
    }
    if (cfg.update_pi)
      cfg.weights_pi = resp.colwise().sum().transpose() / resp.sum();

    const double next = penalized();
    ++fit_.iterations;
    if (!std::isfinite(next))
      throw std::runtime_error("mixsa_em: non-finite objective");
    if (next < obj_ - 1e-8) {
      std::ostringstream msg;
      msg.precision(17);
      msg << "mixsa_em: objective decreased from " << obj_ << " to " << next << " in cycle " << fit_.iterations;
      throw MonotonicityError(msg.str());
    }
    fit_.trace.push_back(next);
    const double change = next - obj_;
    obj_ = next;
    if (change < cfg.tol * (1.0 + std::abs(obj_)))
      fit_.converged = true;
  }

  const Observations *obs_;
  const MixSAPrior *prior_;
  SuccessiveApproximations sa_;
  MStepPacking pack_;
  MixSAFit fit_;
  double obj_ = 0.0;
};

} // namespace detail

/// Generalized EM for the mixture: responsibilities in the E-step; gradient
/// ascent with backtracking on (g, B, mu) followed by closed-form alpha and
/// pi updates in the M-step.
///
/// With cfg.restarts > 0, additional starts are drawn from the priors
/// (forces from their GP prior on the grid, coefficients from N(0, beta_prior_var)
/// when they are updated). Every start runs cfg.screen_cycles cycles and the
/// one with the highest penalized objective is run to completion.
inline MixSAFit mixsa_em(const Observations &obs, const ModelSpec &spec, const MixSAConfig &cfg,
                         const MixSAInit &init, std::uint64_t rng_seed = 0) {
  const detail::MixSAPrior prior(obs.grid, spec);
  if (cfg.restarts < 0 || cfg.screen_cycles < 0)
    throw std::invalid_argument("mixsa_em: restarts and screen_cycles must be nonnegative");
  if (cfg.restarts == 0) {
    detail::MixSARun run(obs, spec, cfg, prior, init);
    run.run(cfg.max_iter);
    return run.finish();
  }

  std::vector<MixSAInit> starts{init};
  for (int i = 0; i < cfg.restarts; ++i) {
    const std::uint64_t seed = derive_seed(rng_seed, static_cast<std::uint64_t>(i));
    MixSAInit s = init;
    for (Eigen::Index r = 0; r < spec.n_forces(); ++r)
      s.g.row(r) = gp_sample(obs.grid, spec.force_kernels[static_cast<std::size_t>(r)], derive_seed(seed, static_cast<std::uint64_t>(r))).transpose();
    if (cfg.update_beta) {
      Rng rng(derive_seed(seed, 1000));
      s.beta = std::sqrt(spec.beta_prior_var) * standard_normal(rng, init.beta.size()).reshaped(init.beta.rows(), init.beta.cols());
    }
    starts.push_back(std::move(s));
  }

  const int screen = std::min(cfg.screen_cycles, cfg.max_iter);
  std::vector<detail::MixSARun> runs;
  runs.reserve(starts.size());
  std::size_t best = 0;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    runs.emplace_back(obs, spec, cfg, prior, starts[i]);
    runs.back().run(screen);
    if (runs.back().objective() > runs[best].objective())
      best = i;
  }
  runs[best].run(cfg.max_iter - screen);
  return runs[best].finish();
}

} // namespace mlfm

#endif // MLFM_INFER_MIXSA_HPP
