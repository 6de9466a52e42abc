#ifndef MLFM_GP_CORE_HPP
#define MLFM_GP_CORE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include "mlfm/random.hpp"

namespace mlfm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised when a factorization fails even after jitter escalation.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Squared-exponential kernel hyperparameters.
struct KernelHyp {
  double amplitude_sq = 1.0;
  double lengthscale = 1.0;

  void validate() const {
    if (!(amplitude_sq > 0.0) || !std::isfinite(amplitude_sq))
      throw std::invalid_argument("KernelHyp: amplitude_sq must be positive");
    if (!(lengthscale > 0.0) || !std::isfinite(lengthscale))
      throw std::invalid_argument("KernelHyp: lengthscale must be positive");
  }
};

/// Strictly increasing sequence of time points.
class TimeGrid {
public:
  TimeGrid() = default;

  explicit TimeGrid(std::vector<double> times) : times_(std::move(times)) {
    if (times_.empty())
      throw std::invalid_argument("TimeGrid: at least one time point required");
    for (std::size_t i = 0; i < times_.size(); ++i) {
      if (!std::isfinite(times_[i]))
        throw std::invalid_argument("TimeGrid: non-finite time");
      if (i > 0 && !(times_[i] > times_[i - 1]))
        throw std::invalid_argument("TimeGrid: times must be strictly increasing");
    }
  }

  /// Grid t0, t0+dt, ... up to t1 inclusive (the last point is snapped to t1
  /// when within 1e-9*dt of it).
  static TimeGrid uniform(double t0, double t1, double dt) {
    if (!(dt > 0.0) || !(t1 > t0))
      throw std::invalid_argument("TimeGrid::uniform: need dt > 0 and t1 > t0");
    const auto steps = static_cast<std::size_t>(std::floor((t1 - t0) / dt + 1e-9));
    std::vector<double> t(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i)
      t[i] = t0 + static_cast<double>(i) * dt;
    if (std::abs(t.back() - t1) <= 1e-9 * dt)
      t.back() = t1;
    return TimeGrid(std::move(t));
  }

  std::size_t size() const { return times_.size(); }
  double operator[](std::size_t i) const { return times_[i]; }
  double front() const { return times_.front(); }
  double back() const { return times_.back(); }
  const std::vector<double> &times() const { return times_; }

  Vector as_vector() const {
    return Eigen::Map<const Vector>(times_.data(), static_cast<Eigen::Index>(times_.size()));
  }

  double min_spacing() const {
    double h = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < times_.size(); ++i)
      h = std::min(h, times_[i] - times_[i - 1]);
    return h;
  }

  double max_spacing() const {
    double h = 0.0;
    for (std::size_t i = 1; i < times_.size(); ++i)
      h = std::max(h, times_[i] - times_[i - 1]);
    return h;
  }

  double mean_spacing() const {
    return times_.size() < 2 ? 0.0 : (back() - front()) / static_cast<double>(times_.size() - 1);
  }

private:
  std::vector<double> times_;
};

/// Multivariate normal in moment form; the precision is kept when the
/// producer assembled it directly.
struct GaussianDist {
  Vector mean;
  Matrix cov;
  Matrix precision;

  Eigen::Index dim() const { return mean.size(); }

  /// Log density up to the normalizing constant, evaluated through the
  /// precision when available.
  double log_kernel(const Vector &x) const {
    const Vector r = x - mean;
    if (precision.size() > 0)
      return -0.5 * r.dot(precision * r);
    Eigen::LDLT<Matrix> ldlt(cov);
    return -0.5 * r.dot(ldlt.solve(r));
  }

  Vector sample(Rng &rng) const;
};

namespace detail {

/// Cholesky of `m` with geometric jitter escalation starting at `jitter`.
inline Eigen::LLT<Matrix> robust_llt(const Matrix &m, double jitter, int max_tries = 8) {
  const double scale = std::max(m.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  double extra = 0.0;
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    Matrix a = m;
    a.diagonal().array() += extra;
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() == Eigen::Success)
      return llt;
    extra = (extra == 0.0) ? std::max(jitter, 1e-12 * scale) : extra * 10.0;
  }
  throw NumericalError("Cholesky factorization failed after jitter escalation");
}

inline Matrix symmetrize(const Matrix &m) { return 0.5 * (m + m.transpose()); }

} // namespace detail

inline Vector GaussianDist::sample(Rng &rng) const {
  const Vector z = standard_normal(rng, mean.size());
  if (precision.size() > 0) {
    // x = mean + L^{-T} z with precision = L L^T
    auto llt = detail::robust_llt(precision, 0.0);
    return mean + llt.matrixU().solve(z);
  }
  auto llt = detail::robust_llt(cov, 1e-12);
  return mean + llt.matrixL() * z;
}

// ---------------------------------------------------------------------------
// Kernel and derivatives

inline double rbf_eval(double t, double s, const KernelHyp &hyp) {
  const double d = t - s;
  return hyp.amplitude_sq * std::exp(-0.5 * d * d / (hyp.lengthscale * hyp.lengthscale));
}

/// d k(t, s) / dt
inline double rbf_cross_grad(double t, double s, const KernelHyp &hyp) {
  const double l2 = hyp.lengthscale * hyp.lengthscale;
  return -((t - s) / l2) * rbf_eval(t, s, hyp);
}

/// d^2 k(t, s) / dt ds
inline double rbf_grad_grad(double t, double s, const KernelHyp &hyp) {
  const double l2 = hyp.lengthscale * hyp.lengthscale;
  const double d = t - s;
  return (1.0 / l2 - d * d / (l2 * l2)) * rbf_eval(t, s, hyp);
}

inline double default_jitter(const KernelHyp &hyp) { return 1e-8 * hyp.amplitude_sq; }

inline Matrix cov_matrix(const TimeGrid &grid, const KernelHyp &hyp, double jitter) {
  if (jitter < 0.0)
    throw std::invalid_argument("cov_matrix: jitter must be nonnegative");
  const auto n = static_cast<Eigen::Index>(grid.size());
  Matrix k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double v = rbf_eval(grid[i], grid[j], hyp);
      k(i, j) = v;
      k(j, i) = v;
    }
    k(i, i) += jitter;
  }
  return k;
}

inline Matrix cov_matrix(const TimeGrid &grid, const KernelHyp &hyp) {
  return cov_matrix(grid, hyp, default_jitter(hyp));
}

/// The gradient of a GP given its values on a grid is Gaussian with a mean
/// that is a fixed linear map of the values and a covariance that does not
/// depend on them. Inference code uses the pieces directly.
struct GradientOperator {
  Matrix mean_map; ///< C_{dx,x} C_{xx}^{-1}
  Matrix cov;      ///< C_{dx,dx} - C_{dx,x} C_{xx}^{-1} C_{x,dx}

  GaussianDist at(const Vector &x) const {
    if (x.size() != mean_map.cols())
      throw std::invalid_argument("GradientOperator: state length mismatch");
    return GaussianDist{mean_map * x, cov, Matrix()};
  }
};

inline GradientOperator gradient_operator(const TimeGrid &grid, const KernelHyp &hyp, double jitter) {
  hyp.validate();
  const auto n = static_cast<Eigen::Index>(grid.size());
  const Matrix cxx = cov_matrix(grid, hyp, jitter);
  Matrix cdx(n, n), cdd(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      cdx(i, j) = rbf_cross_grad(grid[i], grid[j], hyp);
      cdd(i, j) = rbf_grad_grad(grid[i], grid[j], hyp);
    }
  auto llt = detail::robust_llt(cxx, 0.0);
  // C_xx^{-1} C_{x,dx} = C_xx^{-1} cdx^T
  const Matrix solved = llt.solve(Matrix(cdx.transpose()));
  GradientOperator op;
  op.mean_map = solved.transpose();
  op.cov = detail::symmetrize(cdd - cdx * solved);
  return op;
}

inline GradientOperator gradient_operator(const TimeGrid &grid, const KernelHyp &hyp) {
  return gradient_operator(grid, hyp, default_jitter(hyp));
}

inline GaussianDist gradient_conditional(const TimeGrid &grid, const KernelHyp &hyp, const Vector &x) {
  if (static_cast<std::size_t>(x.size()) != grid.size())
    throw std::invalid_argument("gradient_conditional: len(x) must equal grid size");
  return gradient_operator(grid, hyp).at(x);
}

/// One draw from N(0, cov_matrix(grid, hyp)).
inline Vector gp_sample(const TimeGrid &grid, const KernelHyp &hyp, std::uint64_t rng_seed) {
  hyp.validate();
  Rng rng(rng_seed);
  const Matrix k = cov_matrix(grid, hyp);
  auto llt = detail::robust_llt(k, default_jitter(hyp));
  const Vector z = standard_normal(rng, k.rows());
  return llt.matrixL() * z;
}

/// Posterior mean at `at` of a zero-mean GP observed without noise at the
/// grid values `y`.
inline Vector gp_interpolate(const TimeGrid &grid, const Vector &y, const TimeGrid &at, const KernelHyp &hyp) {
  hyp.validate();
  if (static_cast<std::size_t>(y.size()) != grid.size())
    throw std::invalid_argument("gp_interpolate: len(y) must equal grid size");
  const Vector w = detail::robust_llt(cov_matrix(grid, hyp), 0.0).solve(y);
  Vector out(static_cast<Eigen::Index>(at.size()));
  for (std::size_t i = 0; i < at.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < grid.size(); ++j)
      s += rbf_eval(at[i], grid[j], hyp) * w(static_cast<Eigen::Index>(j));
    out(static_cast<Eigen::Index>(i)) = s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hyperparameter fitting

struct HyperFit {
  KernelHyp hyp;
  double log_marginal = -std::numeric_limits<double>::infinity();
  bool degenerate = false; ///< amplitude ended on its floor
  bool converged = true;   ///< false when no start converged; best-so-far returned
};

inline constexpr double kAmplitudeFloor = 1e-6;

/// log N(y | 0, K + noise_var I)
inline double gp_log_marginal(const TimeGrid &grid, const Vector &y, const KernelHyp &hyp, double noise_var) {
  Matrix k = cov_matrix(grid, hyp, default_jitter(hyp) + noise_var);
  Eigen::LLT<Matrix> llt(k);
  if (llt.info() != Eigen::Success)
    return -std::numeric_limits<double>::infinity();
  const Vector alpha = llt.solve(y);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * y.dot(alpha) - 0.5 * logdet -
         0.5 * static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi);
}

namespace detail {

struct HyperObjective {
  const TimeGrid *grid;
  const Vector *y;
  double noise_var;
  double log_amp_lo, log_amp_hi, log_len_lo, log_len_hi;

  // Box constraints by clamping plus a quadratic penalty on the excursion.
  KernelHyp clamp(double la, double ll, double &penalty) const {
    const double ca = std::clamp(la, log_amp_lo, log_amp_hi);
    const double cl = std::clamp(ll, log_len_lo, log_len_hi);
    penalty = (la - ca) * (la - ca) + (ll - cl) * (ll - cl);
    return KernelHyp{std::exp(ca), std::exp(cl)};
  }

  static double eval(const gsl_vector *v, void *params) {
    const auto *self = static_cast<const HyperObjective *>(params);
    double penalty = 0.0;
    const KernelHyp h = self->clamp(gsl_vector_get(v, 0), gsl_vector_get(v, 1), penalty);
    const double lm = gp_log_marginal(*self->grid, *self->y, h, self->noise_var);
    if (!std::isfinite(lm))
      return 1e300;
    return -lm + 1e3 * penalty;
  }
};

} // namespace detail

/// Maximizes the GP log marginal likelihood over (amplitude, lengthscale)
/// with Nelder-Mead from several deterministic and seeded starts.
inline HyperFit fit_hyperparams(const TimeGrid &grid, const Vector &y, double noise_var,
                                std::uint64_t seed = 0) {
  const auto n = grid.size();
  if (n < 3)
    throw std::invalid_argument("fit_hyperparams: need at least 3 observations");
  if (static_cast<std::size_t>(y.size()) != n)
    throw std::invalid_argument("fit_hyperparams: data length mismatch");
  if (noise_var < 0.0)
    throw std::invalid_argument("fit_hyperparams: noise_var must be nonnegative");

  const double range = grid.back() - grid.front();
  const double var_y = std::max(y.squaredNorm() / static_cast<double>(n), kAmplitudeFloor);
  detail::HyperObjective obj{&grid,
                             &y,
                             noise_var,
                             std::log(kAmplitudeFloor),
                             std::log(std::max(1e4 * var_y, 1.0)),
                             std::log(0.25 * grid.min_spacing()),
                             std::log(10.0 * range)};

  std::vector<std::pair<double, double>> starts;
  for (double frac : {0.1, 0.3, 1.0})
    starts.emplace_back(std::log(var_y), std::log(frac * range));
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 2; ++i)
    starts.emplace_back(std::log(var_y) + 2.0 * (u(rng) - 0.5),
                        obj.log_len_lo + u(rng) * (obj.log_len_hi - obj.log_len_lo));

  gsl_error_handler_t *old_handler = gsl_set_error_handler_off();
  gsl_multimin_function fn{&detail::HyperObjective::eval, 2, &obj};
  const gsl_multimin_fminimizer_type *type = gsl_multimin_fminimizer_nmsimplex2;

  HyperFit best;
  best.converged = false;
  double best_val = std::numeric_limits<double>::infinity();
  bool any_converged = false;
  for (const auto &[la, ll] : starts) {
    gsl_multimin_fminimizer *solver = gsl_multimin_fminimizer_alloc(type, 2);
    gsl_vector *x = gsl_vector_alloc(2);
    gsl_vector *step = gsl_vector_alloc(2);
    gsl_vector_set(x, 0, la);
    gsl_vector_set(x, 1, ll);
    gsl_vector_set_all(step, 0.5);
    gsl_multimin_fminimizer_set(solver, &fn, x, step);
    int status = GSL_CONTINUE;
    for (int iter = 0; iter < 400 && status == GSL_CONTINUE; ++iter) {
      if (gsl_multimin_fminimizer_iterate(solver) != GSL_SUCCESS)
        break;
      status = gsl_multimin_test_size(gsl_multimin_fminimizer_size(solver), 1e-6);
    }
    const double val = solver->fval;
    if (status == GSL_SUCCESS)
      any_converged = true;
    if (val < best_val) {
      best_val = val;
      double penalty = 0.0;
      best.hyp = obj.clamp(gsl_vector_get(solver->x, 0), gsl_vector_get(solver->x, 1), penalty);
    }
    gsl_vector_free(step);
    gsl_vector_free(x);
    gsl_multimin_fminimizer_free(solver);
  }
  gsl_set_error_handler(old_handler);

  best.converged = any_converged;
  best.log_marginal = gp_log_marginal(grid, y, best.hyp, noise_var);
  best.degenerate = best.hyp.amplitude_sq <= kAmplitudeFloor * 1.01;
  return best;
}

} // namespace mlfm

#endif // MLFM_GP_CORE_HPP
