#ifndef MLFM_TESTS_ORACLES_HPP
#define MLFM_TESTS_ORACLES_HPP

// Independent reference computations used by the tests. None of these call
// into the library beyond plain data types.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline double rbf(double t, double s, double amp, double len) {
  const double d = t - s;
  return amp * std::exp(-d * d / (2.0 * len * len));
}

inline double central_diff(const std::function<double(double)> &f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline Vec gradient(const std::function<double(const Vec &)> &f, const Vec &x, double h) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec p = x, m = x;
    p(i) += h;
    m(i) -= h;
    g(i) = (f(p) - f(m)) / (2.0 * h);
  }
  return g;
}

inline Mat hessian(const std::function<double(const Vec &)> &f, const Vec &x, double h) {
  const Eigen::Index n = x.size();
  Mat hs(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j) {
      auto at = [&](double si, double sj) {
        Vec y = x;
        y(i) += si;
        y(j) += sj;
        return f(y);
      };
      const double v = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
      hs(i, j) = hs(j, i) = v;
    }
  return hs;
}

/// Damped Newton ascent using only function values.
inline Vec maximize(const std::function<double(const Vec &)> &f, Vec x, int iters = 6, double h = 1e-3) {
  for (int it = 0; it < iters; ++it) {
    const Vec g = gradient(f, x, h);
    const Mat hs = hessian(f, x, h);
    const Vec step = hs.ldlt().solve(-g);
    double t = 1.0;
    const double f0 = f(x);
    while (t > 1e-8 && !(f(x + t * step) >= f0 - 1e-12))
      t *= 0.5;
    x += t * step;
    if (step.norm() * t < 1e-13)
      break;
  }
  return x;
}

/// Matrix exponential by scaling and squaring of a long Taylor series.
inline Mat expm(const Mat &a) {
  const double norm = a.cwiseAbs().rowwise().sum().maxCoeff();
  int s = 0;
  while (norm / std::pow(2.0, s) > 0.5)
    ++s;
  const Mat b = a / std::pow(2.0, s);
  Mat term = Mat::Identity(a.rows(), a.cols());
  Mat out = term;
  for (int m = 1; m <= 30; ++m) {
    term = term * b / static_cast<double>(m);
    out += term;
  }
  for (int i = 0; i < s; ++i)
    out = out * out;
  return out;
}

/// sum_{m=0}^{order} (tA)^m / m!
inline Mat truncated_exp(const Mat &a, double t, int order) {
  Mat term = Mat::Identity(a.rows(), a.cols());
  Mat out = term;
  for (int m = 1; m <= order; ++m) {
    term = term * (t * a) / static_cast<double>(m);
    out += term;
  }
  return out;
}

inline double gaussian_logpdf(const Vec &y, const Vec &mean, const Mat &cov) {
  const Eigen::Index n = y.size();
  Eigen::LLT<Mat> llt(cov);
  const Vec r = y - mean;
  const Vec z = llt.matrixL().solve(r);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    logdet += 2.0 * std::log(llt.matrixL()(i, i));
  return -0.5 * (z.squaredNorm() + logdet + static_cast<double>(n) * std::log(2.0 * M_PI));
}

inline Vec randn(std::mt19937_64 &rng, Eigen::Index n) {
  std::normal_distribution<double> d;
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i)
    v(i) = d(rng);
  return v;
}

inline Mat randn(std::mt19937_64 &rng, Eigen::Index r, Eigen::Index c) {
  return randn(rng, r * c).reshaped(r, c);
}

inline double min_eigenvalue(const Mat &m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
  return es.eigenvalues().minCoeff();
}

/// Relative deviation with an absolute floor for entries near zero.
inline double max_rel_error(const Vec &a, const Vec &b, double floor = 1e-8) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a(i) - b(i)) / std::max({std::abs(a(i)), std::abs(b(i)), floor}));
  return worst;
}

} // namespace oracle

#endif
