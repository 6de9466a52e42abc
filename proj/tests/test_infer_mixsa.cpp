#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "mlfm/infer_mixsa.hpp"
#include "oracles.hpp"

using namespace mlfm;

namespace {

ModelSpec kubo_spec() {
  ModelSpec spec;
  spec.basis = preset_basis("so2");
  spec.beta = Matrix(2, 1);
  spec.beta << 0.0, 1.0;
  spec.force_kernels = {KernelHyp{1.0, 1.0}};
  return spec;
}

ModelSpec random_spec(std::mt19937_64 &rng, Eigen::Index k, Eigen::Index r, Eigen::Index d) {
  std::vector<Matrix> mats;
  for (Eigen::Index i = 0; i < d; ++i)
    mats.push_back(0.5 * oracle::randn(rng, k, k));
  ModelSpec spec;
  spec.basis = BasisSet(mats);
  spec.beta = oracle::randn(rng, r + 1, d);
  spec.force_kernels.assign(static_cast<std::size_t>(r), KernelHyp{1.0, 1.0});
  return spec;
}

MixSAConfig random_config(std::mt19937_64 &rng, const Observations &obs, std::vector<Eigen::Index> anchors, int order) {
  MixSAConfig cfg = make_mixsa_config(obs, std::move(anchors), order);
  for (auto &m : cfg.mu)
    m = oracle::randn(rng, m.size());
  Vector w = oracle::randn(rng, cfg.n_mixtures()).cwiseAbs().array() + 0.1;
  cfg.weights_pi = w / w.sum();
  cfg.alpha = 3.0;
  return cfg;
}

Observations random_obs(std::mt19937_64 &rng, const TimeGrid &grid, Eigen::Index k) {
  return Observations{grid, oracle::randn(rng, static_cast<Eigen::Index>(grid.size()), k), 0.1};
}

} // namespace

TEST(TrapzWeights, HandExample) {
  const TimeGrid grid({0.0, 1.0, 3.0});
  const Matrix w = trapz_weights(grid, 1);
  Matrix expected(3, 3);
  expected << -0.5, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0;
  EXPECT_LT((w - expected).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW(trapz_weights(grid, 3), std::invalid_argument);
}

TEST(TrapzWeights, IntegratesLinearFunctionsExactly) {
  const TimeGrid grid({0.0, 0.3, 1.1, 1.5, 2.6, 3.0});
  const Vector t = grid.as_vector();
  const Vector f = (2.0 * t.array() - 1.0).matrix();
  for (Eigen::Index a = 0; a < 6; ++a) {
    const Vector integral = trapz_weights(grid, a) * f;
    for (Eigen::Index n = 0; n < 6; ++n) {
      const double exact = (t(n) * t(n) - t(n)) - (t(a) * t(a) - t(a));
      EXPECT_NEAR(integral(n), exact, 1e-13);
    }
  }
}

TEST(TrapzWeights, IdentityIntegrand) {
  const TimeGrid grid({0.0, 1.0, 2.0});
  const Vector t = grid.as_vector();
  EXPECT_DOUBLE_EQ((trapz_weights(grid, 0) * t)(2), 2.0);
}

TEST(EquallySpacedAnchors, SegmentCentres) {
  const TimeGrid grid = TimeGrid::uniform(0.0, 10.0, 1.0);
  EXPECT_EQ(equally_spaced_anchors(grid, 1), (std::vector<Eigen::Index>{5}));
  EXPECT_EQ(equally_spaced_anchors(grid, 2), (std::vector<Eigen::Index>{2, 7}));
  EXPECT_THROW(equally_spaced_anchors(grid, 0), std::invalid_argument);
}

TEST(DiscreteK, ZeroCoefficientsGiveZero) {
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.5);
  const Matrix k = discrete_K(Matrix::Ones(1, 5), Matrix::Zero(2, 1), trapz_weights(grid, 0), preset_basis("so2"));
  EXPECT_EQ(k.norm(), 0.0);
}

TEST(DiscreteK, MatchesLoopAssembly) {
  std::mt19937_64 rng(3);
  const ModelSpec spec = random_spec(rng, 3, 2, 2);
  const TimeGrid grid({0.0, 0.4, 1.0, 1.3});
  const Matrix g = oracle::randn(rng, 2, 4);
  const Matrix w = trapz_weights(grid, 2);
  const Matrix k = discrete_K(g, spec.beta, w, spec.basis);
  for (Eigen::Index n = 0; n < 4; ++n)
    for (Eigen::Index i = 0; i < 4; ++i) {
      Matrix a = Matrix::Zero(3, 3);
      for (Eigen::Index r = 0; r <= 2; ++r)
        for (Eigen::Index d = 0; d < 2; ++d)
          a += (r == 0 ? 1.0 : g(r - 1, i)) * spec.beta(r, d) * spec.basis[d];
      EXPECT_LT((k.block(n * 3, i * 3, 3, 3) - w(n, i) * a).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(PicardMean, EqualsBlockOperatorIteration) {
  std::mt19937_64 rng(4);
  const ModelSpec spec = random_spec(rng, 2, 1, 2);
  const TimeGrid grid({0.0, 0.2, 0.5, 0.9, 1.0});
  const Matrix g = oracle::randn(rng, 1, 5);
  const Matrix w = trapz_weights(grid, 1);
  const Vector mu = oracle::randn(rng, 2);
  const Matrix k = discrete_K(g, spec.beta, w, spec.basis);
  Vector z = mu.replicate(5, 1);
  for (int m = 0; m < 4; ++m)
    z = mu.replicate(5, 1) + k * z;
  const Matrix mean = picard_mean(1, 4, mu, g, spec.beta, w, spec.basis);
  EXPECT_LT((Vector(mean.transpose().reshaped()) - z).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(PicardMean, AnchorRowIsInitialCondition) {
  std::mt19937_64 rng(5);
  const ModelSpec spec = random_spec(rng, 3, 1, 3);
  const TimeGrid grid = TimeGrid::uniform(0.0, 3.0, 0.25);
  const Matrix g = oracle::randn(rng, 1, 13);
  const Vector mu = oracle::randn(rng, 3);
  for (Eigen::Index a : {0, 6, 12}) {
    const Matrix mean = picard_mean(a, 5, mu, g, spec.beta, trapz_weights(grid, a), spec.basis);
    EXPECT_LT((mean.row(a).transpose() - mu).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(PicardMean, ZeroCoefficientIsConstant) {
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.5);
  Vector mu(2);
  mu << 0.4, -1.1;
  const Matrix mean = picard_mean(2, 7, mu, Matrix::Constant(1, 5, 3.0), Matrix::Zero(2, 1), trapz_weights(grid, 2),
                                  preset_basis("so2"));
  for (Eigen::Index n = 0; n < 5; ++n)
    EXPECT_LT((mean.row(n).transpose() - mu).norm(), 1e-15);
}

TEST(PicardMean, ConstantCoefficientTruncatedSeries) {
  std::mt19937_64 rng(6);
  const ModelSpec spec = random_spec(rng, 3, 1, 2);
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.25);
  const double gc = 0.7;
  const Matrix g = Matrix::Constant(1, 9, gc);
  const Matrix a = coefficient_at(spec, Vector::Constant(1, gc));
  const Vector mu = oracle::randn(rng, 3);
  const Eigen::Index anchor = 3;
  const Matrix w = trapz_weights(grid, anchor);
  // up to two applications the integrands are at most linear in t, so the
  // trapezoid rule is exact
  for (int order : {1, 2}) {
    const Matrix mean = picard_mean(anchor, order, mu, g, spec.beta, w, spec.basis);
    for (Eigen::Index n = 0; n < 9; ++n) {
      const Vector ref = oracle::truncated_exp(a, grid[static_cast<std::size_t>(n)] - grid[anchor], order) * mu;
      EXPECT_LT((mean.row(n).transpose() - ref).cwiseAbs().maxCoeff(), 1e-13);
    }
  }
}

TEST(PicardMean, KuboConvergesToRotation) {
  const ModelSpec spec = kubo_spec();
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.01);
  const double omega = 1.0;
  const Matrix g = Matrix::Constant(1, static_cast<Eigen::Index>(grid.size()), omega);
  const Matrix mean = picard_mean(0, 20, Vector::Unit(2, 0), g, spec.beta, trapz_weights(grid, 0), spec.basis);
  for (std::size_t n = 0; n < grid.size(); ++n) {
    const auto i = static_cast<Eigen::Index>(n);
    EXPECT_NEAR(mean(i, 0), std::cos(omega * grid[n]), 1e-4);
    EXPECT_NEAR(mean(i, 1), -std::sin(omega * grid[n]), 1e-4);
  }
}

TEST(PicardMean, KuboOrderFiveNearAnchorStaysOnCircle) {
  const ModelSpec spec = kubo_spec();
  const TimeGrid grid = TimeGrid::uniform(0.0, 6.0, 0.01);
  const Eigen::Index anchor = 300;
  const Matrix g = Matrix::Constant(1, static_cast<Eigen::Index>(grid.size()), 1.0);
  const Matrix mean = picard_mean(anchor, 5, Vector::Unit(2, 1), g, spec.beta, trapz_weights(grid, anchor), spec.basis);
  for (std::size_t n = 0; n < grid.size(); ++n) {
    if (std::abs(grid[n] - grid[static_cast<std::size_t>(anchor)]) > 1.0 + 1e-12)
      continue;
    EXPECT_LT(std::abs(mean.row(static_cast<Eigen::Index>(n)).norm() - 1.0), 1e-3) << grid[n];
  }
}

TEST(PicardMean, PolynomialInForceOfDegreeOrder) {
  // scaling g by s and taking the (order + 1)-th finite difference in s gives 0
  std::mt19937_64 rng(7);
  ModelSpec spec = random_spec(rng, 2, 1, 2);
  spec.beta.row(0).setZero();
  const TimeGrid grid = TimeGrid::uniform(0.0, 1.0, 0.25);
  const Matrix g = oracle::randn(rng, 1, 5);
  const Matrix w = trapz_weights(grid, 2);
  const Vector mu = oracle::randn(rng, 2);
  const int order = 3;
  Matrix diff = Matrix::Zero(5, 2);
  double binom = 1.0;
  for (int j = 0; j <= order + 1; ++j) {
    if (j > 0)
      binom = binom * (order + 2 - j) / j;
    const double sign = (j % 2 == 0) ? 1.0 : -1.0;
    diff += sign * binom * picard_mean(2, order, mu, static_cast<double>(j) * g, spec.beta, w, spec.basis);
  }
  EXPECT_LT(diff.cwiseAbs().maxCoeff(), 1e-9);
}

TEST(SuccessiveApproximations, SubstepsImproveQuadrature) {
  std::mt19937_64 rng(8);
  const ModelSpec spec = random_spec(rng, 2, 1, 1);
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.5);
  const Observations obs = random_obs(rng, grid, 2);
  const double gc = 0.9;
  const Matrix g = Matrix::Constant(1, 5, gc);
  const Matrix a = coefficient_at(spec, Vector::Constant(1, gc));
  double prev = std::numeric_limits<double>::infinity(), ratio = 0.0;
  for (int s : {1, 2, 4, 8}) {
    MixSAConfig cfg = make_mixsa_config(obs, {0}, 4);
    cfg.substeps = s;
    const SuccessiveApproximations sa(grid, spec, cfg);
    const Matrix mean = sa.mean(0, g, spec.beta);
    double err = 0.0;
    for (Eigen::Index n = 0; n < 5; ++n) {
      const Vector ref = oracle::truncated_exp(a, grid[static_cast<std::size_t>(n)], 4) * cfg.mu[0];
      err = std::max(err, (mean.row(n).transpose() - ref).cwiseAbs().maxCoeff());
    }
    EXPECT_LT(err, prev);
    ratio = prev / err;
    prev = err;
  }
  // second-order quadrature
  EXPECT_GT(ratio, 3.5);
  EXPECT_LT(ratio, 4.5);
}

TEST(Densities, PointwiseMatchesGaussianOracle) {
  std::mt19937_64 rng(9);
  const ModelSpec spec = random_spec(rng, 2, 1, 2);
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.5);
  const Observations obs = random_obs(rng, grid, 2);
  const MixSAConfig cfg = random_config(rng, obs, {0, 2, 4}, 3);
  const Matrix g = oracle::randn(rng, 1, 5);
  const SuccessiveApproximations sa(grid, spec, cfg);
  const Matrix lp = sa.pointwise_log_density(obs, g, spec.beta);
  double mix = 0.0;
  for (Eigen::Index n = 0; n < 5; ++n) {
    double acc = 0.0;
    for (Eigen::Index v = 0; v < 3; ++v) {
      const Vector m = picard_mean(cfg.anchors[static_cast<std::size_t>(v)], 3, cfg.mu[static_cast<std::size_t>(v)], g,
                                   spec.beta, trapz_weights(grid, cfg.anchors[static_cast<std::size_t>(v)]), spec.basis)
                           .row(n)
                           .transpose();
      const double ref = oracle::gaussian_logpdf(obs.values.row(n).transpose(), m, Matrix::Identity(2, 2) / cfg.alpha);
      EXPECT_NEAR(lp(n, v), ref, 1e-12);
      acc += cfg.weights_pi(v) * std::exp(ref);
    }
    mix += std::log(acc);
  }
  EXPECT_NEAR(sa.mixture_log_lik(obs, g, spec.beta), mix, 1e-10);
  EXPECT_NEAR(local_log_density(obs, 1, spec, cfg, g, spec.beta), lp.col(1).sum(), 1e-12);
}

TEST(Densities, ResponsibilitiesNormalizedAndShiftInvariant) {
  std::mt19937_64 rng(10);
  const ModelSpec spec = random_spec(rng, 2, 1, 2);
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.5);
  const Observations obs = random_obs(rng, grid, 2);
  const MixSAConfig cfg = random_config(rng, obs, {0, 4}, 2);
  const SuccessiveApproximations sa(grid, spec, cfg);
  const Matrix lp = sa.pointwise_log_density(obs, oracle::randn(rng, 1, 5), spec.beta);
  const Matrix r = sa.responsibilities_from_pointwise(lp);
  EXPECT_LT((r.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-14);
  EXPECT_GE(r.minCoeff(), 0.0);
  Matrix shifted = lp;
  for (Eigen::Index n = 0; n < 5; ++n)
    shifted.row(n).array() += 1000.0 * static_cast<double>(n) - 700.0;
  EXPECT_LT((sa.responsibilities_from_pointwise(shifted) - r).cwiseAbs().maxCoeff(), 1e-12);
  // tiny densities stay finite
  const Matrix far = lp.array() - 1e4;
  EXPECT_TRUE(sa.responsibilities_from_pointwise(far).allFinite());
  EXPECT_TRUE(std::isfinite(sa.mixture_from_pointwise(far)));
}

TEST(Densities, ResponsibilityConcentratesOnFittingComponent) {
  const ModelSpec spec = kubo_spec();
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.5);
  const Matrix g = Matrix::Constant(1, 5, 0.5);
  Observations obs{grid, Matrix::Zero(5, 2), 0.1};
  MixSAConfig cfg = make_mixsa_config(obs, {0, 4}, 3);
  cfg.mu[0] = Vector::Unit(2, 0);
  cfg.mu[1] = Vector::Constant(2, 5.0);
  const SuccessiveApproximations sa(grid, spec, cfg);
  obs.values = sa.mean(0, g, spec.beta);
  const Matrix r = sa.responsibilities(obs, g, spec.beta);
  EXPECT_GT(r.col(0).minCoeff(), 1.0 - 1e-6);
}

TEST(PicardGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const ModelSpec spec = random_spec(rng, 2, 2, 2);
  const TimeGrid grid({0.0, 0.4, 0.7, 1.2, 1.5});
  const Observations obs = random_obs(rng, grid, 2);
  for (int s : {1, 3}) {
    MixSAConfig cfg = random_config(rng, obs, {1, 3}, 3);
    cfg.substeps = s;
    const SuccessiveApproximations sa(grid, spec, cfg);
    const Matrix g = oracle::randn(rng, 2, 5);
    const Vector weights = oracle::randn(rng, 5).cwiseAbs();
    for (Eigen::Index v = 0; v < 2; ++v) {
      const PicardGradient pg = sa.picard_gradient(obs, v, g, spec.beta, weights);
      auto value = [&](const Matrix &gg, const Matrix &bb) {
        return (weights.array() * sa.pointwise_log_density(obs, gg, bb).col(v).array()).sum();
      };
      EXPECT_NEAR(pg.value, value(g, spec.beta), 1e-12 * std::max(1.0, std::abs(pg.value)));
      auto fg = [&](const oracle::Vec &x) { return value(x.reshaped(5, 2).transpose(), spec.beta); };
      auto fb = [&](const oracle::Vec &x) { return value(g, x.reshaped(2, 3).transpose()); };
      const oracle::Vec ng = oracle::gradient(fg, g.transpose().reshaped(), 1e-6);
      const oracle::Vec nb = oracle::gradient(fb, spec.beta.transpose().reshaped(), 1e-6);
      EXPECT_LT(oracle::max_rel_error(pg.g, ng, 1e-3), 1e-5);
      EXPECT_LT(oracle::max_rel_error(pg.beta, nb, 1e-3), 1e-5);

      SuccessiveApproximations moved = sa;
      auto fm = [&](const oracle::Vec &x) {
        moved.config().mu[static_cast<std::size_t>(v)] = x;
        return (weights.array() * moved.pointwise_log_density(obs, g, spec.beta).col(v).array()).sum();
      };
      const oracle::Vec nm = oracle::gradient(fm, cfg.mu[static_cast<std::size_t>(v)], 1e-6);
      EXPECT_LT(oracle::max_rel_error(pg.mu, nm, 1e-3), 1e-5);
    }
  }
}

TEST(PicardGradient, ZeroCoefficientsMuGradient) {
  // with A = 0 the mean is mu everywhere and the mu gradient is alpha sum_n (y_n - mu)
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.5);
  std::mt19937_64 rng(12);
  const Observations obs = random_obs(rng, grid, 2);
  ModelSpec spec = kubo_spec();
  spec.beta.setZero();
  MixSAConfig cfg = random_config(rng, obs, {2}, 3);
  const PicardGradient pg = picard_gradient(obs, 0, spec, cfg, Matrix::Zero(1, 5), spec.beta);
  const Vector ref = cfg.alpha * (obs.values.colwise().sum().transpose() - 5.0 * cfg.mu[0]);
  EXPECT_LT((pg.mu - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PicardGradient, ReverseEqualsForward) {
  std::mt19937_64 rng(13);
  const ModelSpec spec = random_spec(rng, 3, 2, 3);
  const TimeGrid grid = TimeGrid::uniform(0.0, 3.0, 0.5);
  const Observations obs = random_obs(rng, grid, 3);
  for (int s : {1, 2, 5}) {
    MixSAConfig cfg = random_config(rng, obs, {0, 3, 6}, 4);
    cfg.substeps = s;
    const SuccessiveApproximations sa(grid, spec, cfg);
    const Matrix g = oracle::randn(rng, 2, 7);
    const Vector weights = oracle::randn(rng, 7).cwiseAbs();
    for (Eigen::Index v = 0; v < 3; ++v) {
      const PicardGradient f = sa.picard_gradient(obs, v, g, spec.beta, weights);
      const PicardGradient r = sa.picard_gradient_reverse(obs, v, g, spec.beta, weights);
      EXPECT_DOUBLE_EQ(f.value, r.value);
      EXPECT_LT(oracle::max_rel_error(f.g, r.g), 1e-10);
      EXPECT_LT(oracle::max_rel_error(f.beta, r.beta), 1e-10);
      EXPECT_LT(oracle::max_rel_error(f.mu, r.mu), 1e-10);
    }
  }
}

TEST(MixSAConfig, Validation) {
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.5);
  const Observations obs{grid, Matrix::Zero(5, 2), 0.1};
  MixSAConfig cfg = make_mixsa_config(obs, {0, 4}, 3);
  EXPECT_NO_THROW(cfg.validate(5, 2));
  EXPECT_THROW(cfg.validate(4, 2), std::invalid_argument);
  EXPECT_THROW(cfg.validate(5, 3), std::invalid_argument);
  MixSAConfig bad = cfg;
  bad.order = 0;
  EXPECT_THROW(bad.validate(5, 2), std::invalid_argument);
  bad = cfg;
  bad.weights_pi << 0.7, 0.7;
  EXPECT_THROW(bad.validate(5, 2), std::invalid_argument);
  bad = cfg;
  bad.alpha = 0.0;
  EXPECT_THROW(bad.validate(5, 2), std::invalid_argument);
}

TEST(MixsaEm, SingleComponentOrderOneIsRidgeRegression) {
  // one component, one Picard application, forces, mu and alpha fixed: the
  // mean is affine in beta and the M-step objective is a ridge problem
  const ModelSpec spec = kubo_spec();
  const TimeGrid grid = TimeGrid::uniform(0.0, 3.0, 0.5);
  std::mt19937_64 rng(14);
  const Observations obs = random_obs(rng, grid, 2);
  const Eigen::Index n = 7;
  const Matrix g = oracle::randn(rng, 1, n);
  MixSAConfig cfg = make_mixsa_config(obs, {3}, 1);
  cfg.alpha = 4.0;
  cfg.update_alpha = false;
  cfg.update_mu = false;
  cfg.update_g = false;
  cfg.max_iter = 500;
  cfg.inner_iter = 200;
  cfg.tol = 1e-15;

  const Matrix w = trapz_weights(grid, 3);
  const Vector lmu = spec.basis[0] * cfg.mu[0];
  Matrix j = Matrix::Zero(2 * n, 2);
  Vector target(2 * n);
  for (Eigen::Index row = 0; row < n; ++row) {
    for (Eigen::Index i = 0; i < n; ++i) {
      j.block(2 * row, 0, 2, 1) += w(row, i) * lmu;
      j.block(2 * row, 1, 2, 1) += w(row, i) * g(0, i) * lmu;
    }
    target.segment(2 * row, 2) = obs.values.row(row).transpose() - cfg.mu[0];
  }
  const oracle::Mat lhs = cfg.alpha * j.transpose() * j + oracle::Mat::Identity(2, 2) / spec.beta_prior_var;
  const oracle::Vec ridge = lhs.ldlt().solve(cfg.alpha * j.transpose() * target);

  const MixSAFit fit = mixsa_em(obs, spec, cfg, MixSAInit{g, Matrix::Zero(2, 1)});
  EXPECT_LT((Vector(fit.beta.reshaped()) - ridge).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_EQ(fit.g, g);
  EXPECT_EQ(fit.cfg.alpha, 4.0);
}

TEST(MixsaEm, ConstructedFixedPoint) {
  // data equal to the order-M mean of component 0; component 1 is far away
  const ModelSpec spec = kubo_spec();
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.25);
  const Eigen::Index n = 9;
  const Matrix g = Matrix::Constant(1, n, 0.8);
  Observations obs{grid, Matrix::Zero(n, 2), 0.0};
  MixSAConfig cfg = make_mixsa_config(obs, {4, 8}, 3);
  cfg.mu[0] = Vector::Unit(2, 0);
  cfg.mu[1] = Vector::Constant(2, 40.0);
  obs.values = SuccessiveApproximations(grid, spec, cfg).mean(0, g, spec.beta);
  cfg.alpha = 1e12;
  cfg.update_alpha = false;
  cfg.update_beta = false;
  cfg.max_iter = 20;
  const MixSAFit fit = mixsa_em(obs, spec, cfg, MixSAInit{g, spec.beta});
  const Matrix resid = obs.values - SuccessiveApproximations(grid, spec, fit.cfg).mean(0, fit.g, fit.beta);
  EXPECT_LT(resid.cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_GT(fit.resp.col(0).minCoeff(), 1.0 - 1e-6);
}

TEST(MixsaEm, TraceNonDecreasingAndDeterministic) {
  const ModelSpec spec = kubo_spec();
  const TimeGrid grid = TimeGrid::uniform(0.0, 6.0, 0.5);
  std::mt19937_64 rng(15);
  Observations obs{grid, Matrix(13, 2), 0.1};
  for (Eigen::Index n = 0; n < 13; ++n) {
    const double t = grid[static_cast<std::size_t>(n)];
    obs.values(n, 0) = std::cos(t) + 0.1 * oracle::randn(rng, 1)(0);
    obs.values(n, 1) = -std::sin(t) + 0.1 * oracle::randn(rng, 1)(0);
  }
  MixSAConfig cfg = make_mixsa_config(obs, equally_spaced_anchors(grid, 2), 3);
  cfg.max_iter = 40;
  cfg.restarts = 2;
  cfg.screen_cycles = 5;
  MixSAInit start{Matrix::Zero(1, 13), Matrix(2, 1)};
  start.beta << 0.1, 0.5;
  const MixSAFit a = mixsa_em(obs, spec, cfg, start, 9);
  const MixSAFit b = mixsa_em(obs, spec, cfg, start, 9);
  ASSERT_GE(a.trace.size(), 2u);
  for (std::size_t i = 1; i < a.trace.size(); ++i)
    EXPECT_GE(a.trace[i], a.trace[i - 1] - 1e-8);
  EXPECT_EQ(a.g, b.g);
  EXPECT_EQ(a.beta, b.beta);
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_LT((a.resp.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
  EXPECT_NEAR(a.cfg.weights_pi.sum(), 1.0, 1e-12);
}

TEST(MixsaEm, RejectsBadInitialShapes) {
  const ModelSpec spec = kubo_spec();
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.5);
  const Observations obs{grid, Matrix::Ones(5, 2), 0.1};
  const MixSAConfig cfg = make_mixsa_config(obs, {0}, 2);
  EXPECT_THROW(mixsa_em(obs, spec, cfg, MixSAInit{Matrix::Zero(1, 4), spec.beta}), std::invalid_argument);
  EXPECT_THROW(mixsa_em(obs, spec, cfg, MixSAInit{Matrix::Zero(1, 5), Matrix::Zero(1, 1)}), std::invalid_argument);
}
