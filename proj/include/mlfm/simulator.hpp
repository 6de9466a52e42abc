#ifndef MLFM_SIMULATOR_HPP
#define MLFM_SIMULATOR_HPP

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "mlfm/gp_core.hpp"
#include "mlfm/model.hpp"
#include "mlfm/random.hpp"

namespace mlfm {

/// Latent force values sampled on a fine grid; linearly interpolated in between.
struct DensePath {
  TimeGrid fine_grid;
  Matrix forces; ///< R x N_fine

  void validate(Eigen::Index n_forces) const {
    if (forces.rows() != n_forces || forces.cols() != static_cast<Eigen::Index>(fine_grid.size()))
      throw std::invalid_argument("DensePath: forces must be R x N_fine");
  }
};

struct Observations {
  TimeGrid grid;
  Matrix values; ///< N x K
  double noise_sd = 0.0;
};

class SimulationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Subdivides every interval of `grid` into equal steps no longer than
/// `max_step`, so that every original node is also a fine node.
inline TimeGrid refine_grid(const TimeGrid &grid, double max_step) {
  if (!(max_step > 0.0))
    throw std::invalid_argument("refine_grid: max_step must be positive");
  std::vector<double> t{grid.front()};
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double a = grid[i - 1], b = grid[i];
    const auto m = static_cast<int>(std::ceil((b - a) / max_step - 1e-9));
    for (int j = 1; j < m; ++j)
      t.push_back(a + (b - a) * static_cast<double>(j) / m);
    t.push_back(b);
  }
  return TimeGrid(std::move(t));
}

/// Piecewise-linear interpolation of grid-valued forces (R x N) onto `fine`.
/// Times outside the grid are held at the boundary values.
inline Matrix interpolate_forces(const TimeGrid &grid, const Matrix &g, const TimeGrid &fine) {
  const auto n = static_cast<Eigen::Index>(grid.size());
  if (g.cols() != n)
    throw std::invalid_argument("interpolate_forces: forces must have one column per grid point");
  Matrix out(g.rows(), static_cast<Eigen::Index>(fine.size()));
  Eigen::Index seg = 0;
  for (std::size_t j = 0; j < fine.size(); ++j) {
    const double t = fine[j];
    const auto col = static_cast<Eigen::Index>(j);
    if (n == 1 || t <= grid.front()) {
      out.col(col) = g.col(0);
      continue;
    }
    if (t >= grid.back()) {
      out.col(col) = g.col(n - 1);
      continue;
    }
    while (seg + 1 < n - 1 && grid[static_cast<std::size_t>(seg + 1)] < t)
      ++seg;
    const double a = grid[static_cast<std::size_t>(seg)], b = grid[static_cast<std::size_t>(seg + 1)];
    const double w = (t - a) / (b - a);
    out.col(col) = (1.0 - w) * g.col(seg) + w * g.col(seg + 1);
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> locate_nodes(const TimeGrid &fine, const TimeGrid &out) {
  std::vector<std::size_t> idx;
  idx.reserve(out.size());
  std::size_t j = 0;
  const double tol = 1e-9 * std::max(1.0, std::abs(fine.back()) + std::abs(fine.front()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    while (j < fine.size() && fine[j] < out[i] - tol)
      ++j;
    if (j == fine.size() || std::abs(fine[j] - out[i]) > tol)
      throw std::invalid_argument("simulate: output time is not a node of the fine grid");
    idx.push_back(j);
  }
  return idx;
}

/// Classical RK4 on dX/dt = A(t) X over the fine grid; returns X at the
/// requested nodes.
inline std::vector<Matrix> integrate_linear(const ModelSpec &spec, const DensePath &path, const Matrix &x0,
                                            const TimeGrid &out_grid) {
  spec.validate();
  path.validate(spec.n_forces());
  if (x0.rows() != spec.dim_state())
    throw std::invalid_argument("simulate: initial condition has wrong dimension");
  const auto nodes = locate_nodes(path.fine_grid, out_grid);
  const auto a = structure_matrices(spec);

  std::vector<Matrix> out;
  out.reserve(out_grid.size());
  Matrix x = x0;
  std::size_t next = 0;
  for (std::size_t j = 0;; ++j) {
    while (next < nodes.size() && nodes[next] == j) {
      out.push_back(x);
      ++next;
    }
    if (next == nodes.size() || j + 1 == path.fine_grid.size())
      break;
    const double h = path.fine_grid[j + 1] - path.fine_grid[j];
    const auto c = static_cast<Eigen::Index>(j);
    const Vector g0 = path.forces.col(c);
    const Vector g1 = path.forces.col(c + 1);
    const Matrix a0 = coefficient_at(a, g0);
    const Matrix am = coefficient_at(a, Vector(0.5 * (g0 + g1)));
    const Matrix a1 = coefficient_at(a, g1);
    const Matrix k1 = a0 * x;
    const Matrix k2 = am * (x + 0.5 * h * k1);
    const Matrix k3 = am * (x + 0.5 * h * k2);
    const Matrix k4 = a1 * (x + h * k3);
    x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!x.allFinite()) {
      std::ostringstream msg;
      msg << "simulate: non-finite state at t=" << path.fine_grid[j + 1];
      throw SimulationError(msg.str());
    }
  }
  return out;
}

} // namespace detail

/// States at `out_grid` (N x K) of dx/dt = A(t) x started from x0 at the first
/// fine-grid node.
inline Matrix simulate_state(const ModelSpec &spec, const DensePath &path, const Vector &x0,
                             const TimeGrid &out_grid) {
  const auto xs = detail::integrate_linear(spec, path, x0, out_grid);
  Matrix out(static_cast<Eigen::Index>(xs.size()), spec.dim_state());
  for (std::size_t i = 0; i < xs.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = xs[i].col(0).transpose();
  return out;
}

/// Fundamental solution X(t) with X(t_0) = I at every output node.
inline std::vector<Matrix> simulate_fundamental(const ModelSpec &spec, const DensePath &path,
                                                const TimeGrid &out_grid) {
  const Eigen::Index k = spec.dim_state();
  return detail::integrate_linear(spec, path, Matrix::Identity(k, k), out_grid);
}

/// Adds i.i.d. N(0, noise_sd^2) noise to every entry.
inline Observations observe(const TimeGrid &grid, const Matrix &states, double noise_sd, std::uint64_t rng_seed) {
  if (noise_sd < 0.0)
    throw std::invalid_argument("observe: noise_sd must be nonnegative");
  if (states.rows() != static_cast<Eigen::Index>(grid.size()))
    throw std::invalid_argument("observe: one state row per grid point required");
  Observations obs{grid, states, noise_sd};
  if (noise_sd > 0.0) {
    Rng rng(rng_seed);
    std::normal_distribution<double> dist(0.0, noise_sd);
    for (Eigen::Index i = 0; i < obs.values.rows(); ++i)
      for (Eigen::Index j = 0; j < obs.values.cols(); ++j)
        obs.values(i, j) += dist(rng);
  }
  return obs;
}

/// Column-stacks a sequence of K x K matrices into an N x K^2 state matrix.
inline Matrix stack_fundamental(const std::vector<Matrix> &xs) {
  if (xs.empty())
    return Matrix();
  const Eigen::Index kk = xs.front().size();
  Matrix out(static_cast<Eigen::Index>(xs.size()), kk);
  for (std::size_t i = 0; i < xs.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = xs[i].reshaped().transpose();
  return out;
}

} // namespace mlfm

#endif // MLFM_SIMULATOR_HPP
