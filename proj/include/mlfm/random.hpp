#ifndef MLFM_RANDOM_HPP
#define MLFM_RANDOM_HPP

#include <cstdint>
#include <random>

#include <Eigen/Core>

namespace mlfm {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent per-replication seeds.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Eigen::VectorXd standard_normal(Rng &rng, Eigen::Index n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i)
    z(i) = dist(rng);
  return z;
}

/// Uniform draw on the unit sphere S^{n-1}.
inline Eigen::VectorXd uniform_sphere(Rng &rng, Eigen::Index n) {
  Eigen::VectorXd z = standard_normal(rng, n);
  double norm = z.norm();
  while (norm == 0.0) {
    z = standard_normal(rng, n);
    norm = z.norm();
  }
  return z / norm;
}

} // namespace mlfm

#endif // MLFM_RANDOM_HPP
