#ifndef MLFM_MODEL_HPP
#define MLFM_MODEL_HPP

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/QR>

#include "mlfm/gp_core.hpp"

namespace mlfm {

/// D linearly independent K x K basis matrices.
class BasisSet {
public:
  BasisSet() = default;

  explicit BasisSet(std::vector<Matrix> matrices) : matrices_(std::move(matrices)) {
    if (matrices_.empty())
      throw std::invalid_argument("BasisSet: at least one basis matrix required");
    const Eigen::Index k = matrices_.front().rows();
    if (k == 0)
      throw std::invalid_argument("BasisSet: empty matrices");
    Matrix stacked(k * k, static_cast<Eigen::Index>(matrices_.size()));
    for (std::size_t d = 0; d < matrices_.size(); ++d) {
      const Matrix &l = matrices_[d];
      if (l.rows() != k || l.cols() != k)
        throw std::invalid_argument("BasisSet: all matrices must be K x K");
      if (!l.allFinite())
        throw std::invalid_argument("BasisSet: non-finite entry");
      stacked.col(static_cast<Eigen::Index>(d)) = l.reshaped();
    }
    Eigen::ColPivHouseholderQR<Matrix> qr(stacked);
    qr.setThreshold(1e-10);
    if (qr.rank() != stacked.cols())
      throw std::invalid_argument("BasisSet: basis matrices are linearly dependent");
  }

  Eigen::Index dim_state() const { return matrices_.front().rows(); }
  Eigen::Index n_basis() const { return static_cast<Eigen::Index>(matrices_.size()); }
  const Matrix &operator[](Eigen::Index d) const { return matrices_[static_cast<std::size_t>(d)]; }
  const std::vector<Matrix> &matrices() const { return matrices_; }

private:
  std::vector<Matrix> matrices_;
};

/// so2: the real form of dz/dt = -i g z.  so3: generators with
/// [L1, L2] = L3 and cyclic permutations.
inline BasisSet preset_basis(std::string_view name) {
  if (name == "so2") {
    Matrix l(2, 2);
    l << 0.0, 1.0, -1.0, 0.0;
    return BasisSet({l});
  }
  if (name == "so3") {
    Matrix l1 = Matrix::Zero(3, 3), l2 = Matrix::Zero(3, 3), l3 = Matrix::Zero(3, 3);
    l1(1, 2) = -1.0;
    l1(2, 1) = 1.0;
    l2(0, 2) = 1.0;
    l2(2, 0) = -1.0;
    l3(0, 1) = -1.0;
    l3(1, 0) = 1.0;
    return BasisSet({l1, l2, l3});
  }
  throw std::invalid_argument("preset_basis: unknown basis '" + std::string(name) + "'");
}

/// Block-diagonal lift I_copies (x) L_d, i.e. the same dynamics acting on
/// `copies` stacked columns (used for fundamental-solution data).
inline BasisSet lift_basis(const BasisSet &basis, Eigen::Index copies) {
  std::vector<Matrix> lifted;
  const Eigen::Index k = basis.dim_state();
  for (const Matrix &l : basis.matrices()) {
    Matrix big = Matrix::Zero(k * copies, k * copies);
    for (Eigen::Index c = 0; c < copies; ++c)
      big.block(c * k, c * k, k, k) = l;
    lifted.push_back(std::move(big));
  }
  return BasisSet(std::move(lifted));
}

/// The multiplicative latent force model dx/dt = A(t) x with
/// A(t) = A_0 + sum_r g_r(t) A_r and A_r = sum_d beta(r, d) L_d.
struct ModelSpec {
  BasisSet basis;
  Matrix beta;                          ///< (R+1) x D; row 0 gives the constant offset A_0
  std::vector<KernelHyp> force_kernels; ///< one per latent force
  double beta_prior_var = 1.0;

  Eigen::Index n_forces() const { return static_cast<Eigen::Index>(force_kernels.size()); }
  Eigen::Index dim_state() const { return basis.dim_state(); }
  Eigen::Index n_basis() const { return basis.n_basis(); }

  void validate() const {
    if (beta.rows() != n_forces() + 1 || beta.cols() != n_basis())
      throw std::invalid_argument("ModelSpec: beta must be (R+1) x D");
    if (!beta.allFinite())
      throw std::invalid_argument("ModelSpec: beta has non-finite entries");
    for (const auto &k : force_kernels)
      k.validate();
    if (!(beta_prior_var > 0.0))
      throw std::invalid_argument("ModelSpec: beta_prior_var must be positive");
  }
};

/// A_r for r = 0..R under the given coefficients.
inline std::vector<Matrix> structure_matrices(const BasisSet &basis, const Matrix &beta) {
  if (beta.cols() != basis.n_basis())
    throw std::invalid_argument("structure_matrices: beta column count must equal n_basis");
  const Eigen::Index k = basis.dim_state();
  std::vector<Matrix> a(static_cast<std::size_t>(beta.rows()), Matrix::Zero(k, k));
  for (Eigen::Index r = 0; r < beta.rows(); ++r)
    for (Eigen::Index d = 0; d < basis.n_basis(); ++d)
      a[static_cast<std::size_t>(r)] += beta(r, d) * basis[d];
  return a;
}

inline std::vector<Matrix> structure_matrices(const ModelSpec &spec) {
  return structure_matrices(spec.basis, spec.beta);
}

/// A(t) = A_0 + sum_r g_r A_r from precomputed structure matrices.
inline Matrix coefficient_at(const std::vector<Matrix> &a, const Eigen::Ref<const Vector> &g) {
  if (static_cast<Eigen::Index>(a.size()) != g.size() + 1)
    throw std::invalid_argument("coefficient_at: expected R force values");
  Matrix out = a.front();
  for (Eigen::Index r = 0; r < g.size(); ++r)
    out += g(r) * a[static_cast<std::size_t>(r + 1)];
  return out;
}

inline Matrix coefficient_at(const ModelSpec &spec, const Eigen::Ref<const Vector> &g) {
  return coefficient_at(structure_matrices(spec), g);
}

} // namespace mlfm

#endif // MLFM_MODEL_HPP
