#ifndef MLFM_IO_HPP
#define MLFM_IO_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlfm/experiments.hpp"
#include "mlfm/infer_ag.hpp"
#include "mlfm/infer_mixsa.hpp"
#include "mlfm/model.hpp"

namespace mlfm {

using Json = nlohmann::json;

inline constexpr const char *kVersion = "0.1.0";

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- JSON output

namespace detail {

inline void write_json_value(std::ostream &os, const Json &j, int indent, int depth) {
  const auto pad = [&](int d) {
    if (indent > 0)
      os << '\n' << std::string(static_cast<std::size_t>(indent * d), ' ');
  };
  switch (j.type()) {
  case Json::value_t::object: {
    if (j.empty()) {
      os << "{}";
      return;
    }
    os << '{';
    bool first = true;
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!first)
        os << ',';
      first = false;
      pad(depth + 1);
      os << Json(it.key()).dump() << (indent > 0 ? ": " : ":");
      write_json_value(os, it.value(), indent, depth + 1);
    }
    pad(depth);
    os << '}';
    return;
  }
  case Json::value_t::array: {
    if (j.empty()) {
      os << "[]";
      return;
    }
    // numeric rows stay on one line
    const bool flat = std::all_of(j.begin(), j.end(), [](const Json &e) { return e.is_primitive(); });
    os << '[';
    for (std::size_t i = 0; i < j.size(); ++i) {
      if (i)
        os << (flat ? ", " : ",");
      if (!flat)
        pad(depth + 1);
      write_json_value(os, j[i], indent, depth + 1);
    }
    if (!flat)
      pad(depth);
    os << ']';
    return;
  }
  case Json::value_t::number_float: {
    const double v = j.get<double>();
    if (std::isfinite(v))
      os << fmt17(v);
    else
      os << "null";
    return;
  }
  default:
    os << j.dump();
  }
}

} // namespace detail

/// Like Json::dump but with every floating-point value at 17 significant digits.
inline void write_json(std::ostream &os, const Json &j, int indent = 2) {
  detail::write_json_value(os, j, indent, 0);
  os << '\n';
}

// ---------------------------------------------------------------- matrices

/// Row-major nested arrays.
inline Json matrix_to_json(const Matrix &m) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      row.push_back(m(i, j));
    out.push_back(std::move(row));
  }
  return out;
}

inline Json vector_to_json(const Vector &v) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i)
    out.push_back(v(i));
  return out;
}

inline Matrix matrix_from_json(const Json &j, const std::string &what) {
  if (!j.is_array() || j.empty())
    throw ConfigError(what + ": expected a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Json &row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ConfigError(what + ": ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) {
      if (!row[static_cast<std::size_t>(c)].is_number())
        throw ConfigError(what + ": non-numeric entry");
      m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

inline Vector vector_from_json(const Json &j, const std::string &what) {
  if (!j.is_array())
    throw ConfigError(what + ": expected an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number())
      throw ConfigError(what + ": non-numeric entry");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

// ---------------------------------------------------------------- model spec

inline Json kernel_to_json(const KernelHyp &h) { return Json{{"amplitude_sq", h.amplitude_sq}, {"lengthscale", h.lengthscale}}; }

inline KernelHyp kernel_from_json(const Json &j) {
  if (!j.is_object() || !j.contains("amplitude_sq") || !j.contains("lengthscale"))
    throw ConfigError("kernel: expected {amplitude_sq, lengthscale}");
  KernelHyp h{j.at("amplitude_sq").get<double>(), j.at("lengthscale").get<double>()};
  h.validate();
  return h;
}

struct ModelFile {
  ModelSpec spec;
  bool beta_given = false; ///< false when beta was absent and set to zero
};

/// Keys: basis (preset name or list of row-major matrices), n_forces,
/// beta (optional), force_kernels (optional, default unit RBF per force),
/// beta_prior_var (optional).
inline ModelFile model_from_json(const Json &j) {
  if (!j.is_object())
    throw ConfigError("model: expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "basis" && it.key() != "n_forces" && it.key() != "beta" && it.key() != "force_kernels" &&
        it.key() != "beta_prior_var")
      throw ConfigError("model: unknown key '" + it.key() + "'");
  if (!j.contains("basis"))
    throw ConfigError("model: 'basis' is required");

  ModelFile out;
  const Json &b = j.at("basis");
  try {
    if (b.is_string()) {
      out.spec.basis = preset_basis(b.get<std::string>());
    } else if (b.is_array()) {
      std::vector<Matrix> mats;
      for (std::size_t d = 0; d < b.size(); ++d)
        mats.push_back(matrix_from_json(b[d], "model.basis[" + std::to_string(d) + "]"));
      out.spec.basis = BasisSet(std::move(mats));
    } else {
      throw ConfigError("model: 'basis' must be a preset name or a list of matrices");
    }
  } catch (const std::invalid_argument &e) {
    throw ConfigError(e.what());
  }

  if (j.contains("force_kernels")) {
    for (const auto &k : j.at("force_kernels"))
      out.spec.force_kernels.push_back(kernel_from_json(k));
    if (j.contains("n_forces") && j.at("n_forces").get<long>() != static_cast<long>(out.spec.force_kernels.size()))
      throw ConfigError("model: n_forces disagrees with force_kernels");
  } else {
    if (!j.contains("n_forces"))
      throw ConfigError("model: 'n_forces' or 'force_kernels' is required");
    const long r = j.at("n_forces").get<long>();
    if (r < 0)
      throw ConfigError("model: n_forces must be nonnegative");
    out.spec.force_kernels.assign(static_cast<std::size_t>(r), KernelHyp{1.0, 1.0});
  }
  if (j.contains("beta_prior_var"))
    out.spec.beta_prior_var = j.at("beta_prior_var").get<double>();

  if (j.contains("beta")) {
    out.spec.beta = matrix_from_json(j.at("beta"), "model.beta");
    out.beta_given = true;
  } else {
    out.spec.beta = Matrix::Zero(out.spec.n_forces() + 1, out.spec.n_basis());
  }
  try {
    out.spec.validate();
  } catch (const std::invalid_argument &e) {
    throw ConfigError(e.what());
  }
  return out;
}

inline Json model_to_json(const ModelSpec &spec) {
  Json basis = Json::array();
  for (const auto &l : spec.basis.matrices())
    basis.push_back(matrix_to_json(l));
  Json kernels = Json::array();
  for (const auto &k : spec.force_kernels)
    kernels.push_back(kernel_to_json(k));
  return Json{{"basis", basis},
              {"n_forces", spec.n_forces()},
              {"beta", matrix_to_json(spec.beta)},
              {"force_kernels", kernels},
              {"beta_prior_var", spec.beta_prior_var}};
}

// ---------------------------------------------------------------- experiment config

inline Json experiment_to_json(const ExperimentConfig &c) {
  return Json{{"experiment", c.experiment},
              {"dts", c.dts},
              {"t0", c.t0},
              {"t1", c.t1},
              {"n_reps", c.n_reps},
              {"base_seed", c.base_seed},
              {"noise_sd", c.noise_sd},
              {"force_kernel", kernel_to_json(c.force_kernel)},
              {"fine_factor", c.fine_factor},
              {"beta_prior_var", c.beta_prior_var},
              {"gamma", c.gamma},
              {"ag_max_iter", c.ag_max_iter},
              {"ag_tol", c.ag_tol},
              {"mixtures", c.mixtures},
              {"kubo_order", c.kubo_order},
              {"orders", c.orders},
              {"so3_mixtures", c.so3_mixtures},
              {"mixsa_max_iter", c.mixsa_max_iter},
              {"mixsa_tol", c.mixsa_tol},
              {"mixsa_inner_iter", c.mixsa_inner_iter},
              {"mixsa_substeps", c.mixsa_substeps},
              {"mixsa_restarts", c.mixsa_restarts},
              {"mixsa_known_noise", c.mixsa_known_noise},
              {"threads", c.threads}};
}

/// Overrides the fields of `base` present in `j`; unknown keys are rejected.
inline ExperimentConfig experiment_from_json(const Json &j, ExperimentConfig base = {}) {
  if (!j.is_object())
    throw ConfigError("experiment config: expected an object");
  ExperimentConfig &c = base;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string &k = it.key();
      const Json &v = it.value();
      if (k == "experiment") c.experiment = v.get<std::string>();
      else if (k == "dts") c.dts = v.get<std::vector<double>>();
      else if (k == "t0") c.t0 = v.get<double>();
      else if (k == "t1") c.t1 = v.get<double>();
      else if (k == "n_reps") c.n_reps = v.get<int>();
      else if (k == "base_seed") c.base_seed = v.get<std::uint64_t>();
      else if (k == "noise_sd") c.noise_sd = v.get<double>();
      else if (k == "force_kernel") c.force_kernel = kernel_from_json(v);
      else if (k == "fine_factor") c.fine_factor = v.get<double>();
      else if (k == "beta_prior_var") c.beta_prior_var = v.get<double>();
      else if (k == "gamma") c.gamma = v.get<double>();
      else if (k == "ag_max_iter") c.ag_max_iter = v.get<int>();
      else if (k == "ag_tol") c.ag_tol = v.get<double>();
      else if (k == "mixtures") c.mixtures = v.get<std::vector<int>>();
      else if (k == "kubo_order") c.kubo_order = v.get<int>();
      else if (k == "orders") c.orders = v.get<std::vector<int>>();
      else if (k == "so3_mixtures") c.so3_mixtures = v.get<int>();
      else if (k == "mixsa_max_iter") c.mixsa_max_iter = v.get<int>();
      else if (k == "mixsa_tol") c.mixsa_tol = v.get<double>();
      else if (k == "mixsa_inner_iter") c.mixsa_inner_iter = v.get<int>();
      else if (k == "mixsa_substeps") c.mixsa_substeps = v.get<int>();
      else if (k == "mixsa_restarts") c.mixsa_restarts = v.get<int>();
      else if (k == "mixsa_known_noise") c.mixsa_known_noise = v.get<bool>();
      else if (k == "threads") c.threads = v.get<int>();
      else throw ConfigError("experiment config: unknown key '" + k + "'");
    }
  } catch (const Json::exception &e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  try {
    c.validate();
  } catch (const std::invalid_argument &e) {
    throw ConfigError(e.what());
  }
  return c;
}

// ---------------------------------------------------------------- trajectories

/// Time series on a grid: states N x K, forces N x R (either may have zero columns).
struct Trajectory {
  Vector t;
  Matrix x;
  Matrix g;
};

/// Header `t,x_1..x_K,g_1..g_R`.
inline void write_trajectory_csv(std::ostream &os, const Trajectory &tr) {
  const Eigen::Index n = tr.t.size();
  if (tr.x.rows() != n || (tr.g.cols() > 0 && tr.g.rows() != n))
    throw std::invalid_argument("write_trajectory_csv: row counts differ");
  os << 't';
  for (Eigen::Index k = 0; k < tr.x.cols(); ++k)
    os << ",x_" << k + 1;
  for (Eigen::Index r = 0; r < tr.g.cols(); ++r)
    os << ",g_" << r + 1;
  os << '\n';
  for (Eigen::Index i = 0; i < n; ++i) {
    os << detail::fmt17(tr.t(i));
    for (Eigen::Index k = 0; k < tr.x.cols(); ++k)
      os << ',' << detail::fmt17(tr.x(i, k));
    for (Eigen::Index r = 0; r < tr.g.cols(); ++r)
      os << ',' << detail::fmt17(tr.g(i, r));
    os << '\n';
  }
}

inline Trajectory read_trajectory_csv(std::istream &is) {
  std::string line;
  if (!std::getline(is, line))
    throw ConfigError("trajectory: empty input");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ','))
      header.push_back(cell);
  }
  if (header.empty() || header[0] != "t")
    throw ConfigError("trajectory: first column must be 't'");
  Eigen::Index k = 0, r = 0;
  for (std::size_t c = 1; c < header.size(); ++c) {
    const std::string &h = header[c];
    if (h == "x_" + std::to_string(k + 1) && r == 0)
      ++k;
    else if (h == "g_" + std::to_string(r + 1))
      ++r;
    else
      throw ConfigError("trajectory: unexpected column '" + h + "'");
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty())
      continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception &) {
        throw ConfigError("trajectory: bad number '" + cell + "'");
      }
    }
    if (row.size() != header.size())
      throw ConfigError("trajectory: row has wrong number of fields");
    rows.push_back(std::move(row));
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  Trajectory tr{Vector(n), Matrix(n, k), Matrix(n, r)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto &row = rows[static_cast<std::size_t>(i)];
    tr.t(i) = row[0];
    for (Eigen::Index c = 0; c < k; ++c)
      tr.x(i, c) = row[static_cast<std::size_t>(1 + c)];
    for (Eigen::Index c = 0; c < r; ++c)
      tr.g(i, c) = row[static_cast<std::size_t>(1 + k + c)];
  }
  return tr;
}

// ---------------------------------------------------------------- fit configs

inline Json ag_config_to_json(const AGConfig &c) {
  Json hyp = Json::array();
  for (const auto &h : c.state_hyp)
    hyp.push_back(kernel_to_json(h));
  return Json{{"gamma", c.gamma},        {"state_hyp", hyp},         {"obs_noise_var", c.obs_noise_var},
              {"max_iter", c.max_iter},  {"tol", c.tol},             {"update_x", c.update_x},
              {"update_g", c.update_g},  {"update_beta", c.update_beta}};
}

/// Applies the AG keys of a fit config (gamma may be a scalar or one value
/// per state dimension).
inline void apply_ag_config(const Json &j, AGConfig &c) {
  try {
    if (j.contains("gamma")) {
      const Json &g = j.at("gamma");
      if (g.is_number())
        std::fill(c.gamma.begin(), c.gamma.end(), g.get<double>());
      else
        c.gamma = g.get<std::vector<double>>();
    }
    if (j.contains("state_hyp")) {
      c.state_hyp.clear();
      for (const auto &h : j.at("state_hyp"))
        c.state_hyp.push_back(kernel_from_json(h));
    }
    if (j.contains("max_iter")) c.max_iter = j.at("max_iter").get<int>();
    if (j.contains("tol")) c.tol = j.at("tol").get<double>();
    if (j.contains("update_x")) c.update_x = j.at("update_x").get<bool>();
    if (j.contains("update_g")) c.update_g = j.at("update_g").get<bool>();
    if (j.contains("update_beta")) c.update_beta = j.at("update_beta").get<bool>();
  } catch (const Json::exception &e) {
    throw ConfigError(std::string("fit-ag config: ") + e.what());
  }
}

inline Json mixsa_config_to_json(const MixSAConfig &c) {
  Json mu = Json::array();
  for (const auto &m : c.mu)
    mu.push_back(vector_to_json(m));
  std::vector<long> anchors(c.anchors.begin(), c.anchors.end());
  return Json{{"order", c.order},
              {"anchors", anchors},
              {"weights_pi", vector_to_json(c.weights_pi)},
              {"alpha", c.alpha},
              {"mu", mu},
              {"update_pi", c.update_pi},
              {"update_alpha", c.update_alpha},
              {"update_g", c.update_g},
              {"update_beta", c.update_beta},
              {"update_mu", c.update_mu},
              {"max_iter", c.max_iter},
              {"tol", c.tol},
              {"inner_iter", c.inner_iter},
              {"alpha_max", c.alpha_max},
              {"substeps", c.substeps},
              {"restarts", c.restarts},
              {"screen_cycles", c.screen_cycles}};
}

/// Builds a MixSA config from a fit config: `anchors` (0-based grid indices)
/// or `n_mixtures` (equally spaced), plus optional overrides.
inline MixSAConfig mixsa_config_from_json(const Json &j, const Observations &obs) {
  try {
    std::vector<Eigen::Index> anchors;
    if (j.contains("anchors")) {
      for (const auto &a : j.at("anchors"))
        anchors.push_back(a.get<Eigen::Index>());
    } else {
      anchors = equally_spaced_anchors(obs.grid, j.value("n_mixtures", Eigen::Index{1}));
    }
    for (auto a : anchors)
      if (a < 0 || a >= static_cast<Eigen::Index>(obs.grid.size()))
        throw ConfigError("fit-mixsa config: anchor outside the grid");
    MixSAConfig c = make_mixsa_config(obs, std::move(anchors), j.value("order", 5));
    if (j.contains("weights_pi")) c.weights_pi = vector_from_json(j.at("weights_pi"), "weights_pi");
    if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
    if (j.contains("mu")) {
      c.mu.clear();
      for (const auto &m : j.at("mu"))
        c.mu.push_back(vector_from_json(m, "mu"));
    }
    if (j.contains("update_pi")) c.update_pi = j.at("update_pi").get<bool>();
    if (j.contains("update_alpha")) c.update_alpha = j.at("update_alpha").get<bool>();
    if (j.contains("update_g")) c.update_g = j.at("update_g").get<bool>();
    if (j.contains("update_beta")) c.update_beta = j.at("update_beta").get<bool>();
    if (j.contains("update_mu")) c.update_mu = j.at("update_mu").get<bool>();
    if (j.contains("max_iter")) c.max_iter = j.at("max_iter").get<int>();
    if (j.contains("tol")) c.tol = j.at("tol").get<double>();
    if (j.contains("inner_iter")) c.inner_iter = j.at("inner_iter").get<int>();
    if (j.contains("alpha_max")) c.alpha_max = j.at("alpha_max").get<double>();
    if (j.contains("substeps")) c.substeps = j.at("substeps").get<int>();
    if (j.contains("restarts")) c.restarts = j.at("restarts").get<int>();
    if (j.contains("screen_cycles")) c.screen_cycles = j.at("screen_cycles").get<int>();
    c.validate(static_cast<Eigen::Index>(obs.grid.size()), obs.values.cols());
    return c;
  } catch (const Json::exception &e) {
    throw ConfigError(std::string("fit-mixsa config: ") + e.what());
  } catch (const std::invalid_argument &e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------- fit results

inline Json ag_fit_to_json(const AGFit &fit, const AGConfig &cfg, const TimeGrid &grid, std::uint64_t seed) {
  return Json{{"method", "AG"},
              {"seed", seed},
              {"times", grid.times()},
              {"X", matrix_to_json(fit.state.X)},
              {"g", matrix_to_json(fit.state.g)},
              {"beta", matrix_to_json(fit.state.beta)},
              {"trace", fit.trace},
              {"iterations", fit.iterations},
              {"converged", fit.converged},
              {"diverged", fit.diverged},
              {"config", ag_config_to_json(cfg)}};
}

inline Json mixsa_fit_to_json(const MixSAFit &fit, const TimeGrid &grid, std::uint64_t seed) {
  Json mu = Json::array();
  for (const auto &m : fit.cfg.mu)
    mu.push_back(vector_to_json(m));
  return Json{{"method", "MixSA"},
              {"seed", seed},
              {"times", grid.times()},
              {"g", matrix_to_json(fit.g)},
              {"beta", matrix_to_json(fit.beta)},
              {"mu", mu},
              {"pi", vector_to_json(fit.cfg.weights_pi)},
              {"alpha", fit.cfg.alpha},
              {"responsibilities", matrix_to_json(fit.resp)},
              {"trace", fit.trace},
              {"iterations", fit.iterations},
              {"converged", fit.converged},
              {"config", mixsa_config_to_json(fit.cfg)}};
}

} // namespace mlfm

#endif // MLFM_IO_HPP
