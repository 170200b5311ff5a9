#pragma once

// Model assembly: latent blocks with global indexing, observation blocks,
// and the hyperparameter layout with internal transforms.  A model is
// immutable once finalized; every inferential routine works off the triple
// (blocks, observations, hyper layout).
//
// Hyperparameter convention: all machinery sees the internal scale only.
// Precisions, range parameters, and psi are carried as logarithms;
// correlations in (-1,1) through the Fisher z transform atanh; scaling
// parameters such as alpha on the identity scale.  Priors are Gaussian on
// the internal scale.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rlgm/errors.hpp"
#include "rlgm/gmrf.hpp"
#include "rlgm/likelihood.hpp"
#include "rlgm/sparse.hpp"

namespace rlgm {

enum class BlockKind {
  iid,
  rw1,
  ar1,
  lattice_matern,
  kronecker_ar1_lattice,
  fixed_effect,
  mvn_dense
};

enum class Transform { log_scale, fisher_z, identity };

inline double to_natural(Transform t, double internal) {
  switch (t) {
    case Transform::log_scale: return std::exp(internal);
    case Transform::fisher_z: return std::tanh(internal);
    case Transform::identity: return internal;
  }
  return internal;
}

// d(internal)/d(natural): the Jacobian that maps internal-scale densities to
// the natural scale.
inline double transform_jacobian(Transform t, double natural) {
  switch (t) {
    case Transform::log_scale: return 1.0 / natural;
    case Transform::fisher_z: return 1.0 / (1.0 - natural * natural);
    case Transform::identity: return 1.0;
  }
  return 1.0;
}

struct HyperParam {
  std::string name;
  Transform transform = Transform::log_scale;
  double prior_mean = 0.0;  // internal scale
  double prior_sd = 1.0;    // internal scale
  std::optional<double> fixed;  // internal scale; set => not explored
};

struct HyperLayout {
  std::vector<HyperParam> params;

  int index_of(const std::string& name) const {
    for (int i = 0; i < static_cast<int>(params.size()); ++i)
      if (params[i].name == name) return i;
    return -1;
  }

  std::vector<int> free_indices() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(params.size()); ++i)
      if (!params[i].fixed) out.push_back(i);
    return out;
  }

  int free_dim() const { return static_cast<int>(free_indices().size()); }
};

struct LinearConstraintSpec {
  Eigen::VectorXd a;  // within-block coefficient vector
  double c = 0.0;
};

struct LatentBlockSpec {
  std::string name;
  BlockKind kind = BlockKind::iid;
  int n = 0;               // iid / rw1 / ar1 / fixed_effect / mvn_dense
  int nrow = 0, ncol = 0;  // lattice_matern and the spatial part of kronecker
  int n_time = 0;          // kronecker
  // role -> hyper name.  Roles by kind: iid/rw1/fixed_effect "log_tau";
  // ar1 adds "z_rho"; lattice_matern "log_tau","log_range"; kronecker
  // "log_tau","z_rho_t","log_range_s"; the two-source mvn_dense case
  // "log_tau1","log_tau2","z_rho".
  std::map<std::string, std::string> hyper;
  // role -> fixed internal-scale value, used when the role is not bound.
  std::map<std::string, double> fixed;
  std::vector<LinearConstraintSpec> constraints;
  Eigen::MatrixXd dense_precision;  // mvn_dense alternative: explicit precision
  Eigen::VectorXd prior_mean;       // empty = zero mean
  double intrinsic_jitter_rel = 1e-5;  // carrier jitter for rank-deficient kinds

  int size() const {
    switch (kind) {
      case BlockKind::lattice_matern: return nrow * ncol;
      case BlockKind::kronecker_ar1_lattice: return n_time * nrow * ncol;
      case BlockKind::mvn_dense:
        return dense_precision.rows() > 0 ? static_cast<int>(dense_precision.rows()) : n;
      default: return n;
    }
  }
};

struct ModelAssembly {
  std::vector<LatentBlockSpec> blocks;
  std::vector<ObservationBlock> obs;
  HyperLayout hypers;
  int latent_dim = 0;
  std::vector<int> offsets;  // per-block start index

  int block_offset(const std::string& name) const {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      if (blocks[i].name == name) return offsets[i];
    throw validation_error("block_offset: no block named " + name);
  }

  const LatentBlockSpec& block(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return b;
    throw validation_error("block: no block named " + name);
  }
};

namespace detail {

inline const std::vector<std::string>& roles_for(BlockKind kind, bool has_dense) {
  static const std::vector<std::string> iid_roles = {"log_tau"};
  static const std::vector<std::string> ar1_roles = {"log_tau", "z_rho"};
  static const std::vector<std::string> lattice_roles = {"log_tau", "log_range"};
  static const std::vector<std::string> kron_roles = {"log_tau", "z_rho_t", "log_range_s"};
  static const std::vector<std::string> mvn_roles = {"log_tau1", "log_tau2", "z_rho"};
  static const std::vector<std::string> none = {};
  switch (kind) {
    case BlockKind::iid:
    case BlockKind::rw1:
    case BlockKind::fixed_effect: return iid_roles;
    case BlockKind::ar1: return ar1_roles;
    case BlockKind::lattice_matern: return lattice_roles;
    case BlockKind::kronecker_ar1_lattice: return kron_roles;
    case BlockKind::mvn_dense: return has_dense ? none : mvn_roles;
  }
  return none;
}

}  // namespace detail

// Internal-scale value of a named hyperparameter given the free vector
// theta, which stacks the non-fixed params in layout order.
inline double hyper_internal(const ModelAssembly& m, const std::string& name,
                             const Eigen::VectorXd& theta) {
  const int idx = m.hypers.index_of(name);
  require(idx >= 0, "hyper_internal: unknown hyperparameter " + name);
  const auto& p = m.hypers.params[idx];
  if (p.fixed) return *p.fixed;
  const auto free = m.hypers.free_indices();
  for (int f = 0; f < static_cast<int>(free.size()); ++f)
    if (free[f] == idx) return theta[f];
  throw validation_error("hyper_internal: inconsistent layout");
}

inline double role_internal(const ModelAssembly& m, const LatentBlockSpec& b,
                            const std::string& role, const Eigen::VectorXd& theta) {
  if (auto it = b.hyper.find(role); it != b.hyper.end())
    return hyper_internal(m, it->second, theta);
  if (auto it = b.fixed.find(role); it != b.fixed.end()) return it->second;
  throw validation_error("block '" + b.name + "': role " + role + " is neither bound nor fixed");
}

// Gaussian log prior of the free hyperparameters on the internal scale.
inline double log_hyper_prior(const ModelAssembly& m, const Eigen::VectorXd& theta) {
  const auto free = m.hypers.free_indices();
  require(theta.size() == static_cast<int>(free.size()), "log_hyper_prior: theta size mismatch");
  double total = 0.0;
  for (int f = 0; f < static_cast<int>(free.size()); ++f) {
    const auto& p = m.hypers.params[free[f]];
    const double z = (theta[f] - p.prior_mean) / p.prior_sd;
    total += -0.5 * detail::kLogTwoPi - std::log(p.prior_sd) - 0.5 * z * z;
  }
  return total;
}

namespace detail {

inline SparseSymmetric block_precision(const ModelAssembly& m, const LatentBlockSpec& b,
                                       const Eigen::VectorXd& theta) {
  switch (b.kind) {
    case BlockKind::iid:
    case BlockKind::fixed_effect:
      return build_iid_precision(b.n, std::exp(role_internal(m, b, "log_tau", theta)));
    case BlockKind::rw1: {
      // Intrinsic: make the carrier proper with a fixed relative jitter; the
      // paired sum-to-zero constraint carries the actual model semantics.
      SparseSymmetric q =
          build_rw1_precision(b.n, std::exp(role_internal(m, b, "log_tau", theta)));
      return q.with_diagonal_added(b.intrinsic_jitter_rel * q.max_diagonal());
    }
    case BlockKind::ar1:
      return build_ar1_precision(b.n, std::tanh(role_internal(m, b, "z_rho", theta)),
                                 std::exp(role_internal(m, b, "log_tau", theta)));
    case BlockKind::lattice_matern:
      return build_lattice_matern_precision(
          b.nrow, b.ncol, std::exp(role_internal(m, b, "log_range", theta)),
          std::exp(role_internal(m, b, "log_tau", theta)));
    case BlockKind::kronecker_ar1_lattice:
      return build_kronecker_ar1_lattice_precision(
          b.n_time, b.nrow, b.ncol, std::tanh(role_internal(m, b, "z_rho_t", theta)),
          std::exp(role_internal(m, b, "log_range_s", theta)),
          std::exp(role_internal(m, b, "log_tau", theta)));
    case BlockKind::mvn_dense: {
      if (b.dense_precision.rows() > 0) {
        std::vector<Triplet> t;
        const int n = static_cast<int>(b.dense_precision.rows());
        for (int i = 0; i < n; ++i)
          for (int j = 0; j <= i; ++j)
            if (b.dense_precision(i, j) != 0.0) t.emplace_back(i, j, b.dense_precision(i, j));
        return SparseSymmetric::from_triplets(n, t);
      }
      // Two correlated sources: covariance S_ii = 1/tau_i, S_12 =
      // rho/sqrt(tau_1 tau_2), inverted in closed form; an even n repeats
      // the pair precision for replicated error tuples.
      require(b.n >= 2 && b.n % 2 == 0,
              "mvn_dense with bindings supports pairs of two correlated sources");
      const double t1 = std::exp(role_internal(m, b, "log_tau1", theta));
      const double t2 = std::exp(role_internal(m, b, "log_tau2", theta));
      const double rho = std::tanh(role_internal(m, b, "z_rho", theta));
      const double den = 1.0 - rho * rho;
      std::vector<Triplet> t;
      for (int p = 0; p < b.n; p += 2) {
        t.emplace_back(p, p, t1 / den);
        t.emplace_back(p + 1, p + 1, t2 / den);
        t.emplace_back(p + 1, p, -rho * std::sqrt(t1 * t2) / den);
      }
      return SparseSymmetric::from_triplets(b.n, t);
    }
  }
  throw validation_error("block_precision: unknown kind");
}

}  // namespace detail

// Block-diagonal prior precision of the whole latent field at theta.
inline SparseSymmetric prior_precision(const ModelAssembly& m, const Eigen::VectorXd& theta) {
  std::vector<Triplet> t;
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const int off = m.offsets[i];
    for (const auto& e : detail::block_precision(m, m.blocks[i], theta).triplets())
      t.emplace_back(e.row() + off, e.col() + off, e.value());
  }
  return SparseSymmetric::from_triplets(m.latent_dim, t);
}

inline Eigen::VectorXd prior_mean(const ModelAssembly& m) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(m.latent_dim);
  for (std::size_t i = 0; i < m.blocks.size(); ++i)
    if (m.blocks[i].prior_mean.size() > 0)
      mu.segment(m.offsets[i], m.blocks[i].size()) = m.blocks[i].prior_mean;
  return mu;
}

// Global constraint system A x = c stacked over blocks.
struct ConstraintSystem {
  Eigen::SparseMatrix<double> a;  // m x latent_dim, m may be 0
  Eigen::VectorXd c;
  int count() const { return static_cast<int>(c.size()); }
};

inline ConstraintSystem constraints(const ModelAssembly& m) {
  std::vector<Triplet> t;
  std::vector<double> rhs;
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    for (const auto& con : m.blocks[i].constraints) {
      const int row = static_cast<int>(rhs.size());
      for (int j = 0; j < con.a.size(); ++j)
        if (con.a[j] != 0.0) t.emplace_back(row, m.offsets[i] + j, con.a[j]);
      rhs.push_back(con.c);
    }
  }
  ConstraintSystem out;
  out.a.resize(static_cast<int>(rhs.size()), m.latent_dim);
  out.a.setFromTriplets(t.begin(), t.end());
  out.c = Eigen::Map<Eigen::VectorXd>(rhs.data(), static_cast<int>(rhs.size()));
  return out;
}

// Alpha multiplier for a block's scaled design at theta (1 when unbound).
inline double block_alpha(const ModelAssembly& m, const ObservationBlock& b,
                          const Eigen::VectorXd& theta) {
  if (b.alpha_binding.empty()) return 1.0;
  return hyper_internal(m, b.alpha_binding, theta);  // identity transform
}

inline Eigen::SparseMatrix<double> effective_design(const ModelAssembly& m,
                                                    const ObservationBlock& b,
                                                    const Eigen::VectorXd& theta) {
  if (!b.has_scaled_design()) return b.design;
  Eigen::SparseMatrix<double> d = b.design + block_alpha(m, b, theta) * b.design_scaled;
  d.makeCompressed();
  return d;
}

inline ModelAssembly finalize_model(std::vector<LatentBlockSpec> blocks,
                                    std::vector<ObservationBlock> obs, HyperLayout hypers) {
  ModelAssembly m;
  m.blocks = std::move(blocks);
  m.obs = std::move(obs);
  m.hypers = std::move(hypers);
  require(!m.blocks.empty(), "finalize_model: no latent blocks");

  for (std::size_t i = 0; i < m.hypers.params.size(); ++i)
    for (std::size_t j = i + 1; j < m.hypers.params.size(); ++j)
      require(m.hypers.params[i].name != m.hypers.params[j].name,
              "finalize_model: duplicate hyperparameter " + m.hypers.params[i].name);
  for (const auto& p : m.hypers.params)
    require(p.prior_sd > 0.0, "finalize_model: hyper prior sd must be positive");

  m.offsets.clear();
  m.latent_dim = 0;
  for (const auto& b : m.blocks) {
    require(b.size() >= 1, "finalize_model: block '" + b.name + "' has no nodes");
    m.offsets.push_back(m.latent_dim);
    m.latent_dim += b.size();
    for (const auto& role : detail::roles_for(b.kind, b.dense_precision.rows() > 0)) {
      const bool bound = b.hyper.count(role) > 0;
      const bool fixed = b.fixed.count(role) > 0;
      require(bound || fixed,
              "finalize_model: block '" + b.name + "' role " + role + " unresolved");
      if (bound)
        require(m.hypers.index_of(b.hyper.at(role)) >= 0,
                "finalize_model: block '" + b.name + "' binds unknown hyper " +
                    b.hyper.at(role));
    }
    for (const auto& con : b.constraints)
      require(con.a.size() == b.size(),
              "finalize_model: constraint length mismatch in block '" + b.name + "'");
    if (b.prior_mean.size() > 0)
      require(b.prior_mean.size() == b.size(),
              "finalize_model: prior mean length mismatch in block '" + b.name + "'");
    if (b.kind == BlockKind::mvn_dense && b.dense_precision.rows() > 0)
      require(b.dense_precision.rows() == b.dense_precision.cols(),
              "finalize_model: dense precision must be square");
  }

  for (const auto& b : m.obs) {
    validate_block(b, m.latent_dim);
    if (!b.likelihood.theta_binding.empty())
      require(m.hypers.index_of(b.likelihood.theta_binding) >= 0,
              "finalize_model: observation block '" + b.name + "' binds unknown hyper");
    if (!b.alpha_binding.empty()) {
      const int idx = m.hypers.index_of(b.alpha_binding);
      require(idx >= 0, "finalize_model: alpha binding unknown in block '" + b.name + "'");
      require(m.hypers.params[idx].transform == Transform::identity,
              "finalize_model: alpha must use the identity transform");
    }
  }
  return m;
}

// Internal-scale likelihood parameter for an observation block at theta.
inline double obs_theta_log(const ModelAssembly& m, const ObservationBlock& b,
                            const Eigen::VectorXd& theta) {
  if (b.likelihood.theta_binding.empty()) return 0.0;
  return hyper_internal(m, b.likelihood.theta_binding, theta);
}

}  // namespace rlgm
