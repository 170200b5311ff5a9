#pragma once

// Validation oracles.  Both recompute posteriors by routes independent of
// the sparse engine: the conjugate oracle by dense covariance algebra (joint
// Gaussian marginalization in an explicit constraint-subspace basis), the
// quadrature oracle by brute-force trapezoid integration over the latent
// node and, optionally, one hyperparameter.

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <vector>

#include "rlgm/errors.hpp"
#include "rlgm/gaussian.hpp"
#include "rlgm/model.hpp"

namespace rlgm {

struct OracleGaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd precision_carrier;  // prior + A' D A, before conditioning
  Eigen::VectorXd marginal_var;       // after conditioning on constraints
  double log_evidence = 0.0;
};

namespace detail {

inline double mvn_logpdf_cov(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                             const Eigen::MatrixXd& cov) {
  const int n = static_cast<int>(x.size());
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw numerical_error("mvn_logpdf_cov: covariance not positive definite");
  Eigen::VectorXd d = x - mean;
  const double quad = d.dot(llt.solve(d));
  double ld = 0.0;
  for (int i = 0; i < n; ++i) ld += 2.0 * std::log(llt.matrixL()(i, i));
  return -0.5 * n * kLogTwoPi - 0.5 * ld - 0.5 * quad;
}

// Stacked gaussian rows of a selection: dense design, response, precisions.
struct StackedGaussian {
  Eigen::MatrixXd a;
  Eigen::VectorXd y;
  Eigen::VectorXd tau;
};

inline StackedGaussian stack_gaussian_rows(const ModelAssembly& m,
                                           const std::vector<ObsSlice>& slices,
                                           const Eigen::VectorXd& theta) {
  int rows = 0;
  for (const auto& s : slices) {
    require(s.data.likelihood.family == Family::gaussian,
            "conjugate oracle: non-gaussian observation block present");
    rows += s.rows();
  }
  StackedGaussian st;
  st.a.setZero(rows, m.latent_dim);
  st.y.resize(rows);
  st.tau.resize(rows);
  int at = 0;
  for (const auto& s : slices) {
    st.a.block(at, 0, s.rows(), m.latent_dim) =
        Eigen::MatrixXd(effective_design(m, s.data, theta));
    st.y.segment(at, s.rows()) = s.data.values;
    const double theta_log = obs_theta_log(m, s.data, theta);
    for (int i = 0; i < s.rows(); ++i) st.tau[at + i] = obs_precision(s.data, theta_log, i);
    at += s.rows();
  }
  return st;
}

}  // namespace detail

// Closed-form posterior and evidence for a fully Gaussian assembly at fixed
// theta, under the same constraint convention as the engine.
inline OracleGaussian oracle_conjugate_gaussian(const ModelAssembly& m,
                                                const Eigen::VectorXd& theta,
                                                const std::vector<ObsSlice>& slices) {
  const Eigen::MatrixXd q0 = prior_precision(m, theta).dense();
  const Eigen::VectorXd mu0 = prior_mean(m);
  const ConstraintSystem cs = constraints(m);
  const int n = m.latent_dim;
  const auto st = detail::stack_gaussian_rows(m, slices, theta);
  const int rows = static_cast<int>(st.y.size());

  OracleGaussian out;
  out.precision_carrier = q0 + st.a.transpose() * st.tau.asDiagonal() * st.a;

  if (cs.count() == 0) {
    const Eigen::VectorXd b = q0 * mu0 + st.a.transpose() * (st.tau.asDiagonal() * st.y);
    Eigen::LLT<Eigen::MatrixXd> post(out.precision_carrier);
    out.mean = post.solve(b);
    Eigen::MatrixXd cov = post.solve(Eigen::MatrixXd::Identity(n, n));
    out.marginal_var = cov.diagonal();
    if (rows > 0) {
      const Eigen::MatrixXd prior_cov = q0.llt().solve(Eigen::MatrixXd::Identity(n, n));
      Eigen::MatrixXd ycov = st.a * prior_cov * st.a.transpose();
      ycov.diagonal() += st.tau.cwiseInverse();
      out.log_evidence = detail::mvn_logpdf_cov(st.y, st.a * mu0, ycov);
    }
    return out;
  }

  // Constrained case: work in an orthonormal basis of the null space of A.
  Eigen::MatrixXd ac = Eigen::MatrixXd(cs.a);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(ac, Eigen::ComputeFullV);
  const int rank = static_cast<int>(svd.rank());
  require(rank == cs.count(), "conjugate oracle: dependent constraints");
  const Eigen::MatrixXd basis = svd.matrixV().rightCols(n - rank);
  const Eigen::VectorXd x_part =
      ac.transpose() * (ac * ac.transpose()).llt().solve(cs.c);

  // Conditioning the prior on A x = c gives s ~ N(m_s, P_s^-1) in the
  // orthonormal subspace coordinates x = x_part + basis * s; the evidence is
  // then the marginal density of the stacked data in those coordinates.
  const Eigen::MatrixXd p_s = basis.transpose() * q0 * basis;
  const Eigen::VectorXd m_s = p_s.llt().solve(basis.transpose() * (q0 * (mu0 - x_part)));

  const Eigen::MatrixXd ab = st.a * basis;
  const Eigen::MatrixXd p_post = p_s + ab.transpose() * st.tau.asDiagonal() * ab;
  Eigen::LLT<Eigen::MatrixXd> post(p_post);
  const Eigen::VectorXd s_mean =
      post.solve(p_s * m_s + ab.transpose() * (st.tau.asDiagonal() * (st.y - st.a * x_part)));
  out.mean = x_part + basis * s_mean;
  const Eigen::MatrixXd s_cov = post.solve(Eigen::MatrixXd::Identity(n - rank, n - rank));
  out.marginal_var = (basis * s_cov * basis.transpose()).diagonal();

  if (rows > 0) {
    Eigen::MatrixXd ycov = ab * p_s.llt().solve(Eigen::MatrixXd::Identity(n - rank, n - rank)) *
                           ab.transpose();
    ycov.diagonal() += st.tau.cwiseInverse();
    out.log_evidence = detail::mvn_logpdf_cov(st.y, st.a * x_part + ab * m_s, ycov);
  }
  return out;
}

struct OracleQuadrature {
  Eigen::VectorXd theta_grid;       // empty when no free hyperparameter
  Eigen::VectorXd log_post_theta;   // unnormalized log posterior per grid point
  Eigen::VectorXd theta_pdf;        // normalized on the grid
  double theta_mode = 0.0;          // argmax over the grid (internal scale)
  Eigen::VectorXd x_grid;
  Eigen::VectorXd x_pdf;            // posterior marginal of the latent node
  double log_evidence = 0.0;
};

namespace detail {

inline Eigen::VectorXd trapezoid_weights(const Eigen::VectorXd& grid) {
  const int n = static_cast<int>(grid.size());
  require(n >= 2, "trapezoid_weights: need at least two points");
  Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
  for (int i = 0; i + 1 < n; ++i) {
    const double h = grid[i + 1] - grid[i];
    w[i] += 0.5 * h;
    w[i + 1] += 0.5 * h;
  }
  return w;
}

inline double logsumexp_weighted(const Eigen::VectorXd& logv, const Eigen::VectorXd& w) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < logv.size(); ++i)
    if (w[i] > 0.0) mx = std::max(mx, logv[i]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (int i = 0; i < logv.size(); ++i)
    if (w[i] > 0.0) s += w[i] * std::exp(logv[i] - mx);
  return mx + std::log(s);
}

}  // namespace detail

// Brute-force posterior for a single-latent-node model with at most one free
// hyperparameter.  theta_grid is ignored (may be empty) when the model has
// no free hyperparameters.
inline OracleQuadrature oracle_quadrature_1d(const ModelAssembly& m,
                                             const std::vector<ObsSlice>& slices,
                                             const Eigen::VectorXd& x_grid,
                                             const Eigen::VectorXd& theta_grid) {
  require(m.latent_dim == 1, "quadrature oracle: latent dimension must be 1");
  require(constraints(m).count() == 0, "quadrature oracle: constraints unsupported");
  const int d = m.hypers.free_dim();
  require(d <= 1, "quadrature oracle: at most one free hyperparameter");

  OracleQuadrature out;
  out.x_grid = x_grid;
  const Eigen::VectorXd wx = detail::trapezoid_weights(x_grid);

  auto joint_log = [&](double theta_val, Eigen::VectorXd& log_joint_x) {
    Eigen::VectorXd theta(d);
    if (d == 1) theta[0] = theta_val;
    const double q = prior_precision(m, theta).dense()(0, 0);
    const double mu = prior_mean(m)[0];
    const auto evals = detail::bind_slices(m, slices, theta);
    log_joint_x.resize(x_grid.size());
    for (int i = 0; i < x_grid.size(); ++i) {
      Eigen::VectorXd x1(1);
      x1[0] = x_grid[i];
      double ll = 0.0;
      for (std::size_t s = 0; s < slices.size(); ++s)
        ll += loglik(slices[s].data, evals[s].a_eff * x1, evals[s].theta_log);
      const double r = x_grid[i] - mu;
      log_joint_x[i] = ll + 0.5 * (std::log(q) - detail::kLogTwoPi) - 0.5 * q * r * r;
    }
    return detail::logsumexp_weighted(log_joint_x, wx);
  };

  if (d == 0) {
    Eigen::VectorXd log_joint;
    out.log_evidence = joint_log(0.0, log_joint);
    out.x_pdf = (log_joint.array() - out.log_evidence).exp();
    return out;
  }

  require(theta_grid.size() >= 3, "quadrature oracle: theta grid too small");
  out.theta_grid = theta_grid;
  const Eigen::VectorXd wt = detail::trapezoid_weights(theta_grid);
  out.log_post_theta.resize(theta_grid.size());
  Eigen::MatrixXd cond_x(x_grid.size(), theta_grid.size());
  for (int j = 0; j < theta_grid.size(); ++j) {
    Eigen::VectorXd theta(1);
    theta[0] = theta_grid[j];
    Eigen::VectorXd log_joint;
    const double lml = joint_log(theta_grid[j], log_joint);
    out.log_post_theta[j] = lml + log_hyper_prior(m, theta);
    cond_x.col(j) = log_joint;
  }
  out.log_evidence = detail::logsumexp_weighted(out.log_post_theta, wt);
  out.theta_pdf = ((out.log_post_theta.array() - out.log_evidence).exp());
  int arg = 0;
  out.log_post_theta.maxCoeff(&arg);
  out.theta_mode = theta_grid[arg];

  out.x_pdf = Eigen::VectorXd::Zero(x_grid.size());
  for (int j = 0; j < theta_grid.size(); ++j) {
    const double wj = wt[j] * std::exp(out.log_post_theta[j] - out.log_evidence);
    // cond_x already contains prior * likelihood; normalize per theta first.
    const double norm_j = detail::logsumexp_weighted(cond_x.col(j), wx);
    out.x_pdf += wj * (cond_x.col(j).array() - norm_j).exp().matrix();
  }
  return out;
}

}  // namespace rlgm
