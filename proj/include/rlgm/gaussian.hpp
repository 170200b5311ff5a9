#pragma once

// Gaussian approximation of the conditional latent posterior at a fixed
// hyperparameter point: Newton optimization with step-halving line search,
// curvature-corrected precision, and exact handling of linear constraints by
// conditioning.
//
// Constraint convention.  A latent density subject to A x = c is represented
// by its unconstrained carrier N(mu, Q^-1) and evaluated as
//     log pi_c(x) = log N(x; mu, Q) - log N(c; A mu, A Q^-1 A'),
// which at a feasible mode collapses to
//     -(n-m)/2 log 2pi + 1/2 log det Q + 1/2 log det(A Q^-1 A').
// The same convention is used on both sides of every marginal-likelihood
// identity here, so the measure constant it hides cancels throughout.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cmath>
#include <memory>
#include <numeric>
#include <vector>

#include "rlgm/chol.hpp"
#include "rlgm/errors.hpp"
#include "rlgm/likelihood.hpp"
#include "rlgm/model.hpp"

namespace rlgm {

struct ApproxConfig {
  int max_newton = 50;
  double tol = 1e-8;         // max-norm of the last accepted step
  int max_halvings = 25;
  JitterPolicy jitter;
  int dense_fallback_dim = 5000;
};

struct GaussianApprox {
  Eigen::VectorXd mode;
  SparseSymmetric precision;  // carrier precision (prior + curvature part)
  std::shared_ptr<const CholeskyFactor> factor;  // dropped by memory-lean callers
  double log_det_precision = 0.0;
  double log_det_constraint = 0.0;  // log det(A Q^-1 A'); 0 when unconstrained
  double log_gauss_at_mode = 0.0;   // constrained normalizer at the mode
  double loglik_at_mode = 0.0;      // data log likelihood at the mode
  int newton_iters = 0;
  bool converged = true;
  std::vector<double> objective_path;  // accepted line-search objective values

  // Constrained log density at a feasible point (A x = c), using the cached
  // normalizer; exact because the mode equals the carrier mean.
  double log_density(const Eigen::VectorXd& x) const {
    Eigen::VectorXd d = x - mode;
    return log_gauss_at_mode - 0.5 * precision.quad_form(d);
  }
};

// Row selection per observation block; the unit of data partitioning.
struct ObsSelection {
  std::vector<std::vector<int>> rows;  // aligned with model.obs

  static ObsSelection all(const ModelAssembly& m) {
    ObsSelection s;
    for (const auto& b : m.obs) {
      std::vector<int> r(b.rows());
      std::iota(r.begin(), r.end(), 0);
      s.rows.push_back(std::move(r));
    }
    return s;
  }

  static ObsSelection none(const ModelAssembly& m) {
    ObsSelection s;
    s.rows.resize(m.obs.size());
    return s;
  }

  bool empty() const {
    for (const auto& r : rows)
      if (!r.empty()) return false;
    return true;
  }

  int total_rows() const {
    int n = 0;
    for (const auto& r : rows) n += static_cast<int>(r.size());
    return n;
  }
};

namespace detail {

inline Eigen::SparseMatrix<double> select_rows(const Eigen::SparseMatrix<double>& m,
                                               const std::vector<int>& rows) {
  std::vector<int> pos(m.rows(), -1);
  for (int i = 0; i < static_cast<int>(rows.size()); ++i) pos[rows[i]] = i;
  std::vector<Triplet> t;
  for (int k = 0; k < m.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it)
      if (pos[it.row()] >= 0) t.emplace_back(pos[it.row()], static_cast<int>(it.col()), it.value());
  Eigen::SparseMatrix<double> out(static_cast<int>(rows.size()), m.cols());
  out.setFromTriplets(t.begin(), t.end());
  return out;
}

}  // namespace detail

// One observation block restricted to a row selection.
struct ObsSlice {
  const ObservationBlock* src = nullptr;
  ObservationBlock data;  // restricted copy; designs sliced once

  int rows() const { return data.rows(); }
};

inline std::vector<ObsSlice> make_slices(const ModelAssembly& m, const ObsSelection& sel) {
  require(sel.rows.size() == m.obs.size(), "make_slices: selection misaligned with model");
  std::vector<ObsSlice> out;
  for (std::size_t i = 0; i < m.obs.size(); ++i) {
    if (sel.rows[i].empty()) continue;
    const auto& b = m.obs[i];
    for (int r : sel.rows[i])
      require(r >= 0 && r < b.rows(), "make_slices: row index out of range");
    ObsSlice s;
    s.src = &b;
    s.data.name = b.name;
    s.data.likelihood = b.likelihood;
    s.data.alpha_binding = b.alpha_binding;
    const int k = static_cast<int>(sel.rows[i].size());
    s.data.values.resize(k);
    for (int j = 0; j < k; ++j) s.data.values[j] = b.values[sel.rows[i][j]];
    if (b.precision_scales.size() > 0) {
      s.data.precision_scales.resize(k);
      for (int j = 0; j < k; ++j) s.data.precision_scales[j] = b.precision_scales[sel.rows[i][j]];
    }
    if (!b.trials.empty()) {
      s.data.trials.resize(k);
      for (int j = 0; j < k; ++j) s.data.trials[j] = b.trials[sel.rows[i][j]];
    }
    s.data.design = detail::select_rows(b.design, sel.rows[i]);
    if (b.has_scaled_design())
      s.data.design_scaled = detail::select_rows(b.design_scaled, sel.rows[i]);
    out.push_back(std::move(s));
  }
  return out;
}

namespace detail {

struct SliceEval {
  Eigen::SparseMatrix<double> a_eff;  // design at this theta
  double theta_log = 0.0;             // resolved likelihood parameter
};

inline std::vector<SliceEval> bind_slices(const ModelAssembly& m,
                                          const std::vector<ObsSlice>& slices,
                                          const Eigen::VectorXd& theta) {
  std::vector<SliceEval> out;
  out.reserve(slices.size());
  for (const auto& s : slices) {
    SliceEval e;
    e.a_eff = effective_design(m, s.data, theta);
    e.theta_log = obs_theta_log(m, s.data, theta);
    out.push_back(std::move(e));
  }
  return out;
}

inline double total_loglik(const std::vector<ObsSlice>& slices,
                           const std::vector<SliceEval>& evals, const Eigen::VectorXd& x) {
  double total = 0.0;
  for (std::size_t i = 0; i < slices.size(); ++i)
    total += loglik(slices[i].data, evals[i].a_eff * x, evals[i].theta_log);
  return total;
}

// log det of the dense constraint Gram matrix A Q^-1 A' given a factor of Q.
inline double constraint_log_det(const CholeskyFactor& f, const ConstraintSystem& cs,
                                 Eigen::MatrixXd* w_out = nullptr,
                                 Eigen::MatrixXd* v_out = nullptr) {
  if (cs.count() == 0) return 0.0;
  Eigen::MatrixXd at = Eigen::MatrixXd(cs.a).transpose();  // n x m
  Eigen::MatrixXd w = f.solve_matrix(at);                  // Q^-1 A'
  Eigen::MatrixXd v = Eigen::MatrixXd(cs.a) * w;           // A Q^-1 A'
  Eigen::LLT<Eigen::MatrixXd> llt(v);
  if (llt.info() != Eigen::Success)
    throw numerical_error("constraint_log_det: constraint Gram matrix not positive definite");
  double ld = 0.0;
  for (int i = 0; i < v.rows(); ++i) ld += 2.0 * std::log(llt.matrixL()(i, i));
  if (w_out) *w_out = std::move(w);
  if (v_out) *v_out = std::move(v);
  return ld;
}

// Project a point onto {A x = c} in the metric of the factored precision.
inline Eigen::VectorXd constrain_point(const CholeskyFactor& f, const ConstraintSystem& cs,
                                       const Eigen::VectorXd& x) {
  if (cs.count() == 0) return x;
  Eigen::VectorXd resid = cs.a * x - cs.c;
  if (resid.cwiseAbs().maxCoeff() == 0.0) return x;
  Eigen::MatrixXd at = Eigen::MatrixXd(cs.a).transpose();
  Eigen::MatrixXd w = f.solve_matrix(at);
  Eigen::MatrixXd v = Eigen::MatrixXd(cs.a) * w;
  return x - w * v.llt().solve(resid);
}

}  // namespace detail

// The prior itself packaged as a GaussianApprox: the empty-data case, and the
// normalizer source for marginal-likelihood identities.
inline GaussianApprox prior_approx(const ModelAssembly& m, const Eigen::VectorXd& theta,
                                   const ApproxConfig& cfg = {}) {
  GaussianApprox g;
  g.precision = prior_precision(m, theta);
  auto f = std::make_shared<CholeskyFactor>(cholesky(g.precision, cfg.jitter));
  const ConstraintSystem cs = constraints(m);
  g.mode = detail::constrain_point(*f, cs, prior_mean(m));
  g.log_det_precision = f->log_det();
  g.log_det_constraint = detail::constraint_log_det(*f, cs);
  const int n = m.latent_dim, mm = cs.count();
  g.log_gauss_at_mode = -0.5 * (n - mm) * detail::kLogTwoPi +
                        0.5 * (g.log_det_precision + g.log_det_constraint);
  g.factor = std::move(f);
  return g;
}

// Newton mode location for pi(x | y, theta) with the given prior term.  When
// latent_prior is null the model's own block prior at theta is used; passing
// a previous posterior as latent_prior is the recursion hook.
inline GaussianApprox gaussian_approximation(const ModelAssembly& m,
                                             const Eigen::VectorXd& theta,
                                             const std::vector<ObsSlice>& slices,
                                             const GaussianApprox* latent_prior = nullptr,
                                             const ApproxConfig& cfg = {}) {
  const ConstraintSystem cs = constraints(m);
  GaussianApprox prior_local;
  if (!latent_prior) {
    prior_local = prior_approx(m, theta, cfg);
    latent_prior = &prior_local;
  }
  const SparseSymmetric& q_prior = latent_prior->precision;
  const Eigen::VectorXd& mu_prior = latent_prior->mode;
  require(mu_prior.size() == m.latent_dim, "gaussian_approximation: prior dimension mismatch");

  if (slices.empty()) {
    GaussianApprox g = *latent_prior;
    g.loglik_at_mode = 0.0;
    g.newton_iters = 0;
    g.converged = true;
    g.objective_path = {0.0};
    if (!g.factor) g.factor = std::make_shared<CholeskyFactor>(cholesky(g.precision, cfg.jitter));
    return g;
  }

  const auto evals = detail::bind_slices(m, slices, theta);
  auto objective = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd d = x - mu_prior;
    return detail::total_loglik(slices, evals, x) - 0.5 * q_prior.quad_form(d);
  };

  Eigen::VectorXd x = mu_prior;  // feasible by construction
  double obj = objective(x);
  GaussianApprox out;
  out.objective_path.push_back(obj);
  out.converged = false;

  std::shared_ptr<CholeskyFactor> factor;
  Eigen::VectorXd grad_lik, curv;
  for (int iter = 0; iter < cfg.max_newton; ++iter) {
    // Assemble gradient and curvature-corrected precision at x.
    Eigen::VectorXd grad = -(q_prior.multiply(x - mu_prior));
    Eigen::SparseMatrix<double> q_full = q_prior.full();
    for (std::size_t i = 0; i < slices.size(); ++i) {
      const auto& a = evals[i].a_eff;
      grad_hess_eta(slices[i].data, a * x, evals[i].theta_log, grad_lik, curv);
      grad += a.transpose() * grad_lik;
      q_full += Eigen::SparseMatrix<double>(a.transpose() * curv.asDiagonal() * a);
    }
    const SparseSymmetric q_step = SparseSymmetric::from_full(q_full);
    factor = std::make_shared<CholeskyFactor>(cholesky(q_step, cfg.jitter));

    Eigen::VectorXd x_hat = x + factor->solve(grad);
    x_hat = detail::constrain_point(*factor, cs, x_hat);
    Eigen::VectorXd dx = x_hat - x;
    if (dx.cwiseAbs().maxCoeff() <= cfg.tol) {
      out.precision = q_step;
      out.converged = true;
      break;
    }

    double step = 1.0;
    double cand_obj = objective(x + step * dx);
    int halvings = 0;
    while (!(cand_obj >= obj) && halvings < cfg.max_halvings) {
      step *= 0.5;
      cand_obj = objective(x + step * dx);
      ++halvings;
    }
    if (!(cand_obj >= obj)) break;  // no progress possible

    x += step * dx;
    obj = cand_obj;
    out.objective_path.push_back(obj);
    out.newton_iters = iter + 1;
    out.precision = q_step;
    if ((step * dx).cwiseAbs().maxCoeff() <= cfg.tol) {
      out.converged = true;
      break;
    }
  }

  // Final curvature at the accepted mode, and the constrained normalizer.
  Eigen::SparseMatrix<double> q_full = q_prior.full();
  double ll = 0.0;
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const auto& a = evals[i].a_eff;
    Eigen::VectorXd eta = a * x;
    grad_hess_eta(slices[i].data, eta, evals[i].theta_log, grad_lik, curv);
    q_full += Eigen::SparseMatrix<double>(a.transpose() * curv.asDiagonal() * a);
    ll += loglik(slices[i].data, eta, evals[i].theta_log);
  }
  out.mode = x;
  out.precision = SparseSymmetric::from_full(q_full);
  auto f = std::make_shared<CholeskyFactor>(cholesky(out.precision, cfg.jitter));
  out.log_det_precision = f->log_det();
  out.log_det_constraint = detail::constraint_log_det(*f, cs);
  out.log_gauss_at_mode = -0.5 * (m.latent_dim - cs.count()) * detail::kLogTwoPi +
                          0.5 * (out.log_det_precision + out.log_det_constraint);
  out.loglik_at_mode = ll;
  out.factor = std::move(f);
  return out;
}

// Marginal variances of the (possibly constrained) Gaussian approximation.
inline Eigen::VectorXd approx_marginal_variances(const GaussianApprox& g,
                                                 const ConstraintSystem& cs,
                                                 const ApproxConfig& cfg = {}) {
  std::shared_ptr<const CholeskyFactor> f = g.factor;
  if (!f) f = std::make_shared<CholeskyFactor>(cholesky(g.precision, cfg.jitter));
  Eigen::VectorXd var = marginal_variances(*f, cfg.dense_fallback_dim);
  if (cs.count() > 0) {
    Eigen::MatrixXd w, v;
    detail::constraint_log_det(*f, cs, &w, &v);
    Eigen::MatrixXd vinv_wt = v.llt().solve(w.transpose());
    for (int i = 0; i < var.size(); ++i) {
      var[i] -= w.row(i).dot(vinv_wt.col(i));
      if (var[i] < 0.0) var[i] = 0.0;  // clip roundoff at hard-constrained nodes
    }
  }
  return var;
}

// Log of the unnormalized hyperparameter posterior at theta, plus the
// Gaussian approximation for reuse: log pi(y | x*, theta) + log pi(x* |
// theta) + log pi(theta) - log pi_G(x* | y, theta), all under the shared
// constraint convention.
inline std::pair<double, GaussianApprox> log_hyper_posterior(
    const ModelAssembly& m, const Eigen::VectorXd& theta, const std::vector<ObsSlice>& slices,
    const GaussianApprox* latent_prior = nullptr, const ApproxConfig& cfg = {}) {
  GaussianApprox prior_local;
  if (!latent_prior) {
    prior_local = prior_approx(m, theta, cfg);
    latent_prior = &prior_local;
  }
  GaussianApprox g = gaussian_approximation(m, theta, slices, latent_prior, cfg);
  const double value = g.loglik_at_mode + latent_prior->log_density(g.mode) +
                       log_hyper_prior(m, theta) - g.log_gauss_at_mode;
  return {value, std::move(g)};
}

}  // namespace rlgm
