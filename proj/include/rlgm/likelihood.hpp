#pragma once

// Observation models: Gaussian/identity, Poisson/log, Bernoulli/logit,
// Binomial/logit.  Each exposes the log likelihood and its first and second
// derivatives with respect to the linear predictor, which is all the
// Gaussian-approximation machinery needs.  Gaussian blocks may carry
// per-observation precision scales phi, in which case the bound
// hyperparameter is the global multiplier psi and observation i has
// precision psi * phi_i.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "rlgm/errors.hpp"

namespace rlgm {

enum class Family { gaussian, poisson, bernoulli, binomial };
enum class Link { identity, log_link, logit };

struct LikelihoodSpec {
  Family family = Family::gaussian;
  Link link = Link::identity;
  // Name of the theta entry this block reads: log precision tau for plain
  // Gaussian blocks, log psi when precision scales are present.  Empty for
  // the count families, which have no likelihood hyperparameter.
  std::string theta_binding;
};

inline bool supported_pair(Family f, Link l) {
  return (f == Family::gaussian && l == Link::identity) ||
         (f == Family::poisson && l == Link::log_link) ||
         (f == Family::bernoulli && l == Link::logit) ||
         (f == Family::binomial && l == Link::logit);
}

struct ObservationBlock {
  std::string name;
  Eigen::VectorXd values;
  // Linear predictor = design * x + alpha * design_scaled * x.  The split
  // keeps shared-field fusion terms (scaled by alpha per support point) apart
  // from plain terms such as intercepts and residual effects.
  Eigen::SparseMatrix<double> design;
  Eigen::SparseMatrix<double> design_scaled;  // 0 x 0 when unused
  std::string alpha_binding;                  // identity-transform hyper; empty when unused
  Eigen::VectorXd precision_scales;           // phi, gaussian only; empty when absent
  std::vector<int> trials;                    // binomial only
  LikelihoodSpec likelihood;

  int rows() const { return static_cast<int>(values.size()); }
  bool has_scaled_design() const { return design_scaled.rows() > 0; }
};

inline void validate_block(const ObservationBlock& b, int latent_dim) {
  require(supported_pair(b.likelihood.family, b.likelihood.link),
          "observation block '" + b.name + "': unsupported family/link pair");
  require(b.design.rows() == b.values.size(),
          "observation block '" + b.name + "': design rows != number of values");
  require(b.design.cols() == latent_dim,
          "observation block '" + b.name + "': design columns != latent dimension");
  if (b.has_scaled_design()) {
    require(b.design_scaled.rows() == b.values.size() && b.design_scaled.cols() == latent_dim,
            "observation block '" + b.name + "': scaled design shape mismatch");
    require(!b.alpha_binding.empty(),
            "observation block '" + b.name + "': scaled design without alpha binding");
  }
  if (b.precision_scales.size() > 0) {
    require(b.likelihood.family == Family::gaussian,
            "observation block '" + b.name + "': precision scales require a gaussian family");
    require(b.precision_scales.size() == b.values.size(),
            "observation block '" + b.name + "': precision scales length mismatch");
    require(b.precision_scales.minCoeff() > 0.0,
            "observation block '" + b.name + "': precision scales must be positive");
  }
  switch (b.likelihood.family) {
    case Family::gaussian:
      require(!b.likelihood.theta_binding.empty(),
              "observation block '" + b.name + "': gaussian block needs a theta binding");
      break;
    case Family::poisson:
      for (int i = 0; i < b.rows(); ++i)
        require(b.values[i] >= 0.0 && b.values[i] == std::floor(b.values[i]),
                "observation block '" + b.name + "': poisson values must be counts");
      break;
    case Family::bernoulli:
      for (int i = 0; i < b.rows(); ++i)
        require(b.values[i] == 0.0 || b.values[i] == 1.0,
                "observation block '" + b.name + "': bernoulli values must be 0/1");
      break;
    case Family::binomial:
      require(static_cast<int>(b.trials.size()) == b.rows(),
              "observation block '" + b.name + "': binomial block needs per-row trials");
      for (int i = 0; i < b.rows(); ++i) {
        require(b.trials[i] > 0, "observation block '" + b.name + "': trials must be positive");
        require(b.values[i] >= 0.0 && b.values[i] <= b.trials[i] &&
                    b.values[i] == std::floor(b.values[i]),
                "observation block '" + b.name + "': binomial values out of range");
      }
      break;
  }
}

// tau_exp = psi * phi elementwise: a global trust multiplier over
// expert-supplied per-observation precisions.
inline Eigen::VectorXd expert_precision(double psi, const Eigen::VectorXd& phi) {
  require(psi > 0.0, "expert_precision: psi must be positive");
  require(phi.size() > 0 && phi.minCoeff() > 0.0, "expert_precision: phi must be positive");
  return psi * phi;
}

namespace detail {

constexpr double kCurvatureFloor = 1e-12;
constexpr double kLogTwoPi = 1.8378770664093453;  // log(2*pi)

inline double softplus(double x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0);
}

inline void check_eta(const Eigen::VectorXd& eta, const std::string& who) {
  if (!eta.allFinite()) throw numerical_error(who + ": non-finite linear predictor");
}

// Per-observation gaussian precision at the given internal theta value.
inline double obs_precision(const ObservationBlock& b, double theta_log, int i) {
  const double base = std::exp(theta_log);
  return b.precision_scales.size() > 0 ? base * b.precision_scales[i] : base;
}

}  // namespace detail

// Sum of per-observation log densities.  theta_log is the internal-scale
// value of the block's bound hyperparameter (ignored by count families).
inline double loglik(const ObservationBlock& b, const Eigen::VectorXd& eta,
                     double theta_log = 0.0) {
  require(eta.size() == b.values.size(), "loglik: eta length mismatch");
  detail::check_eta(eta, "loglik");
  double total = 0.0;
  switch (b.likelihood.family) {
    case Family::gaussian:
      for (int i = 0; i < b.rows(); ++i) {
        const double tau = detail::obs_precision(b, theta_log, i);
        const double r = b.values[i] - eta[i];
        total += 0.5 * (std::log(tau) - detail::kLogTwoPi) - 0.5 * tau * r * r;
      }
      break;
    case Family::poisson:
      for (int i = 0; i < b.rows(); ++i)
        total += b.values[i] * eta[i] - std::exp(eta[i]) - std::lgamma(b.values[i] + 1.0);
      break;
    case Family::bernoulli:
      for (int i = 0; i < b.rows(); ++i)
        total += b.values[i] * eta[i] - detail::softplus(eta[i]);
      break;
    case Family::binomial:
      for (int i = 0; i < b.rows(); ++i) {
        const double m = b.trials[i], y = b.values[i];
        total += std::lgamma(m + 1.0) - std::lgamma(y + 1.0) - std::lgamma(m - y + 1.0) +
                 y * eta[i] - m * detail::softplus(eta[i]);
      }
      break;
  }
  return total;
}

// Gradient and negative curvature of the log likelihood in eta.  The
// curvature is floored at a tiny positive value so Newton systems stay
// definite when a count likelihood flattens out.
inline void grad_hess_eta(const ObservationBlock& b, const Eigen::VectorXd& eta,
                          double theta_log, Eigen::VectorXd& grad, Eigen::VectorXd& curv) {
  require(eta.size() == b.values.size(), "grad_hess_eta: eta length mismatch");
  detail::check_eta(eta, "grad_hess_eta");
  grad.resize(eta.size());
  curv.resize(eta.size());
  switch (b.likelihood.family) {
    case Family::gaussian:
      for (int i = 0; i < b.rows(); ++i) {
        const double tau = detail::obs_precision(b, theta_log, i);
        grad[i] = tau * (b.values[i] - eta[i]);
        curv[i] = tau;
      }
      break;
    case Family::poisson:
      for (int i = 0; i < b.rows(); ++i) {
        const double mu = std::exp(eta[i]);
        grad[i] = b.values[i] - mu;
        curv[i] = std::max(mu, detail::kCurvatureFloor);
      }
      break;
    case Family::bernoulli:
      for (int i = 0; i < b.rows(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-eta[i]));
        grad[i] = b.values[i] - p;
        curv[i] = std::max(p * (1.0 - p), detail::kCurvatureFloor);
      }
      break;
    case Family::binomial:
      for (int i = 0; i < b.rows(); ++i) {
        const double m = b.trials[i];
        const double p = 1.0 / (1.0 + std::exp(-eta[i]));
        grad[i] = b.values[i] - m * p;
        curv[i] = std::max(m * p * (1.0 - p), detail::kCurvatureFloor);
      }
      break;
  }
}

}  // namespace rlgm
