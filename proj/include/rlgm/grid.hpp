#pragma once

// Hyperparameter-space exploration: quasi-Newton mode search on the internal
// scale, curvature by central differences, and support-point layouts in the
// standardized space z with theta = mode + S z, S = V diag(lambda)^-1/2.
// Two layouts: a flood-filled axis grid with equal cell weights, and a small
// central-composite design with moment-matched shell weights.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "rlgm/gaussian.hpp"
#include "rlgm/model.hpp"

namespace rlgm {

enum class GridStrategy { axis_grid, ccd_lite };

struct ExploreConfig {
  GridStrategy strategy = GridStrategy::axis_grid;
  double z_step = 1.0;        // axis-grid spacing in standardized units
  double log_drop = 2.5;      // axis-grid retention threshold below the max
  double ccd_radius_unit = 1.1;  // shell radius = this * sqrt(dim)
  int max_bfgs = 100;
  double bfgs_tol = 1e-6;     // max-norm of the gradient at the mode
  double fd_step = 1e-3;      // central-difference step, gradient and Hessian
  int max_points = 512;       // flood-fill guard
  ApproxConfig approx;
};

struct HyperGrid {
  Eigen::MatrixXd points;      // K x d, internal scale
  Eigen::MatrixXd z;           // K x d, standardized coordinates
  Eigen::VectorXd log_density; // unnormalized log posterior per point
  Eigen::VectorXd log_weight;  // log of the integration weight per point
  int mode_index = 0;          // argmax of log_density
  Eigen::VectorXd mode;        // quasi-Newton optimum
  Eigen::VectorXd gradient;    // central-difference gradient at the optimum
  Eigen::MatrixXd curvature;   // negative Hessian at the optimum
  Eigen::MatrixXd scale;       // S with theta = mode + S z
  GridStrategy strategy = GridStrategy::axis_grid;
  double z_step = 1.0;  // axis-grid lattice spacing actually used
  bool mode_converged = true;
  int bfgs_iters = 0;
  int feval_count = 0;
  std::vector<std::string> warnings;

  int size() const { return static_cast<int>(points.rows()); }
  int dim() const { return static_cast<int>(points.cols()); }

  // Normalized point masses combining density and weight.
  Eigen::VectorXd masses() const {
    Eigen::VectorXd lw = log_density + log_weight;
    const double mx = lw.maxCoeff();
    Eigen::VectorXd w = (lw.array() - mx).exp();
    return w / w.sum();
  }
};

inline double log_marginal_likelihood(const HyperGrid& grid) {
  const Eigen::VectorXd lw = grid.log_density + grid.log_weight;
  const double mx = lw.maxCoeff();
  double s = 0.0;
  for (int i = 0; i < lw.size(); ++i) s += std::exp(lw[i] - mx);
  return mx + std::log(s);
}

namespace detail {

struct GridObjective {
  const ModelAssembly* m;
  const std::vector<ObsSlice>* slices;
  const ApproxConfig* cfg;
  int evals = 0;

  double value(const Eigen::VectorXd& theta) {
    ++evals;
    return log_hyper_posterior(*m, theta, *slices, nullptr, *cfg).first;
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& theta, double h) {
    Eigen::VectorXd g(theta.size());
    for (int i = 0; i < theta.size(); ++i) {
      Eigen::VectorXd tp = theta, tm = theta;
      tp[i] += h;
      tm[i] -= h;
      g[i] = (value(tp) - value(tm)) / (2.0 * h);
    }
    return g;
  }
};

// Maximize the objective by BFGS with backtracking; returns the final point.
// The initial inverse Hessian is diag(prior_sd^2), so sharply informed
// priors do not force long backtracking runs on the first steps.
inline Eigen::VectorXd bfgs_maximize(GridObjective& obj, Eigen::VectorXd x,
                                     const Eigen::VectorXd& prior_sd,
                                     const ExploreConfig& cfg, Eigen::VectorXd& grad_out,
                                     bool& converged, int& iters,
                                     std::vector<std::string>& warnings) {
  const int d = static_cast<int>(x.size());
  Eigen::VectorXd g = obj.gradient(x, cfg.fd_step);
  const Eigen::MatrixXd h_init =
      prior_sd.cwiseMax(1e-3).cwiseAbs2().asDiagonal().toDenseMatrix();
  Eigen::MatrixXd h_inv = h_init;
  double fx = obj.value(x);
  converged = false;
  iters = 0;
  bool scaled = false;

  for (int iter = 0; iter < cfg.max_bfgs; ++iter) {
    if (g.cwiseAbs().maxCoeff() <= cfg.bfgs_tol) {
      converged = true;
      break;
    }
    Eigen::VectorXd p = h_inv * g;
    if (p.dot(g) <= 0.0) {  // not an ascent direction; reset
      h_inv = h_init;
      p = h_inv * g;
    }
    double t = 1.0;
    const double slope = g.dot(p);
    double fn = obj.value(x + t * p);
    int halvings = 0;
    while (!(fn >= fx + 1e-4 * t * slope) && halvings < 40) {
      t *= 0.5;
      fn = obj.value(x + t * p);
      ++halvings;
    }
    if (!(fn >= fx)) {
      warnings.push_back("mode search stalled before reaching the gradient tolerance");
      break;
    }
    const Eigen::VectorXd x_new = x + t * p;
    const Eigen::VectorXd g_new = obj.gradient(x_new, cfg.fd_step);
    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd y = g - g_new;  // minimization-form difference
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        h_inv *= sy / y.dot(h_init * y);
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
      h_inv = (eye - rho * s * y.transpose()) * h_inv * (eye - rho * y * s.transpose()) +
              rho * s * s.transpose();
    }
    const double gain = fn - fx;
    x = x_new;
    g = g_new;
    fx = fn;
    iters = iter + 1;
    // Finite-difference gradients bottom out near 1e-7 on stiff objectives,
    // so the gradient test alone can leave the loop crawling at the noise
    // floor.  A near-full step that improves the objective by less than
    // rounding noise means the mode is already located far inside the
    // resolution the grid needs.
    if (halvings <= 2 && gain <= 1e-9 * (1.0 + std::abs(fx))) {
      converged = true;
      break;
    }
  }
  if (!converged && iters == cfg.max_bfgs)
    warnings.push_back("mode search hit the iteration limit");
  grad_out = g;
  return x;
}

inline Eigen::MatrixXd neg_hessian_fd(GridObjective& obj, const Eigen::VectorXd& x, double h) {
  const int d = static_cast<int>(x.size());
  Eigen::MatrixXd hess(d, d);
  const double f0 = obj.value(x);
  for (int i = 0; i < d; ++i) {
    Eigen::VectorXd tp = x, tm = x;
    tp[i] += h;
    tm[i] -= h;
    hess(i, i) = -(obj.value(tp) - 2.0 * f0 + obj.value(tm)) / (h * h);
  }
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      Eigen::VectorXd tpp = x, tpm = x, tmp = x, tmm = x;
      tpp[i] += h; tpp[j] += h;
      tpm[i] += h; tpm[j] -= h;
      tmp[i] -= h; tmp[j] += h;
      tmm[i] -= h; tmm[j] -= h;
      const double v =
          -(obj.value(tpp) - obj.value(tpm) - obj.value(tmp) + obj.value(tmm)) / (4.0 * h * h);
      hess(i, j) = v;
      hess(j, i) = v;
    }
  return hess;
}

// Scaling S from the negative Hessian; identity on any nonpositive curvature.
inline Eigen::MatrixXd standardize_scale(const Eigen::MatrixXd& neg_hess,
                                         std::vector<std::string>& warnings) {
  const int d = static_cast<int>(neg_hess.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(neg_hess);
  if (eig.eigenvalues().minCoeff() <= 0.0) {
    warnings.push_back("curvature at the mode is not positive definite; identity scaling used");
    return Eigen::MatrixXd::Identity(d, d);
  }
  return eig.eigenvectors() * eig.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal();
}

}  // namespace detail

// Lay out support points, evaluate the log posterior at each, and assign
// integration weights.  approx_out (when given) receives the per-point
// Gaussian approximations in grid order.
inline HyperGrid explore_hyperparameters(const ModelAssembly& m,
                                         const std::vector<ObsSlice>& slices,
                                         const ExploreConfig& cfg = {},
                                         std::vector<GaussianApprox>* approx_out = nullptr) {
  const int d = m.hypers.free_dim();
  HyperGrid grid;
  grid.strategy = cfg.strategy;
  grid.z_step = cfg.z_step;
  detail::GridObjective obj{&m, &slices, &cfg.approx};

  if (d == 0) {
    grid.points.resize(1, 0);
    grid.z.resize(1, 0);
    grid.log_density.resize(1);
    grid.log_weight = Eigen::VectorXd::Zero(1);
    const Eigen::VectorXd theta;
    auto [value, g] = log_hyper_posterior(m, theta, slices, nullptr, cfg.approx);
    grid.log_density[0] = value;
    grid.feval_count = 1;
    if (approx_out) approx_out->push_back(std::move(g));
    return grid;
  }

  Eigen::VectorXd start(d), prior_sd(d);
  {
    const auto free = m.hypers.free_indices();
    for (int f = 0; f < d; ++f) {
      start[f] = m.hypers.params[free[f]].prior_mean;
      prior_sd[f] = m.hypers.params[free[f]].prior_sd;
    }
  }
  grid.mode = detail::bfgs_maximize(obj, start, prior_sd, cfg, grid.gradient,
                                    grid.mode_converged, grid.bfgs_iters, grid.warnings);
  grid.curvature = detail::neg_hessian_fd(obj, grid.mode, cfg.fd_step);
  grid.scale = detail::standardize_scale(grid.curvature, grid.warnings);
  const double log_det_scale = std::log(std::abs(grid.scale.determinant()));

  std::vector<Eigen::VectorXd> zs;
  std::vector<double> dens, logw;
  std::vector<GaussianApprox> approxes;
  auto evaluate = [&](const Eigen::VectorXd& z, double log_w) {
    const Eigen::VectorXd theta = grid.mode + grid.scale * z;
    auto [value, g] = log_hyper_posterior(m, theta, slices, nullptr, cfg.approx);
    zs.push_back(z);
    dens.push_back(value);
    logw.push_back(log_w);
    approxes.push_back(std::move(g));
    return value;
  };

  if (cfg.strategy == GridStrategy::axis_grid) {
    const double cell_logw = d * std::log(cfg.z_step) + log_det_scale;
    std::map<std::vector<int>, bool> visited;  // lattice nodes already queued
    std::deque<std::vector<int>> queue;
    const std::vector<int> origin(d, 0);
    queue.push_back(origin);
    visited[origin] = true;
    double f0 = 0.0, best = 0.0;
    bool first = true;
    while (!queue.empty()) {
      const std::vector<int> node = queue.front();
      queue.pop_front();
      Eigen::VectorXd z(d);
      for (int i = 0; i < d; ++i) z[i] = cfg.z_step * node[i];
      const double value = evaluate(z, cell_logw);
      if (first) {
        f0 = best = value;
        first = false;
      } else if (value < f0 - cfg.log_drop) {
        zs.pop_back();
        dens.pop_back();
        logw.pop_back();
        approxes.pop_back();
        continue;
      }
      best = std::max(best, value);
      if (static_cast<int>(zs.size()) >= cfg.max_points) {
        grid.warnings.push_back("axis grid truncated at the point limit");
        break;
      }
      for (int i = 0; i < d; ++i)
        for (int dir : {-1, 1}) {
          std::vector<int> next = node;
          next[i] += dir;
          if (visited.emplace(next, true).second) queue.push_back(next);
        }
    }
    // Enforce the retention threshold against the grid maximum, which can
    // exceed the quasi-Newton value by a little.
    std::vector<int> keep;
    for (int i = 0; i < static_cast<int>(zs.size()); ++i)
      if (dens[i] >= best - cfg.log_drop) keep.push_back(i);
    std::vector<Eigen::VectorXd> zs2;
    std::vector<double> dens2, logw2;
    std::vector<GaussianApprox> approxes2;
    for (int i : keep) {
      zs2.push_back(zs[i]);
      dens2.push_back(dens[i]);
      logw2.push_back(logw[i]);
      approxes2.push_back(std::move(approxes[i]));
    }
    zs = std::move(zs2);
    dens = std::move(dens2);
    logw = std::move(logw2);
    approxes = std::move(approxes2);
  } else {
    // Central-composite layout: center, axial pairs, and a factorial shell,
    // all non-center points at radius r.  Weights make the rule exact for
    // (a + b|z|^2) exp(-|z|^2/2).
    const double r = cfg.ccd_radius_unit * std::sqrt(static_cast<double>(d));
    int np = 2 * d;
    std::vector<Eigen::VectorXd> shell;
    for (int i = 0; i < d; ++i)
      for (int dir : {-1, 1}) {
        Eigen::VectorXd z = Eigen::VectorXd::Zero(d);
        z[i] = dir * r;
        shell.push_back(z);
      }
    if (d >= 2) {
      require(d <= 10, "explore_hyperparameters: factorial shell too large");
      const double f = r / std::sqrt(static_cast<double>(d));
      for (int mask = 0; mask < (1 << d); ++mask) {
        Eigen::VectorXd z(d);
        for (int i = 0; i < d; ++i) z[i] = ((mask >> i) & 1) ? f : -f;
        shell.push_back(z);
      }
      np += 1 << d;
    }
    const double half_d = 0.5 * d;
    const double w0 = std::pow(2.0 * M_PI, half_d) * (1.0 - d / (r * r));
    const double ws =
        std::pow(2.0 * M_PI, half_d) * d * std::exp(0.5 * r * r) / (np * r * r);
    evaluate(Eigen::VectorXd::Zero(d), std::log(w0) + log_det_scale);
    for (const auto& z : shell) evaluate(z, std::log(ws) + log_det_scale);
  }

  const int k = static_cast<int>(zs.size());
  grid.points.resize(k, d);
  grid.z.resize(k, d);
  grid.log_density.resize(k);
  grid.log_weight.resize(k);
  for (int i = 0; i < k; ++i) {
    grid.z.row(i) = zs[i].transpose();
    grid.points.row(i) = (grid.mode + grid.scale * zs[i]).transpose();
    grid.log_density[i] = dens[i];
    grid.log_weight[i] = logw[i];
  }
  grid.log_density.maxCoeff(&grid.mode_index);
  grid.feval_count = obj.evals;
  if (approx_out) *approx_out = std::move(approxes);
  return grid;
}

// Re-evaluate the log posterior on a fixed reference layout (same points,
// weights, and scaling), e.g. to compare methods on a shared grid.
inline HyperGrid evaluate_on_grid(const ModelAssembly& m, const std::vector<ObsSlice>& slices,
                                  const HyperGrid& ref, const ApproxConfig& cfg = {},
                                  std::vector<GaussianApprox>* approx_out = nullptr) {
  HyperGrid grid = ref;
  grid.warnings.clear();
  if (approx_out) approx_out->clear();
  for (int i = 0; i < grid.size(); ++i) {
    const Eigen::VectorXd theta = ref.points.row(i).transpose();
    auto [value, g] = log_hyper_posterior(m, theta, slices, nullptr, cfg);
    grid.log_density[i] = value;
    if (approx_out) approx_out->push_back(std::move(g));
  }
  grid.log_density.maxCoeff(&grid.mode_index);
  grid.feval_count = grid.size();
  return grid;
}

}  // namespace rlgm
