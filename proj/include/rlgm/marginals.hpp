#pragma once

// Posterior marginals: per-node Gaussian mixtures over the support points,
// per-hyperparameter densities from the grid (interpolated on the
// standardized layout, mapped to the natural scale by the transform
// Jacobian), and the composed fit driver.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "rlgm/grid.hpp"

namespace rlgm {

struct LatentMarginal {
  double mean = 0.0;
  double sd = 0.0;
  Eigen::VectorXd grid;     // abscissae
  Eigen::VectorXd density;  // normalized on the grid
};

struct HyperMarginal {
  std::string name;
  Transform transform = Transform::log_scale;
  Eigen::VectorXd internal_grid, internal_density;
  Eigen::VectorXd natural_grid, natural_density;
  double internal_mean = 0.0, internal_sd = 0.0;
  double natural_mean = 0.0, natural_sd = 0.0;
  // argmax refined by a log-density parabola in internal coordinates, then
  // pushed through the transform
  double mode_internal = 0.0, mode_natural = 0.0;
};

struct PosteriorSummary {
  std::string method = "laplace_full";
  std::vector<LatentMarginal> latent;  // per node, model order
  std::vector<HyperMarginal> hyper;    // per free hyperparameter, layout order
  double log_marginal_likelihood = 0.0;
  double runtime_seconds = 0.0;
  int newton_iters_total = 0;
  int feval_count = 0;
  int bfgs_iters = 0;
  std::vector<std::string> warnings;
};

struct MarginalConfig {
  int latent_grid_points = 61;
  double latent_span_sd = 5.0;
  int hyper_grid_points = 201;
  double hyper_span_sd = 4.5;  // span of moment-matched Gaussian grids
};

namespace detail {

inline double trapezoid(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  double s = 0.0;
  for (int i = 0; i + 1 < x.size(); ++i) s += 0.5 * (y[i] + y[i + 1]) * (x[i + 1] - x[i]);
  return s;
}

inline double gauss_pdf(double x, double mean, double var) {
  const double v = std::max(var, 1e-300);
  const double r = x - mean;
  return std::exp(-0.5 * r * r / v) / std::sqrt(2.0 * M_PI * v);
}

// One-dimensional mixture summary over support points.
inline LatentMarginal mixture_1d(const Eigen::VectorXd& means, const Eigen::VectorXd& vars,
                                 const Eigen::VectorXd& weights, const MarginalConfig& cfg) {
  LatentMarginal out;
  out.mean = weights.dot(means);
  double second = 0.0;
  for (int k = 0; k < means.size(); ++k)
    second += weights[k] * (vars[k] + means[k] * means[k]);
  out.sd = std::sqrt(std::max(second - out.mean * out.mean, 0.0));
  const double span = cfg.latent_span_sd * std::max(out.sd, 1e-8);
  out.grid = Eigen::VectorXd::LinSpaced(cfg.latent_grid_points, out.mean - span, out.mean + span);
  out.density.setZero(out.grid.size());
  for (int k = 0; k < means.size(); ++k) {
    if (weights[k] <= 0.0) continue;
    for (int j = 0; j < out.grid.size(); ++j)
      out.density[j] += weights[k] * gauss_pdf(out.grid[j], means[k], vars[k]);
  }
  return out;
}

// Normalized linear interpolation of (position, mass) pairs onto a uniform
// grid; the 1-d workhorse behind the hyperparameter marginals.
inline void interp_density(std::vector<std::pair<double, double>> pts, int n_grid,
                           Eigen::VectorXd& grid, Eigen::VectorXd& density) {
  std::sort(pts.begin(), pts.end());
  const double lo = pts.front().first, hi = pts.back().first;
  grid = Eigen::VectorXd::LinSpaced(n_grid, lo, hi);
  density.resize(n_grid);
  std::size_t seg = 0;
  for (int j = 0; j < n_grid; ++j) {
    const double x = grid[j];
    while (seg + 2 < pts.size() && pts[seg + 1].first < x) ++seg;
    const auto& [x0, y0] = pts[seg];
    const auto& [x1, y1] = pts[seg + 1];
    const double t = (x1 > x0) ? std::clamp((x - x0) / (x1 - x0), 0.0, 1.0) : 0.0;
    density[j] = y0 + t * (y1 - y0);
  }
  const double mass = trapezoid(grid, density);
  if (mass > 0.0) density /= mass;
}

inline void density_moments(const Eigen::VectorXd& grid, const Eigen::VectorXd& density,
                            double& mean, double& sd) {
  Eigen::VectorXd xg = grid.cwiseProduct(density);
  mean = trapezoid(grid, xg);
  Eigen::VectorXd x2g = grid.cwiseProduct(xg);
  sd = std::sqrt(std::max(trapezoid(grid, x2g) - mean * mean, 0.0));
}

inline HyperMarginal finish_hyper_marginal(const std::string& name, Transform t,
                                           Eigen::VectorXd grid, Eigen::VectorXd density) {
  HyperMarginal out;
  out.name = name;
  out.transform = t;
  out.internal_grid = std::move(grid);
  out.internal_density = std::move(density);
  density_moments(out.internal_grid, out.internal_density, out.internal_mean, out.internal_sd);
  const int n = static_cast<int>(out.internal_grid.size());
  out.natural_grid.resize(n);
  out.natural_density.resize(n);
  for (int j = 0; j < n; ++j) {
    const double nat = to_natural(t, out.internal_grid[j]);
    out.natural_grid[j] = nat;
    out.natural_density[j] = out.internal_density[j] * transform_jacobian(t, nat);
  }
  density_moments(out.natural_grid, out.natural_density, out.natural_mean, out.natural_sd);
  int arg = 0;
  out.internal_density.maxCoeff(&arg);
  out.mode_internal = out.internal_grid[arg];
  if (arg > 0 && arg + 1 < n) {
    const double dl = out.internal_density[arg - 1], dc = out.internal_density[arg],
                 dr = out.internal_density[arg + 1];
    if (dl > 0.0 && dc > 0.0 && dr > 0.0) {
      const double xl = out.internal_grid[arg - 1], xc = out.internal_grid[arg],
                   xr = out.internal_grid[arg + 1];
      const double yl = std::log(dl), yc = std::log(dc), yr = std::log(dr);
      // vertex of the parabola through three (x, log density) points
      const double num = (yl - yc) * (xr - xc) * (xr + xc) - (yr - yc) * (xl - xc) * (xl + xc);
      const double den = 2.0 * ((yl - yc) * (xr - xc) - (yr - yc) * (xl - xc));
      if (std::abs(den) > 0.0) {
        const double v = num / den;
        if (v >= xl && v <= xr) out.mode_internal = v;
      }
    }
  }
  out.mode_natural = to_natural(t, out.mode_internal);
  return out;
}

inline HyperMarginal moment_gaussian_marginal(const std::string& name, Transform t, double mean,
                                              double sd, const MarginalConfig& cfg) {
  const double span = cfg.hyper_span_sd * std::max(sd, 1e-8);
  Eigen::VectorXd grid =
      Eigen::VectorXd::LinSpaced(cfg.hyper_grid_points, mean - span, mean + span);
  Eigen::VectorXd density(grid.size());
  for (int j = 0; j < grid.size(); ++j) density[j] = gauss_pdf(grid[j], mean, sd * sd);
  density /= trapezoid(grid, density);
  return finish_hyper_marginal(name, t, std::move(grid), std::move(density));
}

}  // namespace detail

// Per-node posterior mixture over support points.  vars[k] must hold the
// marginal variances of approxes[k]; log_mass is the unnormalized per-point
// log weight (density + integration weight), with -inf excluding a point.
inline std::vector<LatentMarginal> latent_marginals_from(
    const std::vector<const GaussianApprox*>& approxes, const std::vector<Eigen::VectorXd>& vars,
    Eigen::VectorXd log_mass, const MarginalConfig& cfg = {}) {
  const int k = static_cast<int>(approxes.size());
  require(k > 0 && static_cast<int>(vars.size()) == k && log_mass.size() == k,
          "latent_marginals_from: misaligned inputs");
  const double mx = log_mass.maxCoeff();
  require(std::isfinite(mx), "latent_marginals_from: no usable support points");
  Eigen::VectorXd w(k);
  for (int i = 0; i < k; ++i) w[i] = std::exp(log_mass[i] - mx);
  w /= w.sum();

  const int n = static_cast<int>(approxes[0]->mode.size());
  std::vector<LatentMarginal> out;
  out.reserve(n);
  Eigen::VectorXd means(k), node_vars(k);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      means[j] = approxes[j]->mode[i];
      node_vars[j] = vars[j][i];
    }
    out.push_back(detail::mixture_1d(means, node_vars, w, cfg));
  }
  return out;
}

inline std::vector<LatentMarginal> latent_marginals(const ModelAssembly& m, const HyperGrid& grid,
                                                    const std::vector<GaussianApprox>& approxes,
                                                    const MarginalConfig& cfg = {},
                                                    const ApproxConfig& approx_cfg = {}) {
  require(static_cast<int>(approxes.size()) == grid.size(),
          "latent_marginals: approxes misaligned with grid");
  const ConstraintSystem cs = constraints(m);
  std::vector<const GaussianApprox*> ptrs;
  std::vector<Eigen::VectorXd> vars;
  for (const auto& g : approxes) {
    ptrs.push_back(&g);
    vars.push_back(approx_marginal_variances(g, cs, approx_cfg));
  }
  return latent_marginals_from(ptrs, vars, grid.log_density + grid.log_weight, cfg);
}

// Marginal of a fixed linear combination w'x, mixing the per-point Gaussian
// laws of w'x over the support points.
inline LatentMarginal linear_combination_marginal(const ModelAssembly& m, const HyperGrid& grid,
                                                  const std::vector<GaussianApprox>& approxes,
                                                  const Eigen::VectorXd& w,
                                                  const MarginalConfig& cfg = {},
                                                  const ApproxConfig& approx_cfg = {}) {
  require(w.size() == m.latent_dim, "linear_combination_marginal: weight length mismatch");
  const ConstraintSystem cs = constraints(m);
  const int k = grid.size();
  Eigen::VectorXd means(k), vars(k);
  for (int j = 0; j < k; ++j) {
    const auto& g = approxes[j];
    means[j] = w.dot(g.mode);
    std::shared_ptr<const CholeskyFactor> f = g.factor;
    if (!f) f = std::make_shared<CholeskyFactor>(cholesky(g.precision, approx_cfg.jitter));
    const Eigen::VectorXd s = f->solve(w);
    double var = w.dot(s);
    if (cs.count() > 0) {
      Eigen::MatrixXd v;
      detail::constraint_log_det(*f, cs, nullptr, &v);
      const Eigen::VectorXd u = cs.a * s;
      var -= u.dot(v.llt().solve(u));
    }
    vars[j] = std::max(var, 0.0);
  }
  Eigen::VectorXd log_mass = grid.log_density + grid.log_weight;
  const double mx = log_mass.maxCoeff();
  Eigen::VectorXd wk = (log_mass.array() - mx).exp();
  wk /= wk.sum();
  return detail::mixture_1d(means, vars, wk, cfg);
}

// Per-hyperparameter marginal densities from the grid layout.
inline std::vector<HyperMarginal> hyper_marginals(const ModelAssembly& m, const HyperGrid& grid,
                                                  const MarginalConfig& cfg = {},
                                                  std::vector<std::string>* warnings = nullptr) {
  const int d = grid.dim();
  std::vector<HyperMarginal> out;
  if (d == 0) return out;
  const auto free = m.hypers.free_indices();
  const Eigen::VectorXd rel = (grid.log_density.array() - grid.log_density.maxCoeff()).exp();

  for (int f = 0; f < d; ++f) {
    const auto& param = m.hypers.params[free[f]];

    if (d == 1) {
      std::vector<std::pair<double, double>> pts;
      for (int i = 0; i < grid.size(); ++i) pts.emplace_back(grid.points(i, 0), rel[i]);
      Eigen::VectorXd g, dens;
      detail::interp_density(std::move(pts), cfg.hyper_grid_points, g, dens);
      out.push_back(detail::finish_hyper_marginal(param.name, param.transform, g, dens));
      continue;
    }

    // Summarize axis f by weighted moments of the support cloud and report
    // the matched Gaussian.  Collapsing lattice slices through the scale
    // matrix instead is exact only when the mass sits centered at grid.mode,
    // which fails for grids whose density was accumulated after freezing
    // (the mode drifts off the original center); raw-position moments are
    // exact for Gaussian mass wherever it lies, and the ccd design
    // integrates quadratics exactly under the same reading.
    const Eigen::VectorXd w = grid.masses();
    const double mean = w.dot(grid.points.col(f));
    double var = 0.0;
    for (int i = 0; i < grid.size(); ++i) {
      const double r = grid.points(i, f) - mean;
      var += w[i] * r * r;
    }
    out.push_back(detail::moment_gaussian_marginal(param.name, param.transform, mean,
                                                   std::sqrt(std::max(var, 1e-16)), cfg));
  }
  return out;
}

struct FitConfig {
  ExploreConfig explore;
  MarginalConfig marginals;
};

struct FitResult {
  PosteriorSummary summary;
  HyperGrid grid;
  std::vector<GaussianApprox> approxes;  // per support point
};

inline FitResult fit_on(const ModelAssembly& m, const ObsSelection& sel,
                        const FitConfig& cfg = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  FitResult out;
  auto slices = make_slices(m, sel);
  out.grid = explore_hyperparameters(m, slices, cfg.explore, &out.approxes);
  out.summary.latent =
      latent_marginals(m, out.grid, out.approxes, cfg.marginals, cfg.explore.approx);
  out.summary.hyper = hyper_marginals(m, out.grid, cfg.marginals, &out.summary.warnings);
  out.summary.log_marginal_likelihood = log_marginal_likelihood(out.grid);
  out.summary.feval_count = out.grid.feval_count;
  out.summary.bfgs_iters = out.grid.bfgs_iters;
  for (const auto& g : out.approxes) out.summary.newton_iters_total += g.newton_iters;
  out.summary.warnings.insert(out.summary.warnings.end(), out.grid.warnings.begin(),
                              out.grid.warnings.end());
  out.summary.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline FitResult fit(const ModelAssembly& m, const FitConfig& cfg = {}) {
  return fit_on(m, ObsSelection::all(m), cfg);
}

}  // namespace rlgm
