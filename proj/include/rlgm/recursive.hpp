#pragma once

// Recursive inference over data partitions: support points are fixed by the
// first partition; each later partition updates, per point, the latent
// Gaussian posterior (used as the next prior) and accumulates the
// conditional log marginal likelihood onto the point's log density.  The
// original integration weights are reused at finalization.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "rlgm/marginals.hpp"

namespace rlgm {

struct DriftDiagnostics {
  double mode_shift = 0.0;  // standardized distance from the center to the argmax point
  double boundary_mass_fraction = 0.0;  // normalized mass on the outermost shell
  bool flagged = false;
};

struct StepRecord {
  int step = 0;   // partition counter, 1-based
  int point = 0;  // support-point index
  double cond_lml = 0.0;
  int newton_iters = 0;
  bool converged = true;
  bool factor_failed = false;
  double mode_shift = 0.0;
  double boundary_mass = 0.0;
};

struct RecursiveConfig {
  FitConfig fit;
  double boundary_flag_threshold = 0.2;
  bool drop_factors = true;  // keep only mode/precision/normalizer per point
};

struct RecursiveState {
  std::shared_ptr<const ModelAssembly> model;
  RecursiveConfig config;
  HyperGrid grid;  // points/weights fixed at init; log_density accumulates
  std::vector<GaussianApprox> priors;  // per point; the next step's latent priors
  std::vector<bool> excluded;          // factorization failed at some step
  Eigen::VectorXd initial_log_density;
  // history[0] holds the initial per-point log densities; history[i] for
  // i >= 1 holds the conditional log marginal likelihoods of partition i+1.
  std::vector<std::vector<double>> history;
  std::vector<DriftDiagnostics> drift;  // one entry per absorbed partition
  std::vector<StepRecord> trace;
  int step_count = 0;
  int feval_total = 0;
};

inline DriftDiagnostics mode_shift_diagnostic(const RecursiveState& state) {
  DriftDiagnostics d;
  const auto& grid = state.grid;
  if (grid.size() <= 1 || grid.dim() == 0) return d;
  const Eigen::VectorXd norms = grid.z.rowwise().norm();
  int argmax = 0;
  grid.log_density.maxCoeff(&argmax);
  d.mode_shift = norms[argmax];

  const double rmax = norms.maxCoeff();
  if (rmax > 1e-12) {
    const Eigen::VectorXd mass = grid.masses();
    for (int i = 0; i < grid.size(); ++i)
      if (norms[i] >= rmax - 1e-9) d.boundary_mass_fraction += mass[i];
  }
  d.flagged = d.boundary_mass_fraction > state.config.boundary_flag_threshold;
  return d;
}

inline RecursiveState init_recursion(std::shared_ptr<const ModelAssembly> model,
                                     const ObsSelection& partition1,
                                     const RecursiveConfig& cfg = {}) {
  RecursiveState state;
  state.model = std::move(model);
  state.config = cfg;
  auto slices = make_slices(*state.model, partition1);
  require(!slices.empty(), "init_recursion: first partition has no observations");

  state.grid =
      explore_hyperparameters(*state.model, slices, cfg.fit.explore, &state.priors);
  if (cfg.drop_factors)
    for (auto& g : state.priors) g.factor.reset();
  state.excluded.assign(state.grid.size(), false);
  state.initial_log_density = state.grid.log_density;
  state.feval_total = state.grid.feval_count;
  state.step_count = 1;

  std::vector<double> first(state.grid.size());
  for (int k = 0; k < state.grid.size(); ++k) first[k] = state.grid.log_density[k];
  state.history.push_back(std::move(first));
  const DriftDiagnostics d = mode_shift_diagnostic(state);
  state.drift.push_back(d);
  for (int k = 0; k < state.grid.size(); ++k) {
    StepRecord r;
    r.step = 1;
    r.point = k;
    r.cond_lml = state.grid.log_density[k];
    r.newton_iters = state.priors[k].newton_iters;
    r.converged = state.priors[k].converged;
    r.mode_shift = d.mode_shift;
    r.boundary_mass = d.boundary_mass_fraction;
    state.trace.push_back(r);
  }
  return state;
}

inline RecursiveState step(RecursiveState state, const ObsSelection& partition) {
  const ModelAssembly& m = *state.model;
  auto slices = make_slices(m, partition);
  const int k_points = state.grid.size();
  state.step_count += 1;
  std::vector<double> row(k_points, 0.0);

  if (slices.empty()) {
    state.history.push_back(row);
    const DriftDiagnostics d = mode_shift_diagnostic(state);
    state.drift.push_back(d);
    for (int k = 0; k < k_points; ++k) {
      StepRecord r;
      r.step = state.step_count;
      r.point = k;
      r.mode_shift = d.mode_shift;
      r.boundary_mass = d.boundary_mass_fraction;
      state.trace.push_back(r);
    }
    return state;
  }

  const ApproxConfig& approx_cfg = state.config.fit.explore.approx;
  std::vector<StepRecord> recs(k_points);
  for (int k = 0; k < k_points; ++k) {
    const Eigen::VectorXd theta = state.grid.points.row(k).transpose();
    StepRecord& r = recs[k];
    r.step = state.step_count;
    r.point = k;
    double clml;
    try {
      GaussianApprox g = gaussian_approximation(m, theta, slices, &state.priors[k], approx_cfg);
      clml = g.loglik_at_mode + state.priors[k].log_density(g.mode) - g.log_gauss_at_mode;
      r.newton_iters = g.newton_iters;
      r.converged = g.converged;
      if (g.converged) {
        if (state.config.drop_factors) g.factor.reset();
        state.priors[k] = std::move(g);
      }
      // A non-converged point keeps its previous prior; the estimate still
      // enters the density so the flag stays visible in the trace.
    } catch (const numerical_error&) {
      clml = -std::numeric_limits<double>::infinity();
      r.converged = false;
      r.factor_failed = true;
      state.excluded[k] = true;
    }
    r.cond_lml = clml;
    row[k] = clml;
    state.grid.log_density[k] += clml;
    state.feval_total += 1;
  }
  state.grid.log_density.maxCoeff(&state.grid.mode_index);
  state.history.push_back(std::move(row));
  const DriftDiagnostics d = mode_shift_diagnostic(state);
  state.drift.push_back(d);
  for (auto& r : recs) {
    r.mode_shift = d.mode_shift;
    r.boundary_mass = d.boundary_mass_fraction;
    state.trace.push_back(r);
  }
  return state;
}

inline PosteriorSummary finalize(const RecursiveState& state) {
  const ModelAssembly& m = *state.model;
  const MarginalConfig& mcfg = state.config.fit.marginals;
  const ApproxConfig& acfg = state.config.fit.explore.approx;
  const ConstraintSystem cs = constraints(m);

  Eigen::VectorXd log_mass = state.grid.log_density + state.grid.log_weight;
  for (int k = 0; k < state.grid.size(); ++k)
    if (state.excluded[k]) log_mass[k] = -std::numeric_limits<double>::infinity();

  std::vector<const GaussianApprox*> ptrs;
  std::vector<Eigen::VectorXd> vars;
  for (int k = 0; k < state.grid.size(); ++k) {
    ptrs.push_back(&state.priors[k]);
    if (state.excluded[k])
      vars.push_back(Eigen::VectorXd::Zero(m.latent_dim));
    else
      vars.push_back(approx_marginal_variances(state.priors[k], cs, acfg));
  }

  PosteriorSummary out;
  out.method = "recursive";
  out.latent = latent_marginals_from(ptrs, vars, log_mass, mcfg);
  out.hyper = hyper_marginals(m, state.grid, mcfg, &out.warnings);
  out.log_marginal_likelihood = log_marginal_likelihood(state.grid);
  out.feval_count = state.feval_total;
  out.bfgs_iters = state.grid.bfgs_iters;
  for (const auto& r : state.trace) out.newton_iters_total += r.newton_iters;
  for (std::size_t i = 0; i < state.drift.size(); ++i)
    if (state.drift[i].flagged)
      out.warnings.push_back("support-point drift flagged at partition " +
                             std::to_string(i + 1));
  for (int k = 0; k < state.grid.size(); ++k)
    if (state.excluded[k])
      out.warnings.push_back("support point " + std::to_string(k) +
                             " excluded after factorization failure");
  out.warnings.insert(out.warnings.end(), state.grid.warnings.begin(),
                      state.grid.warnings.end());
  return out;
}

// Contiguous row partitions per observation block: partition i receives the
// i-th chunk of each block's rows in order.  With rows laid out time-major
// this is a partition into consecutive time windows.
inline std::vector<ObsSelection> contiguous_partitions(const ModelAssembly& m, int n_parts) {
  require(n_parts >= 1, "contiguous_partitions: need at least one partition");
  std::vector<ObsSelection> out(n_parts);
  for (auto& sel : out) sel.rows.resize(m.obs.size());
  for (std::size_t b = 0; b < m.obs.size(); ++b) {
    const int rows = m.obs[b].rows();
    for (int p = 0; p < n_parts; ++p) {
      const int lo = static_cast<int>(static_cast<long>(rows) * p / n_parts);
      const int hi = static_cast<int>(static_cast<long>(rows) * (p + 1) / n_parts);
      for (int r = lo; r < hi; ++r) out[p].rows[b].push_back(r);
    }
  }
  return out;
}

}  // namespace rlgm
