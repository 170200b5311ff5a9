#pragma once

// Sequential-consensus baseline: per-partition fits chained through moment
// updates of fixed-effect and hyperparameter priors, followed by a consensus
// combination of the random-effect posteriors, either per node by precision
// weighting or jointly by summing precision matrices.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <chrono>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rlgm/marginals.hpp"

namespace rlgm {

struct MomentSummary {
  double mean = 0.0;
  double precision = 1.0;
};

struct GaussianBelief {
  Eigen::VectorXd mean;
  SparseSymmetric precision;
};

// Gaussian moment form of chaining a partition posterior onto a prior: the
// data information is extracted as the precision increment over the prior the
// partition was fit under, then recombined.  Algebraically this returns the
// partition posterior when the inputs are consistent; the value of the
// routine is the validation and the explicit increment semantics.
inline MomentSummary moment_update(const MomentSummary& prior,
                                   const MomentSummary& partition_posterior) {
  require(prior.precision > 0.0 && partition_posterior.precision > 0.0,
          "moment_update: precisions must be positive");
  const double incr = partition_posterior.precision - prior.precision;
  require(incr >= -1e-9 * prior.precision,
          "moment_update: partition posterior is less precise than its prior");
  if (incr <= 0.0) return prior;
  const double data_mean =
      (partition_posterior.precision * partition_posterior.mean - prior.precision * prior.mean) /
      incr;
  MomentSummary out;
  out.precision = prior.precision + incr;
  out.mean = (prior.precision * prior.mean + incr * data_mean) / out.precision;
  return out;
}

// Per-node precision-weighted consensus across partitions: weights
// w_j = tau_j / sum tau, combined precision sum tau.
inline std::vector<MomentSummary> marginal_consensus(
    const std::vector<Eigen::VectorXd>& means, const std::vector<Eigen::VectorXd>& precisions) {
  require(!means.empty() && means.size() == precisions.size(),
          "marginal_consensus: need matching nonempty partition lists");
  const Eigen::Index n = means.front().size();
  for (std::size_t j = 0; j < means.size(); ++j) {
    require(means[j].size() == n && precisions[j].size() == n,
            "marginal_consensus: partition length mismatch");
    require(precisions[j].minCoeff() > 0.0, "marginal_consensus: precisions must be positive");
  }
  std::vector<MomentSummary> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double tau_sum = 0.0, weighted = 0.0;
    for (std::size_t j = 0; j < means.size(); ++j) {
      tau_sum += precisions[j][i];
      weighted += precisions[j][i] * means[j][i];
    }
    out[static_cast<std::size_t>(i)] = {weighted / tau_sum, tau_sum};
  }
  return out;
}

// Joint consensus: Q = sum Q_j, mu = Q^-1 sum Q_j mu_j.
inline GaussianBelief multivariate_consensus(const std::vector<GaussianBelief>& beliefs,
                                             const JitterPolicy& jitter = {}) {
  require(!beliefs.empty(), "multivariate_consensus: need at least one belief");
  const int dim = beliefs.front().precision.dim();
  for (const auto& b : beliefs)
    require(b.precision.dim() == dim && b.mean.size() == dim,
            "multivariate_consensus: dimension mismatch");
  if (beliefs.size() == 1) return beliefs.front();

  Eigen::SparseMatrix<double> q_sum = beliefs.front().precision.full();
  Eigen::VectorXd rhs = q_sum * beliefs.front().mean;
  for (std::size_t j = 1; j < beliefs.size(); ++j) {
    const Eigen::SparseMatrix<double> qj = beliefs[j].precision.full();
    q_sum += qj;
    rhs += qj * beliefs[j].mean;
  }
  GaussianBelief out;
  out.precision = SparseSymmetric::from_full(q_sum);
  out.mean = cholesky(out.precision, jitter).solve(rhs);
  return out;
}

struct ConsensusConfig {
  FitConfig fit;
  bool multivariate = true;  // false: per-node precision weighting
};

// Runs the laplace engine partition by partition.  Between partitions the
// fixed-effect and free-hyperparameter priors of a working model copy are
// replaced by the partition's posterior moments (internal scale for hypers).
// Random-effect nodes are combined afterwards from the per-partition
// posteriors at each fit's modal support point; beliefs after the first have
// the prior they were fit under subtracted so its information enters the
// fold exactly once.
inline PosteriorSummary sequential_consensus_fit(const ModelAssembly& m,
                                                 const std::vector<ObsSelection>& partitions,
                                                 const ConsensusConfig& cfg = {}) {
  require(!partitions.empty(), "sequential_consensus_fit: need at least one partition");
  const auto t0 = std::chrono::steady_clock::now();

  if (partitions.size() == 1) {
    auto res = fit_on(m, partitions.front(), cfg.fit);
    res.summary.method = "sequential_consensus";
    return res.summary;
  }

  std::vector<bool> is_fixed(static_cast<std::size_t>(m.latent_dim), false);
  for (std::size_t b = 0; b < m.blocks.size(); ++b)
    if (m.blocks[b].kind == BlockKind::fixed_effect)
      for (int i = 0; i < m.blocks[b].size(); ++i)
        is_fixed[static_cast<std::size_t>(m.offsets[b] + i)] = true;

  PosteriorSummary out;
  out.method = "sequential_consensus";

  ModelAssembly cur = m;
  const int parts = static_cast<int>(partitions.size());
  std::vector<Eigen::VectorXd> part_means, part_precs;
  Eigen::SparseMatrix<double> q_acc(m.latent_dim, m.latent_dim);
  Eigen::VectorXd b_acc = Eigen::VectorXd::Zero(m.latent_dim);
  FitResult last;

  for (int j = 0; j < parts; ++j) {
    auto res = fit_on(cur, partitions[static_cast<std::size_t>(j)], cfg.fit);

    const GaussianApprox& g = res.approxes[static_cast<std::size_t>(res.grid.mode_index)];
    const Eigen::SparseMatrix<double> qj = g.precision.full();
    if (j == 0) {
      q_acc = qj;
      b_acc = qj * g.mode;
    } else {
      const Eigen::VectorXd theta = res.grid.points.row(res.grid.mode_index).transpose();
      const Eigen::SparseMatrix<double> qp = prior_precision(cur, theta).full();
      q_acc += qj - qp;
      b_acc += qj * g.mode - qp * prior_mean(cur);
    }

    Eigen::VectorXd mj(m.latent_dim), pj(m.latent_dim);
    for (int i = 0; i < m.latent_dim; ++i) {
      mj[i] = res.summary.latent[static_cast<std::size_t>(i)].mean;
      const double sd = std::max(res.summary.latent[static_cast<std::size_t>(i)].sd, 1e-150);
      pj[i] = 1.0 / (sd * sd);
    }
    part_means.push_back(std::move(mj));
    part_precs.push_back(std::move(pj));

    out.log_marginal_likelihood += res.summary.log_marginal_likelihood;
    out.newton_iters_total += res.summary.newton_iters_total;
    out.feval_count += res.summary.feval_count;
    out.bfgs_iters += res.summary.bfgs_iters;
    out.warnings.insert(out.warnings.end(), res.summary.warnings.begin(),
                        res.summary.warnings.end());

    if (j + 1 < parts) {
      // Chain hyperparameter priors on the internal scale.
      for (const auto& h : res.summary.hyper) {
        const int idx = cur.hypers.index_of(h.name);
        require(idx >= 0, "sequential_consensus_fit: marginal for unknown hyperparameter");
        cur.hypers.params[static_cast<std::size_t>(idx)].prior_mean = h.internal_mean;
        cur.hypers.params[static_cast<std::size_t>(idx)].prior_sd =
            std::max(h.internal_sd, 1e-4);
      }
      // Chain fixed-effect priors: posterior means, and the block precision
      // scalar when its binding is a fixed hyperparameter.
      for (std::size_t b = 0; b < cur.blocks.size(); ++b) {
        if (cur.blocks[b].kind != BlockKind::fixed_effect) continue;
        auto& blk = cur.blocks[b];
        Eigen::VectorXd pm(blk.size());
        double prec_sum = 0.0;
        for (int i = 0; i < blk.size(); ++i) {
          pm[i] = part_means.back()[m.offsets[b] + i];
          prec_sum += part_precs.back()[m.offsets[b] + i];
        }
        blk.prior_mean = pm;
        const int hidx = cur.hypers.index_of(blk.hyper.at("log_tau"));
        auto& hp = cur.hypers.params[static_cast<std::size_t>(hidx)];
        if (hp.fixed) hp.fixed = std::log(prec_sum / blk.size());
      }
    }
    if (j + 1 == parts) last = std::move(res);
  }

  // Multivariate mode folds the whole latent field, fixed effects included,
  // so every node reports from the fold.  Marginal mode's per-node weighting
  // is meant for random effects; fixed-effect nodes keep the chained moment
  // update, which is the final partition's posterior marginal.
  Eigen::VectorXd cons_mean(m.latent_dim), cons_var(m.latent_dim);
  if (cfg.multivariate) {
    GaussianApprox fold;
    fold.precision = SparseSymmetric::from_full(q_acc);
    fold.factor = std::make_shared<CholeskyFactor>(
        cholesky(fold.precision, cfg.fit.explore.approx.jitter));
    fold.mode = fold.factor->solve(b_acc);
    const ConstraintSystem cs = constraints(m);
    if (cs.count() > 0) fold.mode = detail::constrain_point(*fold.factor, cs, fold.mode);
    cons_mean = fold.mode;
    cons_var = approx_marginal_variances(fold, cs, cfg.fit.explore.approx);
  } else {
    auto per_node = marginal_consensus(part_means, part_precs);
    for (int i = 0; i < m.latent_dim; ++i) {
      cons_mean[i] = per_node[static_cast<std::size_t>(i)].mean;
      cons_var[i] = 1.0 / per_node[static_cast<std::size_t>(i)].precision;
    }
  }

  out.latent.resize(static_cast<std::size_t>(m.latent_dim));
  const Eigen::VectorXd one = Eigen::VectorXd::Ones(1);
  for (int i = 0; i < m.latent_dim; ++i) {
    if (!cfg.multivariate && is_fixed[static_cast<std::size_t>(i)]) {
      out.latent[static_cast<std::size_t>(i)] = last.summary.latent[static_cast<std::size_t>(i)];
    } else {
      out.latent[static_cast<std::size_t>(i)] = detail::mixture_1d(
          Eigen::VectorXd::Constant(1, cons_mean[i]), Eigen::VectorXd::Constant(1, cons_var[i]),
          one, cfg.fit.marginals);
    }
  }
  out.hyper = last.summary.hyper;
  out.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace rlgm
