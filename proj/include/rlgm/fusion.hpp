#pragma once

// Change-of-support machinery: aggregation operators that map fine latent
// nodes to coarse observations (regional means or totals, time intervals,
// space-time voxels, categorical regroupings, nested areal predictors), the
// correlated-expert covariance block, and joint-model assembly where coarse
// sources load on the shared field through a scaled operator plus optional
// residual and expert-bias terms.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rlgm/model.hpp"

namespace rlgm {

struct Region {
  std::string id;
  std::vector<int> member_points;  // indices into a site list
  double measure = 1.0;            // |C|: area, length, or volume
};

enum class AggregationMode { mean, total };

struct AggregationOperator {
  Eigen::SparseMatrix<double> matrix;  // coarse rows, fine columns
  AggregationMode mode = AggregationMode::mean;
  std::string provenance;

  int rows() const { return static_cast<int>(matrix.rows()); }
  int cols() const { return static_cast<int>(matrix.cols()); }
};

namespace detail {

inline AggregationOperator regions_to_operator(int n_sites, const std::vector<Region>& regions,
                                               AggregationMode mode, const char* provenance) {
  require(n_sites >= 1, "aggregation: need at least one site");
  require(!regions.empty(), "aggregation: need at least one region");
  std::vector<Triplet> t;
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const auto& reg = regions[r];
    require(!reg.member_points.empty(), "aggregation: region " + reg.id + " has no members");
    require(reg.measure > 0.0, "aggregation: region " + reg.id + " needs positive measure");
    const double w =
        mode == AggregationMode::mean ? 1.0 / static_cast<double>(reg.member_points.size()) : 1.0;
    for (int p : reg.member_points) {
      require(p >= 0 && p < n_sites, "aggregation: region " + reg.id + " indexes outside sites");
      t.emplace_back(static_cast<int>(r), p, w);
    }
  }
  AggregationOperator out;
  out.matrix.resize(static_cast<int>(regions.size()), n_sites);
  out.matrix.setFromTriplets(t.begin(), t.end());
  out.matrix.makeCompressed();
  out.mode = mode;
  out.provenance = provenance;
  return out;
}

}  // namespace detail

// Areal aggregation over lattice sites: mean rows average member columns,
// total rows sum them.
inline AggregationOperator build_areal_operator(int n_sites, const std::vector<Region>& regions,
                                                AggregationMode mode = AggregationMode::mean) {
  return detail::regions_to_operator(n_sites, regions, mode, "areal");
}

// Interval aggregation on an ordered timeline: membership is every time
// point inside [t1, t2].  Intervals may be irregular, overlap, and cover the
// timeline only partially.
inline AggregationOperator build_interval_operator(
    const Eigen::VectorXd& timeline, const std::vector<std::pair<double, double>>& intervals,
    AggregationMode mode = AggregationMode::mean) {
  require(timeline.size() >= 1, "interval aggregation: empty timeline");
  for (int i = 0; i + 1 < timeline.size(); ++i)
    require(timeline[i] < timeline[i + 1], "interval aggregation: timeline must be increasing");
  std::vector<Region> regions;
  regions.reserve(intervals.size());
  for (std::size_t r = 0; r < intervals.size(); ++r) {
    const auto& [t1, t2] = intervals[r];
    require(t1 < t2, "interval aggregation: interval end must exceed start");
    Region reg;
    reg.id = "interval_" + std::to_string(r);
    reg.measure = t2 - t1;
    for (int i = 0; i < timeline.size(); ++i)
      if (timeline[i] >= t1 && timeline[i] <= t2) reg.member_points.push_back(i);
    require(!reg.member_points.empty(),
            "interval aggregation: interval " + std::to_string(r) + " contains no time points");
    regions.push_back(std::move(reg));
  }
  auto out = detail::regions_to_operator(static_cast<int>(timeline.size()), regions, mode,
                                         "interval");
  return out;
}

// Space-time voxels are regions over flattened site indices
// (site = cell * n_time + time or any fixed flattening the caller uses).
inline AggregationOperator build_voxel_operator(int n_spacetime_sites,
                                                const std::vector<Region>& voxels,
                                                AggregationMode mode = AggregationMode::mean) {
  return detail::regions_to_operator(n_spacetime_sites, voxels, mode, "voxel");
}

struct CategoricalGrouping {
  int fine_levels = 0;
  std::vector<std::vector<int>> groups;       // disjoint member sets
  std::vector<std::vector<double>> weights;   // per group, aligned with members
};

enum class CategoricalMode { balanced, normalized };

// Level regrouping: balanced rows emit weight 1 per member (plain sums);
// normalized rows emit the supplied simplex weights.
inline AggregationOperator build_categorical_operator(const CategoricalGrouping& grouping,
                                                      CategoricalMode mode) {
  require(grouping.fine_levels >= 1, "categorical aggregation: need fine levels");
  require(!grouping.groups.empty(), "categorical aggregation: need at least one group");
  std::set<int> used;
  std::vector<Triplet> t;
  for (std::size_t g = 0; g < grouping.groups.size(); ++g) {
    const auto& members = grouping.groups[g];
    require(!members.empty(), "categorical aggregation: empty group");
    if (mode == CategoricalMode::normalized) {
      require(grouping.weights.size() == grouping.groups.size() &&
                  grouping.weights[g].size() == members.size(),
              "categorical aggregation: weights misaligned with groups");
      double sum = 0.0;
      for (double w : grouping.weights[g]) {
        require(w >= 0.0, "categorical aggregation: negative weight");
        sum += w;
      }
      require(std::abs(sum - 1.0) <= 1e-9,
              "categorical aggregation: group weights must sum to one");
    }
    for (std::size_t i = 0; i < members.size(); ++i) {
      const int lvl = members[i];
      require(lvl >= 0 && lvl < grouping.fine_levels,
              "categorical aggregation: level outside range");
      require(used.insert(lvl).second, "categorical aggregation: groups must be disjoint");
      const double w = mode == CategoricalMode::balanced ? 1.0 : grouping.weights[g][i];
      t.emplace_back(static_cast<int>(g), lvl, w);
    }
  }
  AggregationOperator out;
  out.matrix.resize(static_cast<int>(grouping.groups.size()), grouping.fine_levels);
  out.matrix.setFromTriplets(t.begin(), t.end());
  out.matrix.makeCompressed();
  out.mode = AggregationMode::total;
  out.provenance = "categorical";
  return out;
}

// Nested areal predictor: coarse rows mix their contained fine regions by
// measure share |B_k|/|C_j|.  Coarse member_points index the FINE regions.
inline AggregationOperator nested_areal_weights(const std::vector<Region>& fine,
                                                const std::vector<Region>& coarse) {
  require(!fine.empty() && !coarse.empty(), "nested areal: need fine and coarse regions");
  std::set<int> assigned;
  std::vector<Triplet> t;
  for (std::size_t j = 0; j < coarse.size(); ++j) {
    const auto& c = coarse[j];
    require(!c.member_points.empty(), "nested areal: coarse region " + c.id + " is empty");
    require(c.measure > 0.0, "nested areal: coarse region " + c.id + " needs positive measure");
    double covered = 0.0;
    for (int k : c.member_points) {
      require(k >= 0 && k < static_cast<int>(fine.size()),
              "nested areal: fine index outside range");
      require(assigned.insert(k).second,
              "nested areal: fine region assigned to more than one coarse region");
      covered += fine[static_cast<std::size_t>(k)].measure;
      t.emplace_back(static_cast<int>(j), k,
                     fine[static_cast<std::size_t>(k)].measure / c.measure);
    }
    require(std::abs(covered - c.measure) <= 1e-9 * std::max(1.0, c.measure),
            "nested areal: fine measures do not add up to coarse region " + c.id);
  }
  AggregationOperator out;
  out.matrix.resize(static_cast<int>(coarse.size()), static_cast<int>(fine.size()));
  out.matrix.setFromTriplets(t.begin(), t.end());
  out.matrix.makeCompressed();
  out.mode = AggregationMode::mean;
  out.provenance = "nested";
  return out;
}

// Correlated-expert precision: covariance S_ii = 1/tau_i,
// S_ij = rho_ij / sqrt(tau_i tau_j), inverted densely.
inline Eigen::MatrixXd build_expert_covariance(const Eigen::VectorXd& taus,
                                               const Eigen::MatrixXd& rhos) {
  const int d = static_cast<int>(taus.size());
  require(d >= 1, "expert covariance: need at least one source");
  require(taus.minCoeff() > 0.0, "expert covariance: precisions must be positive");
  require(rhos.rows() == d && rhos.cols() == d, "expert covariance: correlation shape mismatch");
  Eigen::MatrixXd cov(d, d);
  for (int i = 0; i < d; ++i) {
    cov(i, i) = 1.0 / taus[i];
    for (int j = 0; j < i; ++j) {
      require(std::abs(rhos(i, j) - rhos(j, i)) <= 1e-12,
              "expert covariance: correlations must be symmetric");
      require(std::abs(rhos(i, j)) < 1.0, "expert covariance: |rho| must be below one");
      cov(i, j) = cov(j, i) = rhos(i, j) / std::sqrt(taus[i] * taus[j]);
    }
  }
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  require(llt.info() == Eigen::Success, "expert covariance: matrix not positive definite");
  return llt.solve(Eigen::MatrixXd::Identity(d, d));
}

struct SharedPredictorSpec {
  std::string alpha_binding;         // identity-transform hyper; empty fixes alpha at 1
  std::string residual_tau_binding;  // iid residual block precision; empty disables
  bool expert_member = false;        // loads one component of the expert block
  // single-node primary blocks (intercepts) entering the scaled predictor
  // with unit weight; a mean-mode operator then reproduces them unchanged
  std::vector<std::string> shared_scalar_blocks;
};

struct SecondarySource {
  ObservationBlock obs;  // design filled by assembly
  AggregationOperator op;
  std::string target_block;  // primary block the operator aggregates
  SharedPredictorSpec spec;
};

struct ExpertBlock {
  // Two dynamic sources (log_tau1, log_tau2, z_rho bindings) or any number
  // of sources with a fixed dense precision, e.g. from build_expert_covariance.
  std::vector<std::string> hyper_bindings;
  Eigen::MatrixXd fixed_precision;
  // replicates > 1 draws a fresh correlated error tuple per operator row
  // (every expert source must then have exactly this many rows); 1 keeps a
  // single tuple shared across all rows of each source.
  int replicates = 1;
};

// Joint model over the shared field plus coarse sources.  Each source's rows
// read alpha * (Operator x target block) + residual + expert bias; the model
// stays linear in the latent field at every fixed hyperparameter value.
inline ModelAssembly assemble_joint_model(const ModelAssembly& primary,
                                          const std::vector<SecondarySource>& sources,
                                          const std::vector<HyperParam>& extra_hypers = {},
                                          const std::optional<ExpertBlock>& expert = {}) {
  require(!sources.empty(), "assemble_joint_model: need at least one secondary source");

  std::vector<LatentBlockSpec> blocks = primary.blocks;
  HyperLayout layout = primary.hypers;
  for (const auto& h : extra_hypers) layout.params.push_back(h);

  int expert_members = 0;
  for (const auto& s : sources)
    if (s.spec.expert_member) ++expert_members;
  require(expert_members == 0 || expert.has_value(),
          "assemble_joint_model: expert members declared without an expert block");

  // Residual blocks first, then the expert block, appended after the
  // primary field; offsets are assigned by finalize_model.
  struct Extra {
    int offset;
    int size;
  };
  int next = primary.latent_dim;
  std::vector<Extra> residual_slots(sources.size(), {-1, 0});
  for (std::size_t s = 0; s < sources.size(); ++s) {
    if (sources[s].spec.residual_tau_binding.empty()) continue;
    LatentBlockSpec blk;
    blk.name = "residual_" + sources[s].obs.name;
    blk.kind = BlockKind::iid;
    blk.n = sources[s].op.rows();
    blk.hyper = {{"log_tau", sources[s].spec.residual_tau_binding}};
    residual_slots[s] = {next, blk.n};
    next += blk.n;
    blocks.push_back(std::move(blk));
  }
  int expert_offset = -1;
  const int replicates = expert ? expert->replicates : 1;
  if (expert_members > 0) {
    require(replicates >= 1, "assemble_joint_model: expert replicates must be positive");
    LatentBlockSpec blk;
    blk.name = "expert_bias";
    blk.kind = BlockKind::mvn_dense;
    blk.n = expert_members * replicates;
    if (!expert->hyper_bindings.empty()) {
      require(expert->hyper_bindings.size() == 3 && expert_members == 2,
              "assemble_joint_model: dynamic expert block needs two sources and "
              "(log_tau1, log_tau2, z_rho) bindings");
      blk.hyper = {{"log_tau1", expert->hyper_bindings[0]},
                   {"log_tau2", expert->hyper_bindings[1]},
                   {"z_rho", expert->hyper_bindings[2]}};
    } else {
      require(expert->fixed_precision.rows() == expert_members,
              "assemble_joint_model: expert precision size must match member count");
      blk.dense_precision = Eigen::MatrixXd::Zero(blk.n, blk.n);
      for (int r = 0; r < replicates; ++r)
        blk.dense_precision.block(r * expert_members, r * expert_members, expert_members,
                                  expert_members) = expert->fixed_precision;
    }
    expert_offset = next;
    next += blk.n;
    blocks.push_back(std::move(blk));
  }
  const int dim = next;

  // Primary observation blocks widen to the new latent dimension.
  std::vector<ObservationBlock> obs = primary.obs;
  for (auto& b : obs) {
    b.design.conservativeResize(b.design.rows(), dim);
    if (b.has_scaled_design()) b.design_scaled.conservativeResize(b.design_scaled.rows(), dim);
  }

  int expert_seen = 0;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const auto& src = sources[s];
    int target = -1;
    for (std::size_t b = 0; b < primary.blocks.size(); ++b)
      if (primary.blocks[b].name == src.target_block) target = static_cast<int>(b);
    require(target >= 0, "assemble_joint_model: unknown target block " + src.target_block);
    require(src.op.cols() == primary.blocks[static_cast<std::size_t>(target)].size(),
            "assemble_joint_model: operator columns must match the target block");
    const int rows = src.op.rows();
    require(src.obs.values.size() == rows,
            "assemble_joint_model: source values must align with operator rows");
    const int field_off = primary.offsets[static_cast<std::size_t>(target)];

    std::vector<Triplet> shared, plain;
    for (int k = 0; k < src.op.matrix.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(src.op.matrix, k); it; ++it)
        shared.emplace_back(static_cast<int>(it.row()), field_off + static_cast<int>(it.col()),
                            it.value());
    for (const auto& name : src.spec.shared_scalar_blocks) {
      int sb = -1;
      for (std::size_t b = 0; b < primary.blocks.size(); ++b)
        if (primary.blocks[b].name == name) sb = static_cast<int>(b);
      require(sb >= 0, "assemble_joint_model: unknown shared block " + name);
      require(primary.blocks[static_cast<std::size_t>(sb)].size() == 1,
              "assemble_joint_model: shared scalar block " + name + " must have one node");
      const int col = primary.offsets[static_cast<std::size_t>(sb)];
      for (int r = 0; r < rows; ++r) shared.emplace_back(r, col, 1.0);
    }
    if (residual_slots[s].size > 0)
      for (int r = 0; r < rows; ++r) plain.emplace_back(r, residual_slots[s].offset + r, 1.0);
    if (src.spec.expert_member) {
      if (replicates > 1) {
        require(rows == replicates,
                "assemble_joint_model: expert source rows must match the replicate count");
        for (int r = 0; r < rows; ++r)
          plain.emplace_back(r, expert_offset + r * expert_members + expert_seen, 1.0);
      } else {
        for (int r = 0; r < rows; ++r) plain.emplace_back(r, expert_offset + expert_seen, 1.0);
      }
      ++expert_seen;
    }

    ObservationBlock b = src.obs;
    if (src.spec.alpha_binding.empty()) {
      // alpha fixed at one: the operator folds into the plain design
      plain.insert(plain.end(), shared.begin(), shared.end());
      b.design.resize(rows, dim);
      b.design.setFromTriplets(plain.begin(), plain.end());
    } else {
      b.design.resize(rows, dim);
      b.design.setFromTriplets(plain.begin(), plain.end());
      b.design_scaled.resize(rows, dim);
      b.design_scaled.setFromTriplets(shared.begin(), shared.end());
      b.alpha_binding = src.spec.alpha_binding;
    }
    obs.push_back(std::move(b));
  }

  return finalize_model(blocks, obs, layout);
}

}  // namespace rlgm
