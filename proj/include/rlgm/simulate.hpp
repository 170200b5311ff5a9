#pragma once

// Synthetic data generators for the three experiment families: a spatial
// field observed at sparse points and summarized by correlated experts over
// regions, a two-source categorical model with level aggregation, and a
// separable space-time field with temporal batches.  Every generator returns
// the drawn ground truth next to the data so fits can score recovery.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "rlgm/chol.hpp"
#include "rlgm/fusion.hpp"
#include "rlgm/gmrf.hpp"

namespace rlgm {

// Long-format observation row.  Unused indices stay -1; phi scales the
// likelihood precision row-wise (gaussian only).
struct SimRow {
  double response = 0.0;
  int site = -1;
  int time = -1;
  int level = -1;
  int source = 0;
  double phi = 1.0;
};

struct Dataset {
  std::vector<SimRow> rows;
};

struct TruthEntry {
  std::string name;
  int index = -1;
  double value = 0.0;
};

struct SimTruth {
  std::vector<TruthEntry> values;

  void add(const std::string& name, int index, double value) {
    values.push_back({name, index, value});
  }
  double get(const std::string& name, int index) const {
    for (const auto& e : values)
      if (e.name == name && e.index == index) return e.value;
    throw validation_error("truth: no entry " + name + "[" + std::to_string(index) + "]");
  }
  Eigen::VectorXd block(const std::string& name, int n) const {
    Eigen::VectorXd out(n);
    for (int i = 0; i < n; ++i) out[i] = get(name, i);
    return out;
  }
};

namespace detail {

// 1/sqrt(tau); an infinite precision collapses the noise to exactly zero
inline double noise_sd(double tau) {
  require(tau > 0.0, "simulate: precisions must be positive");
  return std::isinf(tau) ? 0.0 : 1.0 / std::sqrt(tau);
}

}  // namespace detail

struct SpatialFusionSim {
  int nrow = 30, ncol = 30;
  int n_obs = 40;
  double beta0 = 0.5;
  double range = 6.0, tau_field = 1.0;
  double tau_obs = 25.0;
  std::string structure = "s1";  // "s1" full block cover, "s2" irregular patches
  int coarse = 3;                // s1: coarse x coarse blocks
  double expert_tau1 = 400.0, expert_tau2 = 400.0;  // per-region error precisions
  double expert_rho = 0.5;
  double expert_obs_tau = 400.0;  // reading nugget
  double patch_fraction = 0.4;    // s2: total cover target over 4 patches
};

struct SpatialFusionData {
  Dataset data;  // source 0: point rows (site); sources 1, 2: expert rows (site = region index)
  SimTruth truth;
  std::vector<std::vector<Region>> expert_regions;  // per expert
};

namespace detail {

inline std::vector<Region> block_regions(int nrow, int ncol, int coarse) {
  require(coarse >= 1 && coarse <= std::min(nrow, ncol), "simulate: bad coarse block count");
  std::vector<Region> out;
  for (int bi = 0; bi < coarse; ++bi)
    for (int bj = 0; bj < coarse; ++bj) {
      Region reg;
      reg.id = "block_" + std::to_string(bi) + "_" + std::to_string(bj);
      const int r0 = nrow * bi / coarse, r1 = nrow * (bi + 1) / coarse;
      const int c0 = ncol * bj / coarse, c1 = ncol * (bj + 1) / coarse;
      for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) reg.member_points.push_back(r * ncol + c);
      reg.measure = static_cast<double>(reg.member_points.size());
      out.push_back(std::move(reg));
    }
  return out;
}

// Irregular patch: seeded flood growth from a random start cell, avoiding
// cells already taken by earlier patches.  Start cells favor territory far
// from any cell in `avoid` (the point-survey sites): delineated expert areas
// exist to cover ground the survey leaves thin, not to duplicate it.
inline std::vector<Region> grown_patches(int nrow, int ncol, int n_patches, int patch_cells,
                                         std::mt19937_64& rng,
                                         const std::vector<int>& avoid = {}) {
  const int n = nrow * ncol;
  std::vector<bool> taken(n, false);
  std::vector<Region> out;
  std::uniform_int_distribution<int> cell(0, n - 1);
  auto gap_distance = [&](int id) {
    if (avoid.empty()) return std::numeric_limits<double>::infinity();
    const double r = id / ncol, c = id % ncol;
    double best = std::numeric_limits<double>::infinity();
    for (int a : avoid) best = std::min(best, std::hypot(r - a / ncol, c - a % ncol));
    return best;
  };
  auto fresh_cell = [&] {
    int id = cell(rng);
    for (int guard = 0; taken[id] && guard < 10 * n; ++guard) id = cell(rng);
    return id;
  };
  for (int p = 0; p < n_patches; ++p) {
    int start = fresh_cell();
    double best_gap = gap_distance(start);
    for (int cand = 1; cand < 8; ++cand) {
      const int alt = fresh_cell();
      if (const double d = gap_distance(alt); d > best_gap) {
        start = alt;
        best_gap = d;
      }
    }
    Region reg;
    reg.id = "patch_" + std::to_string(p);
    std::vector<int> frontier = {start};
    taken[start] = true;
    reg.member_points.push_back(start);
    while (static_cast<int>(reg.member_points.size()) < patch_cells && !frontier.empty()) {
      std::uniform_int_distribution<int> pick(0, static_cast<int>(frontier.size()) - 1);
      const int fi = pick(rng);
      const int at = frontier[static_cast<std::size_t>(fi)];
      const int r = at / ncol, c = at % ncol;
      const int nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      bool grew = false;
      for (const auto& rc : nbr) {
        if (rc[0] < 0 || rc[0] >= nrow || rc[1] < 0 || rc[1] >= ncol) continue;
        const int id = rc[0] * ncol + rc[1];
        if (taken[id]) continue;
        taken[id] = true;
        reg.member_points.push_back(id);
        frontier.push_back(id);
        grew = true;
        break;
      }
      if (!grew) frontier.erase(frontier.begin() + fi);
    }
    std::sort(reg.member_points.begin(), reg.member_points.end());
    reg.measure = static_cast<double>(reg.member_points.size());
    out.push_back(std::move(reg));
  }
  return out;
}

}  // namespace detail

inline SpatialFusionData simulate_spatial_fusion(const SpatialFusionSim& cfg, uint64_t seed) {
  const int n = cfg.nrow * cfg.ncol;
  require(cfg.n_obs >= 1 && cfg.n_obs <= n, "simulate: n_obs outside the lattice");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;

  auto q = build_lattice_matern_precision(cfg.nrow, cfg.ncol, cfg.range, cfg.tau_field);
  auto f = cholesky(q);
  Eigen::VectorXd u = sample_gmrf(f, Eigen::VectorXd::Zero(n), rng());

  SpatialFusionData out;
  out.truth.add("intercept", 0, cfg.beta0);
  for (int i = 0; i < n; ++i) out.truth.add("field", i, u[i]);

  std::vector<int> sites(n);
  std::iota(sites.begin(), sites.end(), 0);
  std::shuffle(sites.begin(), sites.end(), rng);
  const double obs_sd = detail::noise_sd(cfg.tau_obs);
  for (int i = 0; i < cfg.n_obs; ++i) {
    SimRow row;
    row.site = sites[static_cast<std::size_t>(i)];
    row.source = 0;
    row.response = cfg.beta0 + u[row.site] + obs_sd * n01(rng);
    out.data.rows.push_back(row);
  }

  if (cfg.structure == "s1") {
    auto regions = detail::block_regions(cfg.nrow, cfg.ncol, cfg.coarse);
    out.expert_regions = {regions, regions};
  } else if (cfg.structure == "s2") {
    const int per_patch = std::max(1, static_cast<int>(cfg.patch_fraction * n / 4.0));
    const std::vector<int> obs_sites(sites.begin(), sites.begin() + cfg.n_obs);
    auto patches = detail::grown_patches(cfg.nrow, cfg.ncol, 4, per_patch, rng, obs_sites);
    // both experts report on the same delineated patches; the reading
    // contrast per patch is what identifies the correlated bias pair
    out.expert_regions = {patches, patches};
  } else {
    throw validation_error("simulate: unknown expert structure " + cfg.structure);
  }

  // correlated expert error pairs, drawn fresh per region
  require(std::abs(cfg.expert_rho) < 1.0, "simulate: |expert rho| must be below one");
  const double s1 = detail::noise_sd(cfg.expert_tau1), s2 = detail::noise_sd(cfg.expert_tau2);
  const double rho_c = std::sqrt(1.0 - cfg.expert_rho * cfg.expert_rho);
  const int n_regions = static_cast<int>(out.expert_regions[0].size());
  require(out.expert_regions[1].size() == out.expert_regions[0].size(),
          "simulate: expert region lists must align");
  Eigen::MatrixXd bias(n_regions, 2);
  for (int r = 0; r < n_regions; ++r) {
    const double z1 = n01(rng), z2 = n01(rng);
    bias(r, 0) = s1 * z1;
    bias(r, 1) = s2 * (cfg.expert_rho * z1 + rho_c * z2);
    out.truth.add("expert_bias", 2 * r, bias(r, 0));
    out.truth.add("expert_bias", 2 * r + 1, bias(r, 1));
  }

  const double nug_sd = detail::noise_sd(cfg.expert_obs_tau);
  const Eigen::VectorXd eta = Eigen::VectorXd::Constant(n, cfg.beta0) + u;
  for (int e = 0; e < 2; ++e) {
    auto op = build_areal_operator(n, out.expert_regions[static_cast<std::size_t>(e)],
                                   AggregationMode::mean);
    Eigen::VectorXd agg = op.matrix * eta;
    for (int k = 0; k < agg.size(); ++k) {
      SimRow row;
      row.site = k;  // region index within this expert's list
      row.source = e + 1;
      row.response = agg[k] + bias(k, e) + nug_sd * n01(rng);
      out.data.rows.push_back(row);
    }
  }
  return out;
}

struct CategoricalSim {
  int n_a = 40, n_b = 40;
  double beta0 = 1.0;
  double tau_a = 4.0, tau_b = 4.0;
  double level_sd = 1.0;  // fine-level effect scale before centering
};

struct CategoricalData {
  Dataset data;  // source 0: fine rows (level 0..4); source 1: coarse rows (level 0..2)
  SimTruth truth;
  CategoricalGrouping grouping;
};

inline CategoricalData simulate_categorical(const CategoricalSim& cfg, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;

  Eigen::VectorXd ua(5);
  for (int i = 0; i < 5; ++i) ua[i] = cfg.level_sd * n01(rng);
  ua.array() -= ua.mean();
  double head = 0.0;  // pin the last effect so a left-to-right sum is exactly zero
  for (int i = 0; i < 4; ++i) head += ua[i];
  ua[4] = -head;
  Eigen::VectorXd ub(3);
  ub << ua[0] + ua[1] + ua[2], ua[3], ua[4];

  CategoricalData out;
  out.grouping.fine_levels = 5;
  out.grouping.groups = {{0, 1, 2}, {3}, {4}};
  out.truth.add("intercept", 0, cfg.beta0);
  for (int i = 0; i < 5; ++i) out.truth.add("u_a", i, ua[i]);
  for (int i = 0; i < 3; ++i) out.truth.add("u_b", i, ub[i]);

  const double sd_a = detail::noise_sd(cfg.tau_a), sd_b = detail::noise_sd(cfg.tau_b);
  for (int i = 0; i < cfg.n_a; ++i) {
    SimRow row;
    row.level = i % 5;
    row.source = 0;
    row.response = cfg.beta0 + ua[row.level] + sd_a * n01(rng);
    out.data.rows.push_back(row);
  }
  for (int i = 0; i < cfg.n_b; ++i) {
    SimRow row;
    row.level = i % 3;
    row.source = 1;
    row.response = cfg.beta0 + ub[row.level] + sd_b * n01(rng);
    out.data.rows.push_back(row);
  }
  return out;
}

struct SpatioTemporalSim {
  int nrow = 5, ncol = 10, n_time = 60;
  double beta0 = 2.0;
  double rho_t = 0.7, range = 2.5, tau_st = 1.0;
  double tau_obs = 4.0;
  std::string family = "gaussian";  // or "poisson"
};

struct SpatioTemporalData {
  Dataset data;  // time-major rows: one per (time, site)
  SimTruth truth;
};

inline SpatioTemporalData simulate_spatiotemporal(const SpatioTemporalSim& cfg, uint64_t seed) {
  const int n_space = cfg.nrow * cfg.ncol;
  const int n = n_space * cfg.n_time;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;

  auto q = build_kronecker_ar1_lattice_precision(cfg.n_time, cfg.nrow, cfg.ncol, cfg.rho_t,
                                                 cfg.range, cfg.tau_st);
  auto f = cholesky(q);
  Eigen::VectorXd u = sample_gmrf(f, Eigen::VectorXd::Zero(n), rng());

  SpatioTemporalData out;
  out.truth.add("intercept", 0, cfg.beta0);
  for (int i = 0; i < n; ++i) out.truth.add("field", i, u[i]);

  const bool poisson = cfg.family == "poisson";
  require(poisson || cfg.family == "gaussian", "simulate: unknown family " + cfg.family);
  const double sd = poisson ? 0.0 : detail::noise_sd(cfg.tau_obs);
  for (int t = 0; t < cfg.n_time; ++t)
    for (int s = 0; s < n_space; ++s) {
      const double eta = cfg.beta0 + u[t * n_space + s];
      SimRow row;
      row.site = s;
      row.time = t;
      if (poisson) {
        std::poisson_distribution<long> pois(std::exp(eta));
        row.response = static_cast<double>(pois(rng));
      } else {
        row.response = eta + sd * n01(rng);
      }
      out.data.rows.push_back(row);
    }
  return out;
}

}  // namespace rlgm
