#pragma once

// Experiment harness: JSON config, model builders for the bundled study
// designs, partition rules, and a compare driver that runs each method in a
// child process (wall clock and peak RSS per method) and assembles a report.

#include <fcntl.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "consensus.hpp"
#include "fusion.hpp"
#include "io.hpp"
#include "recursive.hpp"
#include "simulate.hpp"

namespace rlgm {

struct FreeHyperSpec {
  std::string name;
  // internal scale; prior_mean NaN centers the prior at the simulated truth
  double prior_mean = std::numeric_limits<double>::quiet_NaN();
  double prior_sd = 1.5;
};

struct PartitionSpec {
  std::string rule = "temporal";  // temporal | rows
  int count = 4;
};

struct EngineOptions {
  std::string strategy = "axis";  // axis | ccd
  double z_step = 1.0;
  double log_drop = 2.5;
  bool consensus_multivariate = true;
};

struct ExperimentConfig {
  std::string experiment;          // spatiotemporal | spatial_fusion | categorical
  std::string variant = "joint";   // builder specific; see build_experiment_model
  std::uint64_t seed = 1;
  std::string out = "runs/experiment";
  std::vector<std::string> methods = {"full", "recursive", "consensus"};
  PartitionSpec partitions;
  EngineOptions engine;
  std::vector<FreeHyperSpec> free_hypers;
  SpatioTemporalSim st;
  SpatialFusionSim fusion;
  CategoricalSim categorical;
};

namespace detail {

inline void known_keys(const ordered_json& j, std::initializer_list<const char*> keys,
                       const std::string& where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : keys) ok = ok || item.key() == k;
    if (!ok) throw validation_error("config: unknown key '" + item.key() + "' in " + where);
  }
}

inline void read_if(const ordered_json& j, const char* key, double& v) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_number()) throw validation_error(std::string("config: ") + key + " must be a number");
  v = j.at(key).get<double>();
}

inline void read_if(const ordered_json& j, const char* key, int& v) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_number_integer()) throw validation_error(std::string("config: ") + key + " must be an integer");
  v = j.at(key).get<int>();
}

inline void read_if(const ordered_json& j, const char* key, std::uint64_t& v) {
  if (!j.contains(key)) return;
  const auto& x = j.at(key);
  if (x.is_number_unsigned()) {
    v = x.get<std::uint64_t>();
    return;
  }
  if (!x.is_number_integer() || x.get<std::int64_t>() < 0)
    throw validation_error(std::string("config: ") + key + " must be a non-negative integer");
  v = static_cast<std::uint64_t>(x.get<std::int64_t>());
}

inline void read_if(const ordered_json& j, const char* key, bool& v) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_boolean()) throw validation_error(std::string("config: ") + key + " must be a boolean");
  v = j.at(key).get<bool>();
}

inline void read_if(const ordered_json& j, const char* key, std::string& v) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_string()) throw validation_error(std::string("config: ") + key + " must be a string");
  v = j.at(key).get<std::string>();
}

inline void parse_simulate(const ordered_json& j, ExperimentConfig& cfg) {
  if (cfg.experiment == "spatiotemporal") {
    known_keys(j, {"nrow", "ncol", "n_time", "beta0", "rho_t", "range", "tau_st",
                   "tau_obs", "family"}, "simulate");
    auto& s = cfg.st;
    read_if(j, "nrow", s.nrow);
    read_if(j, "ncol", s.ncol);
    read_if(j, "n_time", s.n_time);
    read_if(j, "beta0", s.beta0);
    read_if(j, "rho_t", s.rho_t);
    read_if(j, "range", s.range);
    read_if(j, "tau_st", s.tau_st);
    read_if(j, "tau_obs", s.tau_obs);
    read_if(j, "family", s.family);
    if (s.family != "gaussian" && s.family != "poisson")
      throw validation_error("config: simulate.family must be gaussian or poisson");
  } else if (cfg.experiment == "spatial_fusion") {
    known_keys(j, {"nrow", "ncol", "n_obs", "beta0", "range", "tau_field", "tau_obs",
                   "structure", "coarse", "expert_tau1", "expert_tau2", "expert_rho",
                   "expert_obs_tau", "patch_fraction"}, "simulate");
    auto& s = cfg.fusion;
    read_if(j, "nrow", s.nrow);
    read_if(j, "ncol", s.ncol);
    read_if(j, "n_obs", s.n_obs);
    read_if(j, "beta0", s.beta0);
    read_if(j, "range", s.range);
    read_if(j, "tau_field", s.tau_field);
    read_if(j, "tau_obs", s.tau_obs);
    read_if(j, "structure", s.structure);
    read_if(j, "coarse", s.coarse);
    read_if(j, "expert_tau1", s.expert_tau1);
    read_if(j, "expert_tau2", s.expert_tau2);
    read_if(j, "expert_rho", s.expert_rho);
    read_if(j, "expert_obs_tau", s.expert_obs_tau);
    read_if(j, "patch_fraction", s.patch_fraction);
    if (s.structure != "s1" && s.structure != "s2")
      throw validation_error("config: simulate.structure must be s1 or s2");
  } else {
    known_keys(j, {"n_a", "n_b", "beta0", "tau_a", "tau_b", "level_sd"}, "simulate");
    auto& s = cfg.categorical;
    read_if(j, "n_a", s.n_a);
    read_if(j, "n_b", s.n_b);
    read_if(j, "beta0", s.beta0);
    read_if(j, "tau_a", s.tau_a);
    read_if(j, "tau_b", s.tau_b);
    read_if(j, "level_sd", s.level_sd);
  }
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const ordered_json& j) {
  using detail::read_if;
  detail::known_keys(j, {"experiment", "variant", "seed", "out", "methods", "partitions",
                         "engine", "free", "simulate"}, "top level");
  ExperimentConfig cfg;
  read_if(j, "experiment", cfg.experiment);
  if (cfg.experiment != "spatiotemporal" && cfg.experiment != "spatial_fusion" &&
      cfg.experiment != "categorical")
    throw validation_error("config: experiment must be spatiotemporal, spatial_fusion or categorical");
  read_if(j, "variant", cfg.variant);
  read_if(j, "seed", cfg.seed);
  read_if(j, "out", cfg.out);

  if (j.contains("methods")) {
    if (!j.at("methods").is_array() || j.at("methods").empty())
      throw validation_error("config: methods must be a non-empty array");
    cfg.methods.clear();
    for (const auto& m : j.at("methods")) {
      const std::string name = m.get<std::string>();
      if (name != "full" && name != "recursive" && name != "consensus")
        throw validation_error("config: unknown method '" + name + "'");
      if (std::find(cfg.methods.begin(), cfg.methods.end(), name) != cfg.methods.end())
        throw validation_error("config: duplicate method '" + name + "'");
      cfg.methods.push_back(name);
    }
  }

  if (j.contains("partitions")) {
    const auto& p = j.at("partitions");
    detail::known_keys(p, {"rule", "count"}, "partitions");
    read_if(p, "rule", cfg.partitions.rule);
    read_if(p, "count", cfg.partitions.count);
    if (cfg.partitions.rule != "temporal" && cfg.partitions.rule != "rows")
      throw validation_error("config: partitions.rule must be temporal or rows");
    if (cfg.partitions.count < 1)
      throw validation_error("config: partitions.count must be positive");
  }

  if (j.contains("engine")) {
    const auto& e = j.at("engine");
    detail::known_keys(e, {"strategy", "z_step", "log_drop", "consensus_multivariate"}, "engine");
    read_if(e, "strategy", cfg.engine.strategy);
    read_if(e, "z_step", cfg.engine.z_step);
    read_if(e, "log_drop", cfg.engine.log_drop);
    read_if(e, "consensus_multivariate", cfg.engine.consensus_multivariate);
    if (cfg.engine.strategy != "axis" && cfg.engine.strategy != "ccd")
      throw validation_error("config: engine.strategy must be axis or ccd");
    if (cfg.engine.z_step <= 0.0 || cfg.engine.log_drop <= 0.0)
      throw validation_error("config: engine.z_step and engine.log_drop must be positive");
  }

  if (j.contains("free")) {
    if (!j.at("free").is_array()) throw validation_error("config: free must be an array");
    for (const auto& f : j.at("free")) {
      detail::known_keys(f, {"name", "prior_mean", "prior_sd"}, "free entry");
      FreeHyperSpec spec;
      read_if(f, "name", spec.name);
      if (spec.name.empty()) throw validation_error("config: free entry needs a name");
      read_if(f, "prior_mean", spec.prior_mean);
      read_if(f, "prior_sd", spec.prior_sd);
      if (spec.prior_sd <= 0.0) throw validation_error("config: free prior_sd must be positive");
      for (const auto& other : cfg.free_hypers)
        if (other.name == spec.name)
          throw validation_error("config: duplicate free hyperparameter '" + spec.name + "'");
      cfg.free_hypers.push_back(spec);
    }
  }

  if (j.contains("simulate")) detail::parse_simulate(j.at("simulate"), cfg);
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return parse_experiment_config(read_json(path));
}

// Simulated inputs plus the side structures the model builders need.
struct ExperimentData {
  Dataset data;
  SimTruth truth;
  std::vector<std::vector<Region>> expert_regions;  // spatial_fusion only
};

inline ExperimentData simulate_experiment(const ExperimentConfig& cfg) {
  ExperimentData out;
  if (cfg.experiment == "spatiotemporal") {
    auto r = simulate_spatiotemporal(cfg.st, cfg.seed);
    out.data = std::move(r.data);
    out.truth = std::move(r.truth);
  } else if (cfg.experiment == "spatial_fusion") {
    auto r = simulate_spatial_fusion(cfg.fusion, cfg.seed);
    out.data = std::move(r.data);
    out.truth = std::move(r.truth);
    out.expert_regions = std::move(r.expert_regions);
  } else {
    auto r = simulate_categorical(cfg.categorical, cfg.seed);
    out.data = std::move(r.data);
    out.truth = std::move(r.truth);
  }
  return out;
}

inline void write_experiment_data(const std::filesystem::path& dir, const ExperimentData& ed) {
  write_dataset_csv(dir / "data.csv", ed.data);
  write_truth_csv(dir / "truth.csv", ed.truth);
  for (std::size_t e = 0; e < ed.expert_regions.size(); ++e)
    write_regions_csv(dir, "expert" + std::to_string(e + 1), ed.expert_regions[e]);
}

inline ExperimentData read_experiment_data(const std::filesystem::path& dir,
                                           const ExperimentConfig& cfg) {
  ExperimentData ed;
  ed.data = read_dataset_csv(dir / "data.csv");
  ed.truth = read_truth_csv(dir / "truth.csv");
  if (cfg.experiment == "spatial_fusion" && cfg.variant == "joint") {
    ed.expert_regions.push_back(read_regions_csv(dir, "expert1"));
    ed.expert_regions.push_back(read_regions_csv(dir, "expert2"));
  }
  return ed;
}

struct BuiltExperiment {
  std::shared_ptr<const ModelAssembly> model;
  std::vector<std::vector<int>> row_times;  // per obs block; -1 marks untimed rows
};

namespace detail {

inline double to_internal(Transform t, double natural) {
  switch (t) {
    case Transform::log_scale:
      require(natural > 0.0, "config: value must be positive on the natural scale");
      return std::log(natural);
    case Transform::fisher_z:
      require(std::abs(natural) < 1.0, "config: correlation must lie in (-1, 1)");
      return std::atanh(natural);
    default:
      return natural;
  }
}

// Free per config, otherwise fixed at the simulated truth.
inline HyperParam planned_hyper(const ExperimentConfig& cfg, const std::string& name,
                                Transform t, double truth_natural,
                                std::vector<std::string>* used) {
  HyperParam h;
  h.name = name;
  h.transform = t;
  const double internal = to_internal(t, truth_natural);
  for (const auto& spec : cfg.free_hypers) {
    if (spec.name != name) continue;
    if (used) used->push_back(name);
    h.prior_mean = std::isnan(spec.prior_mean) ? internal : spec.prior_mean;
    h.prior_sd = spec.prior_sd;
    return h;
  }
  h.fixed = internal;
  return h;
}

inline HyperParam fixed_hyper_at(const std::string& name, Transform t, double internal) {
  HyperParam h;
  h.name = name;
  h.transform = t;
  h.fixed = internal;
  return h;
}

inline void check_free_consumed(const ExperimentConfig& cfg,
                                const std::vector<std::string>& used) {
  for (const auto& spec : cfg.free_hypers)
    if (std::find(used.begin(), used.end(), spec.name) == used.end())
      throw validation_error("config: free hyperparameter '" + spec.name +
                             "' does not apply to this experiment");
}

inline LatentBlockSpec intercept_block() {
  LatentBlockSpec b;
  b.name = "intercept";
  b.kind = BlockKind::fixed_effect;
  b.n = 1;
  b.hyper = {{"log_tau", "tau_b0"}};
  return b;
}

inline BuiltExperiment build_spatiotemporal(const ExperimentConfig& cfg,
                                            const ExperimentData& ed) {
  const auto& s = cfg.st;
  const int n_space = s.nrow * s.ncol;
  const bool gaussian = s.family == "gaussian";

  std::vector<std::string> used;
  std::vector<HyperParam> hypers;
  hypers.push_back(fixed_hyper_at("tau_b0", Transform::log_scale, std::log(1e-3)));
  hypers.push_back(planned_hyper(cfg, "tau_st", Transform::log_scale, s.tau_st, &used));
  hypers.push_back(planned_hyper(cfg, "rho_t", Transform::fisher_z, s.rho_t, &used));
  hypers.push_back(planned_hyper(cfg, "range", Transform::log_scale, s.range, &used));
  if (gaussian)
    hypers.push_back(planned_hyper(cfg, "tau_obs", Transform::log_scale, s.tau_obs, &used));
  check_free_consumed(cfg, used);

  LatentBlockSpec field;
  field.name = "field";
  field.kind = BlockKind::kronecker_ar1_lattice;
  field.nrow = s.nrow;
  field.ncol = s.ncol;
  field.n_time = s.n_time;
  field.n = n_space * s.n_time;
  field.hyper = {{"log_tau", "tau_st"}, {"z_rho_t", "rho_t"}, {"log_range_s", "range"}};

  ObservationBlock y;
  y.name = "y";
  const int rows = static_cast<int>(ed.data.rows.size());
  require(rows > 0, "build: dataset is empty");
  y.values.resize(rows);
  std::vector<Triplet> design;
  std::vector<int> times(rows, -1);
  for (int r = 0; r < rows; ++r) {
    const auto& row = ed.data.rows[r];
    require(row.site >= 0 && row.site < n_space, "build: site index out of range");
    require(row.time >= 0 && row.time < s.n_time, "build: time index out of range");
    y.values[r] = row.response;
    design.emplace_back(r, 0, 1.0);
    design.emplace_back(r, 1 + row.time * n_space + row.site, 1.0);
    times[r] = row.time;
  }
  y.design.resize(rows, 1 + field.n);
  y.design.setFromTriplets(design.begin(), design.end());
  if (gaussian) {
    y.likelihood.family = Family::gaussian;
    y.likelihood.link = Link::identity;
    y.likelihood.theta_binding = "tau_obs";
  } else {
    y.likelihood.family = Family::poisson;
    y.likelihood.link = Link::log_link;
  }

  BuiltExperiment out;
  out.model = std::make_shared<const ModelAssembly>(
      finalize_model({intercept_block(), field}, {y}, HyperLayout{hypers}));
  out.row_times = {times};
  return out;
}

inline BuiltExperiment build_spatial_fusion(const ExperimentConfig& cfg,
                                            const ExperimentData& ed) {
  const auto& s = cfg.fusion;
  const int n_sites = s.nrow * s.ncol;
  if (cfg.variant != "joint" && cfg.variant != "obs_only")
    throw validation_error("config: spatial_fusion variant must be joint or obs_only");

  std::vector<std::string> used;
  std::vector<HyperParam> hypers;
  hypers.push_back(fixed_hyper_at("tau_b0", Transform::log_scale, std::log(1e-3)));
  hypers.push_back(planned_hyper(cfg, "tau_field", Transform::log_scale, s.tau_field, &used));
  hypers.push_back(planned_hyper(cfg, "range", Transform::log_scale, s.range, &used));
  hypers.push_back(planned_hyper(cfg, "tau_obs", Transform::log_scale, s.tau_obs, &used));
  check_free_consumed(cfg, used);

  LatentBlockSpec field;
  field.name = "field";
  field.kind = BlockKind::lattice_matern;
  field.nrow = s.nrow;
  field.ncol = s.ncol;
  field.n = n_sites;
  field.hyper = {{"log_tau", "tau_field"}, {"log_range", "range"}};

  std::vector<double> y0;
  std::vector<Triplet> d0;
  std::vector<std::vector<double>> ye(2);
  for (const auto& row : ed.data.rows) {
    if (row.source == 0) {
      require(row.site >= 0 && row.site < n_sites, "build: site index out of range");
      const int r = static_cast<int>(y0.size());
      y0.push_back(row.response);
      d0.emplace_back(r, 0, 1.0);
      d0.emplace_back(r, 1 + row.site, 1.0);
    } else {
      require(row.source == 1 || row.source == 2, "build: unknown source index");
      ye[row.source - 1].push_back(row.response);
    }
  }
  require(!y0.empty(), "build: no point observations");

  ObservationBlock y_obs;
  y_obs.name = "y_obs";
  y_obs.values = Eigen::Map<Eigen::VectorXd>(y0.data(), static_cast<int>(y0.size()));
  y_obs.design.resize(static_cast<int>(y0.size()), 1 + n_sites);
  y_obs.design.setFromTriplets(d0.begin(), d0.end());
  y_obs.likelihood.family = Family::gaussian;
  y_obs.likelihood.theta_binding = "tau_obs";

  auto primary = finalize_model({intercept_block(), field}, {y_obs}, HyperLayout{hypers});

  BuiltExperiment out;
  if (cfg.variant == "obs_only") {
    out.model = std::make_shared<const ModelAssembly>(std::move(primary));
    out.row_times = {std::vector<int>(y0.size(), -1)};
    return out;
  }

  require(ed.expert_regions.size() == 2, "build: expected two expert region sets");
  std::vector<SecondarySource> sources;
  for (int e = 0; e < 2; ++e) {
    require(ye[e].size() == ed.expert_regions[e].size(),
            "build: expert rows do not match regions");
    SecondarySource src;
    src.obs.name = "expert" + std::to_string(e + 1);
    src.obs.values = Eigen::Map<Eigen::VectorXd>(ye[e].data(), static_cast<int>(ye[e].size()));
    src.obs.likelihood.family = Family::gaussian;
    src.obs.likelihood.theta_binding = "tau_expert_obs";
    src.op = build_areal_operator(n_sites, ed.expert_regions[e], AggregationMode::mean);
    src.target_block = "field";
    src.spec.expert_member = true;
    src.spec.shared_scalar_blocks = {"intercept"};
    sources.push_back(std::move(src));
  }

  ExpertBlock expert;
  Eigen::VectorXd taus(2);
  taus << s.expert_tau1, s.expert_tau2;
  Eigen::MatrixXd rhos = Eigen::MatrixXd::Identity(2, 2);
  rhos(0, 1) = rhos(1, 0) = s.expert_rho;
  expert.fixed_precision = build_expert_covariance(taus, rhos);
  expert.replicates = static_cast<int>(ed.expert_regions[0].size());

  std::vector<HyperParam> extra = {
      fixed_hyper_at("tau_expert_obs", Transform::log_scale, std::log(s.expert_obs_tau))};

  out.model = std::make_shared<const ModelAssembly>(
      assemble_joint_model(primary, sources, extra, expert));
  out.row_times.assign(out.model->obs.size(), {});
  for (std::size_t b = 0; b < out.model->obs.size(); ++b)
    out.row_times[b].assign(out.model->obs[b].rows(), -1);
  return out;
}

inline BuiltExperiment build_categorical(const ExperimentConfig& cfg,
                                         const ExperimentData& ed) {
  const auto& s = cfg.categorical;
  const bool joint = cfg.variant == "joint";
  const bool a_only = cfg.variant == "a_only";
  const bool b_only = cfg.variant == "b_only";
  if (!joint && !a_only && !b_only)
    throw validation_error("config: categorical variant must be joint, a_only or b_only");

  std::vector<std::string> used;
  std::vector<HyperParam> hypers;
  hypers.push_back(fixed_hyper_at("tau_b0", Transform::log_scale, std::log(1e-3)));
  if (joint || a_only) {
    hypers.push_back(fixed_hyper_at("tau_ua", Transform::log_scale,
                                    std::log(1.0 / (s.level_sd * s.level_sd))));
    hypers.push_back(planned_hyper(cfg, "tau_a", Transform::log_scale, s.tau_a, &used));
  }
  if (joint || b_only) {
    if (b_only)
      hypers.push_back(fixed_hyper_at("tau_ub", Transform::log_scale,
                                      std::log(1.0 / (3.0 * s.level_sd * s.level_sd))));
    hypers.push_back(planned_hyper(cfg, "tau_b", Transform::log_scale, s.tau_b, &used));
  }
  check_free_consumed(cfg, used);

  std::vector<LatentBlockSpec> blocks = {intercept_block()};
  LatentBlockSpec levels;
  if (!b_only) {
    levels.name = "u_a";
    levels.kind = BlockKind::iid;
    levels.n = 5;
    levels.hyper = {{"log_tau", "tau_ua"}};
  } else {
    levels.name = "u_b";
    levels.kind = BlockKind::iid;
    levels.n = 3;
    levels.hyper = {{"log_tau", "tau_ub"}};
  }
  LinearConstraintSpec sum_zero;
  sum_zero.a = Eigen::VectorXd::Ones(levels.n);
  levels.constraints.push_back(sum_zero);
  blocks.push_back(levels);

  CategoricalGrouping grouping;
  grouping.fine_levels = 5;
  grouping.groups = {{0, 1, 2}, {3}, {4}};
  const auto op = build_categorical_operator(grouping, CategoricalMode::balanced);
  Eigen::MatrixXd agg = Eigen::MatrixXd(op.matrix);

  std::vector<double> ya, yb;
  std::vector<Triplet> da, db;
  for (const auto& row : ed.data.rows) {
    if (row.source == 0) {
      if (b_only) continue;
      require(row.level >= 0 && row.level < 5, "build: source-a level out of range");
      const int r = static_cast<int>(ya.size());
      ya.push_back(row.response);
      da.emplace_back(r, 0, 1.0);
      da.emplace_back(r, 1 + row.level, 1.0);
    } else {
      if (a_only) continue;
      require(row.source == 1, "build: unknown source index");
      require(row.level >= 0 && row.level < 3, "build: source-b level out of range");
      const int r = static_cast<int>(yb.size());
      yb.push_back(row.response);
      db.emplace_back(r, 0, 1.0);
      if (b_only) {
        db.emplace_back(r, 1 + row.level, 1.0);
      } else {
        for (int k = 0; k < 5; ++k)
          if (agg(row.level, k) != 0.0) db.emplace_back(r, 1 + k, agg(row.level, k));
      }
    }
  }

  std::vector<ObservationBlock> obs;
  std::vector<std::vector<int>> row_times;
  auto push_block = [&](const std::string& name, std::vector<double>& y,
                        std::vector<Triplet>& d, const std::string& binding) {
    require(!y.empty(), "build: no rows for " + name);
    ObservationBlock blk;
    blk.name = name;
    blk.values = Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<int>(y.size()));
    blk.design.resize(static_cast<int>(y.size()), 1 + levels.n);
    blk.design.setFromTriplets(d.begin(), d.end());
    blk.likelihood.family = Family::gaussian;
    blk.likelihood.theta_binding = binding;
    obs.push_back(std::move(blk));
    row_times.emplace_back(y.size(), -1);
  };
  if (!b_only) push_block("y_a", ya, da, "tau_a");
  if (!a_only) push_block("y_b", yb, db, "tau_b");

  BuiltExperiment out;
  out.model = std::make_shared<const ModelAssembly>(finalize_model(blocks, obs, HyperLayout{hypers}));
  out.row_times = std::move(row_times);
  return out;
}

}  // namespace detail

inline BuiltExperiment build_experiment_model(const ExperimentConfig& cfg,
                                              const ExperimentData& ed) {
  if (cfg.experiment == "spatiotemporal") return detail::build_spatiotemporal(cfg, ed);
  if (cfg.experiment == "spatial_fusion") return detail::build_spatial_fusion(cfg, ed);
  return detail::build_categorical(cfg, ed);
}

// Temporal rule: k equal spans of the observed time range, untimed rows into
// the first partition.  Rows rule: contiguous row ranges per block.
inline std::vector<ObsSelection> experiment_partitions(const BuiltExperiment& built,
                                                       const PartitionSpec& spec) {
  const auto& m = *built.model;
  if (spec.rule == "rows") return contiguous_partitions(m, spec.count);

  require(built.row_times.size() == m.obs.size(), "partitions: time table misaligned");
  int t_max = -1;
  for (const auto& times : built.row_times)
    for (int t : times) t_max = std::max(t_max, t);
  require(t_max >= 0, "partitions: temporal rule needs timed rows");
  const int horizon = t_max + 1;
  const int k = spec.count;

  std::vector<ObsSelection> parts(static_cast<std::size_t>(k), ObsSelection::none(m));
  for (std::size_t b = 0; b < m.obs.size(); ++b) {
    for (int r = 0; r < m.obs[b].rows(); ++r) {
      const int t = built.row_times[b][r];
      const int p = t < 0 ? 0 : std::min(k - 1, t * k / horizon);
      parts[static_cast<std::size_t>(p)].rows[b].push_back(r);
    }
  }
  return parts;
}

inline FitConfig engine_fit_config(const EngineOptions& e) {
  FitConfig cfg;
  cfg.explore.strategy = e.strategy == "ccd" ? GridStrategy::ccd_lite : GridStrategy::axis_grid;
  cfg.explore.z_step = e.z_step;
  cfg.explore.log_drop = e.log_drop;
  return cfg;
}

// ---------------------------------------------------------------------------
// Child-process execution: one method per process so wall clock and peak RSS
// are attributable.  RSS comes from wait4 rusage (kilobytes on Linux).

struct MethodProfile {
  int exit_code = -1;
  double wall_seconds = 0.0;
  long peak_rss_kb = 0;
  std::string error;
};

inline MethodProfile run_subprocess(const std::vector<std::string>& args,
                                    const std::filesystem::path& log_path) {
  require(!args.empty(), "run_subprocess: empty argv");
  std::vector<char*> argv;
  argv.reserve(args.size() + 1);
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);

  const auto t0 = std::chrono::steady_clock::now();
  const pid_t pid = ::fork();
  if (pid < 0) throw numerical_error("run_subprocess: fork failed");
  if (pid == 0) {
    const int fd = ::open(log_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd >= 0) {
      ::dup2(fd, 1);
      ::dup2(fd, 2);
      ::close(fd);
    }
    ::execv(argv[0], argv.data());
    std::_Exit(127);
  }

  int status = 0;
  struct rusage ru {};
  if (::wait4(pid, &status, 0, &ru) < 0) throw numerical_error("run_subprocess: wait4 failed");

  MethodProfile p;
  p.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  p.peak_rss_kb = ru.ru_maxrss;
  if (WIFEXITED(status)) {
    p.exit_code = WEXITSTATUS(status);
    if (p.exit_code == 127) p.error = "exec failed: " + args.front();
  } else if (WIFSIGNALED(status)) {
    p.exit_code = -WTERMSIG(status);
    p.error = "terminated by signal " + std::to_string(WTERMSIG(status));
  }
  return p;
}

namespace detail {

inline std::string method_subcommand(const std::string& method) {
  if (method == "full") return "fit";
  if (method == "recursive") return "fit-recursive";
  if (method == "consensus") return "fit-consensus";
  throw validation_error("unknown method '" + method + "'");
}

struct MarginalTable {
  Eigen::VectorXd mean, sd;
};

inline MarginalTable read_marginal_table(const std::filesystem::path& path) {
  const auto marg = read_latent_marginals_csv(path);
  MarginalTable t;
  t.mean.resize(static_cast<int>(marg.size()));
  t.sd.resize(static_cast<int>(marg.size()));
  for (std::size_t i = 0; i < marg.size(); ++i) {
    t.mean[static_cast<int>(i)] = marg[i].mean;
    t.sd[static_cast<int>(i)] = marg[i].sd;
  }
  return t;
}

inline ordered_json latent_comparison(const MarginalTable& alt, const MarginalTable& full) {
  require(alt.mean.size() == full.mean.size(), "compare: latent dimension mismatch");
  ordered_json c;
  ordered_json mean_diff = ordered_json::array();
  ordered_json sd_diff = ordered_json::array();
  double max_mean = 0.0, max_units = 0.0, max_sd = 0.0;
  for (int i = 0; i < alt.mean.size(); ++i) {
    const double dm = alt.mean[i] - full.mean[i];
    const double ds = alt.sd[i] - full.sd[i];
    mean_diff.push_back(dm);
    sd_diff.push_back(ds);
    max_mean = std::max(max_mean, std::abs(dm));
    max_units = std::max(max_units, std::abs(dm) / std::max(full.sd[i], 1e-12));
    max_sd = std::max(max_sd, std::abs(ds));
  }
  c["mean_diff"] = std::move(mean_diff);
  c["sd_diff"] = std::move(sd_diff);
  c["max_abs_mean_diff"] = max_mean;
  c["max_mean_diff_sd_units"] = max_units;
  c["max_abs_sd_diff"] = max_sd;
  return c;
}

inline ordered_json hyper_comparison(const ordered_json& alt, const ordered_json& full) {
  ordered_json c = ordered_json::object();
  for (const auto& item : full.items()) {
    if (!alt.contains(item.key())) continue;
    const auto& a = alt.at(item.key());
    const auto& f = item.value();
    ordered_json h;
    const double mode_a = a.at("mode_natural").get<double>();
    const double mode_f = f.at("mode_natural").get<double>();
    h["mode_natural_diff"] = mode_a - mode_f;
    h["mode_natural_rel_diff"] = std::abs(mode_a - mode_f) / std::max(std::abs(mode_f), 1e-12);
    h["natural_mean_diff"] = a.at("natural_mean").get<double>() - f.at("natural_mean").get<double>();
    h["natural_sd_diff"] = a.at("natural_sd").get<double>() - f.at("natural_sd").get<double>();
    c[item.key()] = std::move(h);
  }
  return c;
}

// Log density of the full-data model on the recursion's stored support
// points; the comparison is shift-invariant, so the mean offset is removed.
inline ordered_json grid_comparison(const ModelAssembly& m, const FitConfig& fit,
                                    const GridFile& rec_grid) {
  HyperGrid ref;
  ref.points = rec_grid.points;
  ref.log_density = Eigen::VectorXd::Zero(rec_grid.points.rows());
  ref.log_weight = rec_grid.log_weight;
  ref.z = Eigen::MatrixXd::Zero(rec_grid.points.rows(), rec_grid.points.cols());
  ref.mode = Eigen::VectorXd::Zero(rec_grid.points.cols());
  ref.scale = Eigen::MatrixXd::Identity(rec_grid.points.cols(), rec_grid.points.cols());
  ref.strategy = GridStrategy::axis_grid;

  const auto slices = make_slices(m, ObsSelection::all(m));
  const HyperGrid full = evaluate_on_grid(m, slices, ref, fit.explore.approx);
  Eigen::VectorXd diff = rec_grid.log_density - full.log_density;
  diff.array() -= diff.mean();

  ordered_json c;
  c["points"] = rec_grid.points.rows();
  ordered_json shifted = ordered_json::array();
  for (int i = 0; i < diff.size(); ++i) shifted.push_back(diff[i]);
  c["log_density_diff_shifted"] = std::move(shifted);
  c["max_abs_shifted_diff"] = diff.size() ? diff.cwiseAbs().maxCoeff() : 0.0;
  return c;
}

}  // namespace detail

// Runs every configured method as a child CLI process over one shared
// simulated dataset, then assembles report.json: per-method summaries with
// truth-recovery metrics, pairwise comparisons against the full fit, and a
// resource profile.  Absent results are explicit nulls.
inline ordered_json run_experiment(const ExperimentConfig& cfg,
                                   const std::filesystem::path& config_path,
                                   const std::filesystem::path& cli_path,
                                   const std::filesystem::path& out_root) {
  namespace fs = std::filesystem;
  fs::create_directories(out_root);

  const auto sim_t0 = std::chrono::steady_clock::now();
  const ExperimentData ed = simulate_experiment(cfg);
  write_experiment_data(out_root, ed);
  const double sim_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - sim_t0).count();

  ordered_json report;
  report["experiment"] = cfg.experiment;
  report["variant"] = cfg.variant;
  report["seed"] = cfg.seed;
  report["partitions"] = {{"rule", cfg.partitions.rule}, {"count", cfg.partitions.count}};

  ordered_json methods = ordered_json::object();
  ordered_json profile = ordered_json::object();
  profile["simulate_seconds"] = sim_seconds;

  for (const auto& method : cfg.methods) {
    const fs::path out_dir = out_root / method;
    fs::create_directories(out_dir);
    std::vector<std::string> args = {
        cli_path.string(),
        detail::method_subcommand(method),
        "--config", config_path.string(),
        "--data", out_root.string(),
        "--out", out_dir.string(),
        "--seed", std::to_string(cfg.seed),
        "--partitions", cfg.partitions.rule + ":" + std::to_string(cfg.partitions.count)};
    const MethodProfile p = run_subprocess(args, out_root / (method + ".log"));

    ordered_json pj;
    pj["exit_code"] = p.exit_code;
    pj["wall_seconds"] = p.wall_seconds;
    pj["peak_rss_kb"] = p.peak_rss_kb;
    if (!p.error.empty()) pj["error"] = p.error;
    profile[method] = std::move(pj);

    if (p.exit_code == 0) {
      ordered_json j = read_json(out_dir / "summary.json");
      j.erase("runtime_seconds");
      if (fs::exists(out_dir / "metrics.json"))
        j["truth_metrics"] = read_json(out_dir / "metrics.json");
      methods[method] = std::move(j);
    } else {
      methods[method] = nullptr;
    }
  }

  auto ok = [&](const std::string& name) {
    return methods.contains(name) && !methods.at(name).is_null();
  };

  ordered_json comparisons = ordered_json::object();
  std::optional<detail::MarginalTable> full_table;
  if (ok("full")) full_table = detail::read_marginal_table(out_root / "full" / "latent_marginals.csv");

  for (const auto& method : cfg.methods) {
    if (method == "full") continue;
    const std::string key = method + "_vs_full";
    if (!ok(method) || !full_table) {
      comparisons[key] = nullptr;
      continue;
    }
    const auto alt_table = detail::read_marginal_table(out_root / method / "latent_marginals.csv");
    ordered_json c;
    c["latent"] = detail::latent_comparison(alt_table, *full_table);
    c["hyper"] = detail::hyper_comparison(methods.at(method).at("hyper"),
                                          methods.at("full").at("hyper"));
    c["log_marginal_likelihood_diff"] =
        methods.at(method).at("log_marginal_likelihood").get<double>() -
        methods.at("full").at("log_marginal_likelihood").get<double>();
    if (method == "recursive" && fs::exists(out_root / method / "grid.csv")) {
      const auto built = build_experiment_model(cfg, ed);
      c["grid"] = detail::grid_comparison(*built.model, engine_fit_config(cfg.engine),
                                          read_grid_csv(out_root / method / "grid.csv"));
    } else {
      c["grid"] = nullptr;
    }
    comparisons[key] = std::move(c);
  }

  report["methods"] = std::move(methods);
  report["comparisons"] = std::move(comparisons);
  report["profile"] = std::move(profile);

  // schema check: every configured method accounted for, nulls explicit
  for (const auto& method : cfg.methods) {
    require(report.at("methods").contains(method), "report: missing method entry");
    require(report.at("profile").contains(method), "report: missing profile entry");
    if (method != "full")
      require(report.at("comparisons").contains(method + "_vs_full"),
              "report: missing comparison entry");
  }

  auto out = detail::open_out(out_root / "report.json");
  out << report.dump(2) << "\n";
  return report;
}

}  // namespace rlgm
