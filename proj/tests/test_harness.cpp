#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "rlgm/experiment.hpp"

using namespace rlgm;
using namespace rlgm::testing;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("rlgm_harness_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ordered_json quick_st_config(const std::string& out_dir) {
  ordered_json j;
  j["experiment"] = "spatiotemporal";
  j["seed"] = 31;
  j["out"] = out_dir;
  j["methods"] = {"full", "recursive", "consensus"};
  j["partitions"] = {{"rule", "temporal"}, {"count", 2}};
  j["simulate"] = {{"nrow", 2}, {"ncol", 3}, {"n_time", 8},  {"beta0", 1.0},
                   {"rho_t", 0.6}, {"range", 2.0}, {"tau_st", 1.0},
                   {"tau_obs", 4.0}, {"family", "gaussian"}};
  return j;
}

}  // namespace

TEST_CASE("spatial fusion simulation: infinite precisions give exact rows") {
  SpatialFusionSim cfg;
  cfg.nrow = 6;
  cfg.ncol = 6;
  cfg.n_obs = 10;
  cfg.coarse = 2;
  cfg.tau_obs = std::numeric_limits<double>::infinity();
  cfg.expert_tau1 = std::numeric_limits<double>::infinity();
  cfg.expert_tau2 = std::numeric_limits<double>::infinity();
  cfg.expert_obs_tau = std::numeric_limits<double>::infinity();
  const auto sim = simulate_spatial_fusion(cfg, 404);

  const int n = cfg.nrow * cfg.ncol;
  Eigen::VectorXd u = sim.truth.block("field", n);
  const double beta0 = sim.truth.get("intercept", 0);

  // point rows reproduce the linear predictor with no noise term
  int points = 0;
  for (const auto& row : sim.data.rows) {
    if (row.source != 0) continue;
    REQUIRE(row.response == beta0 + u[row.site]);
    ++points;
  }
  REQUIRE(points == cfg.n_obs);

  // expert rows equal the operator's regional means: bias and nugget are zero
  REQUIRE(sim.truth.get("expert_bias", 0) == 0.0);
  REQUIRE(sim.truth.get("expert_bias", 1) == 0.0);
  const Eigen::VectorXd eta = Eigen::VectorXd::Constant(n, beta0) + u;
  for (int e = 0; e < 2; ++e) {
    auto op = build_areal_operator(n, sim.expert_regions[e], AggregationMode::mean);
    Eigen::VectorXd agg = op.matrix * eta;
    int k = 0;
    for (const auto& row : sim.data.rows) {
      if (row.source != e + 1) continue;
      REQUIRE(row.site == k);
      REQUIRE(row.response == agg[k]);
      ++k;
    }
    REQUIRE(k == static_cast<int>(sim.expert_regions[e].size()));
  }
}

TEST_CASE("spatial fusion simulation: s2 patches are disjoint and shared") {
  SpatialFusionSim cfg;
  cfg.nrow = 10;
  cfg.ncol = 10;
  cfg.n_obs = 5;
  cfg.structure = "s2";
  cfg.patch_fraction = 0.4;
  const auto sim = simulate_spatial_fusion(cfg, 7);

  REQUIRE(sim.expert_regions.size() == 2);
  for (const auto& regions : sim.expert_regions) {
    REQUIRE(regions.size() == 4);
    std::vector<int> seen(cfg.nrow * cfg.ncol, 0);
    int covered = 0;
    for (const auto& reg : regions)
      for (int p : reg.member_points) {
        REQUIRE(p >= 0);
        REQUIRE(p < 100);
        REQUIRE(seen[p] == 0);  // within one expert the patches are disjoint
        seen[p] = 1;
        ++covered;
      }
    // four patches of floor(0.4 * 100 / 4) = 10 cells each
    REQUIRE(covered == 40);
  }
  // both experts report on the same delineated patches
  for (std::size_t r = 0; r < 4; ++r)
    REQUIRE(sim.expert_regions[0][r].member_points == sim.expert_regions[1][r].member_points);
}

TEST_CASE("spatial fusion simulation: expert bias correlation matches rho") {
  SpatialFusionSim cfg;
  cfg.nrow = 2;
  cfg.ncol = 2;
  cfg.n_obs = 1;
  cfg.coarse = 1;
  cfg.expert_rho = 0.5;
  cfg.expert_tau1 = 16.0;
  cfg.expert_tau2 = 16.0;
  const int reps = 10000;
  Eigen::VectorXd b1(reps), b2(reps);
  for (int r = 0; r < reps; ++r) {
    const auto sim = simulate_spatial_fusion(cfg, 1000 + static_cast<uint64_t>(r));
    b1[r] = sim.truth.get("expert_bias", 0);
    b2[r] = sim.truth.get("expert_bias", 1);
  }
  const Eigen::VectorXd c1 = b1.array() - b1.mean();
  const Eigen::VectorXd c2 = b2.array() - b2.mean();
  const double corr = c1.dot(c2) / std::sqrt(c1.squaredNorm() * c2.squaredNorm());
  REQUIRE(std::abs(corr - cfg.expert_rho) < 0.02);
  // marginal scales: sd 1/sqrt(16) = 0.25
  REQUIRE(std::sqrt(c1.squaredNorm() / reps) == Approx(0.25).margin(0.01));
  REQUIRE(std::sqrt(c2.squaredNorm() / reps) == Approx(0.25).margin(0.01));
}

TEST_CASE("categorical simulation: aggregation identities are exact") {
  CategoricalSim cfg;
  const auto sim = simulate_categorical(cfg, 99);

  double sum = 0.0;
  for (int i = 0; i < 5; ++i) sum += sim.truth.get("u_a", i);
  REQUIRE(sum == 0.0);

  const double direct =
      sim.truth.get("u_a", 0) + sim.truth.get("u_a", 1) + sim.truth.get("u_a", 2);
  REQUIRE(sim.truth.get("u_b", 0) == direct);
  REQUIRE(sim.truth.get("u_b", 1) == sim.truth.get("u_a", 3));
  REQUIRE(sim.truth.get("u_b", 2) == sim.truth.get("u_a", 4));

  REQUIRE(sim.grouping.groups.size() == 3);
  int n_a = 0, n_b = 0;
  for (const auto& row : sim.data.rows) {
    if (row.source == 0) {
      REQUIRE(row.level == n_a % 5);
      ++n_a;
    } else {
      REQUIRE(row.source == 1);
      REQUIRE(row.level == n_b % 3);
      ++n_b;
    }
  }
  REQUIRE(n_a == cfg.n_a);
  REQUIRE(n_b == cfg.n_b);
}

TEST_CASE("spatiotemporal simulation: exact limit and temporal correlation") {
  SECTION("infinite observation precision reproduces the field") {
    SpatioTemporalSim cfg;
    cfg.nrow = 2;
    cfg.ncol = 2;
    cfg.n_time = 6;
    cfg.tau_obs = std::numeric_limits<double>::infinity();
    const auto sim = simulate_spatiotemporal(cfg, 5);
    REQUIRE(sim.data.rows.size() == 24);
    for (const auto& row : sim.data.rows) {
      const double eta = cfg.beta0 + sim.truth.get("field", row.time * 4 + row.site);
      REQUIRE(row.response == eta);
    }
  }

  SECTION("single-site series shows the AR1 lag-1 autocorrelation") {
    SpatioTemporalSim cfg;
    cfg.nrow = 2;
    cfg.ncol = 2;
    cfg.n_time = 6000;
    cfg.rho_t = 0.7;
    cfg.tau_obs = std::numeric_limits<double>::infinity();
    const auto sim = simulate_spatiotemporal(cfg, 21);
    Eigen::VectorXd x(cfg.n_time);
    for (const auto& row : sim.data.rows)
      if (row.site == 0) x[row.time] = row.response;
    const Eigen::VectorXd c = x.array() - x.mean();
    const double r1 = c.head(cfg.n_time - 1).dot(c.tail(cfg.n_time - 1)) / c.squaredNorm();
    REQUIRE(std::abs(r1 - cfg.rho_t) < 0.05);
  }

  SECTION("poisson responses are nonnegative integers") {
    SpatioTemporalSim cfg;
    cfg.nrow = 2;
    cfg.ncol = 2;
    cfg.n_time = 4;
    cfg.family = "poisson";
    cfg.beta0 = 0.5;
    const auto sim = simulate_spatiotemporal(cfg, 3);
    for (const auto& row : sim.data.rows) {
      REQUIRE(row.response >= 0.0);
      REQUIRE(row.response == std::floor(row.response));
    }
  }
}

TEST_CASE("simulation output is byte-identical under a repeated seed") {
  const fs::path dir = fresh_dir("repro");
  SpatialFusionSim cfg;
  cfg.nrow = 5;
  cfg.ncol = 5;
  cfg.n_obs = 8;
  cfg.coarse = 2;

  for (int pass = 0; pass < 2; ++pass) {
    const auto sim = simulate_spatial_fusion(cfg, 321);
    const fs::path sub = dir / ("pass" + std::to_string(pass));
    fs::create_directories(sub);
    write_dataset_csv(sub / "data.csv", sim.data);
    write_truth_csv(sub / "truth.csv", sim.truth);
    write_regions_csv(sub, "expert1", sim.expert_regions[0]);
  }
  REQUIRE(slurp(dir / "pass0" / "data.csv") == slurp(dir / "pass1" / "data.csv"));
  REQUIRE(slurp(dir / "pass0" / "truth.csv") == slurp(dir / "pass1" / "truth.csv"));
  REQUIRE(slurp(dir / "pass0" / "expert1_members.csv") ==
          slurp(dir / "pass1" / "expert1_members.csv"));

  const auto other = simulate_spatial_fusion(cfg, 322);
  const fs::path sub = dir / "other";
  fs::create_directories(sub);
  write_dataset_csv(sub / "data.csv", other.data);
  REQUIRE(slurp(dir / "pass0" / "data.csv") != slurp(dir / "other" / "data.csv"));
  fs::remove_all(dir);
}

TEST_CASE("io round trips preserve datasets, truth, matrices and marginals") {
  const fs::path dir = fresh_dir("io");

  SECTION("dataset") {
    Dataset d;
    d.rows.push_back({1.25, 3, -1, -1, 0, 1.0});
    d.rows.push_back({-0.5, -1, 7, 2, 1, 0.25});
    write_dataset_csv(dir / "d.csv", d);
    const Dataset back = read_dataset_csv(dir / "d.csv");
    REQUIRE(back.rows.size() == 2);
    REQUIRE(back.rows[0].response == 1.25);
    REQUIRE(back.rows[0].site == 3);
    REQUIRE(back.rows[1].time == 7);
    REQUIRE(back.rows[1].level == 2);
    REQUIRE(back.rows[1].source == 1);
    REQUIRE(back.rows[1].phi == 0.25);
  }

  SECTION("truth") {
    SimTruth t;
    t.add("alpha", 0, 0.123456789012345);
    t.add("field", 4, -2.5);
    write_truth_csv(dir / "t.csv", t);
    const SimTruth back = read_truth_csv(dir / "t.csv");
    REQUIRE(back.get("alpha", 0) == 0.123456789012345);
    REQUIRE(back.get("field", 4) == -2.5);
    REQUIRE_THROWS_AS(back.get("field", 5), validation_error);
  }

  SECTION("sparse matrix with dimension header") {
    std::mt19937_64 rng(8);
    const SparseSymmetric m = make_random_spd(5, rng);
    write_matrix_csv(dir / "m.csv", m);
    const SparseSymmetric back = read_matrix_csv(dir / "m.csv");
    REQUIRE(back.dim() == 5);
    REQUIRE((Eigen::MatrixXd(back.full()) - Eigen::MatrixXd(m.full())).cwiseAbs().maxCoeff() <
            1e-14);
  }

  SECTION("regions") {
    std::vector<Region> regions(2);
    regions[0] = {"a", {0, 2, 5}, 3.0};
    regions[1] = {"b", {1}, 0.5};
    write_regions_csv(dir, "reg", regions);
    const auto back = read_regions_csv(dir, "reg");
    REQUIRE(back.size() == 2);
    REQUIRE(back[0].member_points == std::vector<int>{0, 2, 5});
    REQUIRE(back[1].measure == 0.5);
  }

  SECTION("latent marginals keep curves per node") {
    std::vector<LatentMarginal> in(2);
    in[0].mean = 1.0;
    in[0].sd = 0.5;
    in[0].grid = Eigen::VectorXd::LinSpaced(5, -1.0, 3.0);
    in[0].density = Eigen::VectorXd::Constant(5, 0.2);
    in[1].mean = -2.0;
    in[1].sd = 2.0;
    in[1].grid = Eigen::VectorXd::LinSpaced(3, -8.0, 4.0);
    in[1].density = Eigen::VectorXd::Constant(3, 0.1);
    write_latent_marginals_csv(dir / "lat.csv", in);
    const auto back = read_latent_marginals_csv(dir / "lat.csv");
    REQUIRE(back.size() == 2);
    REQUIRE(back[0].mean == 1.0);
    REQUIRE(back[0].grid.size() == 5);
    REQUIRE(back[1].sd == 2.0);
    REQUIRE(back[1].density.size() == 3);
  }
  fs::remove_all(dir);
}

TEST_CASE("experiment config parsing validates shape and content") {
  ordered_json j = quick_st_config("runs/x");

  SECTION("valid config round trips") {
    const auto cfg = parse_experiment_config(j);
    REQUIRE(cfg.experiment == "spatiotemporal");
    REQUIRE(cfg.seed == 31);
    REQUIRE(cfg.methods.size() == 3);
    REQUIRE(cfg.partitions.rule == "temporal");
    REQUIRE(cfg.st.nrow == 2);
    REQUIRE(cfg.st.tau_obs == 4.0);
  }

  SECTION("unknown keys are rejected") {
    j["simulate"]["bogus"] = 1;
    REQUIRE_THROWS_AS(parse_experiment_config(j), validation_error);
  }

  SECTION("unknown methods are rejected") {
    j["methods"] = {"full", "mystery"};
    REQUIRE_THROWS_AS(parse_experiment_config(j), validation_error);
  }

  SECTION("bad partition rule is rejected") {
    j["partitions"]["rule"] = "spatial";
    REQUIRE_THROWS_AS(parse_experiment_config(j), validation_error);
  }

  SECTION("free hyperparameters must apply to the model") {
    j["free"] = ordered_json::array({{{"name", "tau_zeta"}}});
    const auto cfg = parse_experiment_config(j);
    const auto ed = simulate_experiment(cfg);
    REQUIRE_THROWS_AS(build_experiment_model(cfg, ed), validation_error);
  }
}

TEST_CASE("experiment builders bind data to the declared model shapes") {
  SECTION("spatiotemporal design points at intercept plus field node") {
    auto cfg = parse_experiment_config(quick_st_config("runs/x"));
    cfg.free_hypers = {{"tau_obs", 0.0, 1.5}};
    const auto ed = simulate_experiment(cfg);
    const auto built = build_experiment_model(cfg, ed);
    const auto& m = *built.model;
    REQUIRE(m.latent_dim == 1 + 6 * 8);
    REQUIRE(m.obs.size() == 1);
    REQUIRE(m.obs[0].rows() == 48);
    REQUIRE(m.hypers.free_dim() == 1);
    // row for (t, s) loads latent node 1 + t*6 + s
    const auto& row0 = ed.data.rows[10];
    const Eigen::SparseMatrix<double>& a = m.obs[0].design;
    REQUIRE(Eigen::VectorXd(a.row(10)).sum() == 2.0);
    REQUIRE(Eigen::VectorXd(a.row(10))[0] == 1.0);
    REQUIRE(Eigen::VectorXd(a.row(10))[1 + row0.time * 6 + row0.site] == 1.0);

    const auto parts = experiment_partitions(built, {"temporal", 2});
    REQUIRE(parts.size() == 2);
    for (int r : parts[0].rows[0]) REQUIRE(built.row_times[0][r] < 4);
    for (int r : parts[1].rows[0]) REQUIRE(built.row_times[0][r] >= 4);
    REQUIRE(parts[0].rows[0].size() + parts[1].rows[0].size() == 48);
  }

  SECTION("spatial fusion joint model carries operators and expert block") {
    ExperimentConfig cfg;
    cfg.experiment = "spatial_fusion";
    cfg.fusion.nrow = 5;
    cfg.fusion.ncol = 5;
    cfg.fusion.n_obs = 10;
    cfg.fusion.coarse = 2;
    const auto ed = simulate_experiment(cfg);
    const auto built = build_experiment_model(cfg, ed);
    const auto& m = *built.model;
    // intercept + field + one expert error pair per region
    REQUIRE(m.obs.size() == 3);
    REQUIRE(m.obs[1].rows() == 4);
    REQUIRE(m.latent_dim == 1 + 25 + 2 * 4);
    REQUIRE(m.block("expert_bias").kind == BlockKind::mvn_dense);

    ExperimentConfig solo = cfg;
    solo.variant = "obs_only";
    const auto alone = build_experiment_model(solo, ed);
    REQUIRE(alone.model->latent_dim == 1 + 25);
    REQUIRE(alone.model->obs.size() == 1);
  }

  SECTION("categorical variants share the intercept and switch levels") {
    ExperimentConfig cfg;
    cfg.experiment = "categorical";
    cfg.categorical.n_a = 15;
    cfg.categorical.n_b = 9;
    const auto ed = simulate_experiment(cfg);

    const auto joint = build_experiment_model(cfg, ed);
    REQUIRE(joint.model->latent_dim == 1 + 5);
    REQUIRE(joint.model->obs.size() == 2);
    // coarse rows sum the first three fine levels
    const Eigen::SparseMatrix<double>& ab = joint.model->obs[1].design;
    Eigen::VectorXd r0 = Eigen::VectorXd(ab.row(0));
    REQUIRE(r0[1] == 1.0);
    REQUIRE(r0[2] == 1.0);
    REQUIRE(r0[3] == 1.0);
    REQUIRE(r0[4] == 0.0);

    ExperimentConfig b = cfg;
    b.variant = "b_only";
    const auto bb = build_experiment_model(b, ed);
    REQUIRE(bb.model->latent_dim == 1 + 3);
    REQUIRE(bb.model->obs.size() == 1);
    REQUIRE(bb.model->obs[0].rows() == 9);
  }
}

TEST_CASE("subprocess runner reports exit codes and failures") {
  const fs::path dir = fresh_dir("proc");
  const MethodProfile ok = run_subprocess({"/bin/sh", "-c", "echo out"}, dir / "ok.log");
  REQUIRE(ok.exit_code == 0);
  REQUIRE(ok.error.empty());
  REQUIRE(slurp(dir / "ok.log") == "out\n");

  const MethodProfile bad = run_subprocess({"/bin/sh", "-c", "exit 3"}, dir / "bad.log");
  REQUIRE(bad.exit_code == 3);

  const MethodProfile missing = run_subprocess({"/no/such/binary"}, dir / "miss.log");
  REQUIRE(missing.exit_code == 127);
  REQUIRE(!missing.error.empty());
  fs::remove_all(dir);
}

TEST_CASE("cli validates inputs and writes fit artifacts") {
  const fs::path dir = fresh_dir("cli");
  const std::string cli = RLGM_CLI_PATH;

  SECTION("missing config file exits with the validation code") {
    const auto p = run_subprocess({cli, "fit", "--config", (dir / "none.json").string(),
                                   "--data", dir.string()},
                                  dir / "log");
    REQUIRE(p.exit_code == 2);
  }

  SECTION("malformed json exits with the validation code") {
    std::ofstream(dir / "bad.json") << "{ not json";
    const auto p = run_subprocess({cli, "fit", "--config", (dir / "bad.json").string(),
                                   "--data", dir.string()},
                                  dir / "log");
    REQUIRE(p.exit_code == 2);
  }

  SECTION("simulate then fit produces marginals, summary and metrics") {
    const fs::path out = dir / "run";
    auto j = quick_st_config(out.string());
    std::ofstream(dir / "cfg.json") << j.dump(2);
    auto p = run_subprocess({cli, "simulate", "--config", (dir / "cfg.json").string()},
                            dir / "sim.log");
    REQUIRE(p.exit_code == 0);
    REQUIRE(fs::exists(out / "data.csv"));
    REQUIRE(fs::exists(out / "truth.csv"));

    p = run_subprocess({cli, "fit", "--config", (dir / "cfg.json").string(),
                        "--data", out.string(), "--out", (out / "full").string()},
                       dir / "fit.log");
    REQUIRE(p.exit_code == 0);
    REQUIRE(fs::exists(out / "full" / "latent_marginals.csv"));
    REQUIRE(fs::exists(out / "full" / "hyper_marginals.csv"));
    REQUIRE(fs::exists(out / "full" / "grid.csv"));
    const auto summary = read_json(out / "full" / "summary.json");
    REQUIRE(summary.at("method") == "laplace_full");
    REQUIRE(summary.at("n_latent") == 49);
    const auto metrics = read_json(out / "full" / "metrics.json");
    REQUIRE(metrics.at("blocks").contains("field"));
    REQUIRE(metrics.at("rmse").get<double>() > 0.0);
  }
  fs::remove_all(dir);
}

TEST_CASE("compare runs all methods and the recursion matches on fixed hypers") {
  const fs::path dir = fresh_dir("compare_fixed");
  auto j = quick_st_config((dir / "out").string());
  // all hyperparameters fixed at truth: conditioning is exact, so the
  // recursive and the full posterior coincide
  const fs::path cfg_path = dir / "cfg.json";
  std::ofstream(cfg_path) << j.dump(2);

  const auto cfg = load_experiment_config(cfg_path);
  const auto report = run_experiment(cfg, cfg_path, RLGM_CLI_PATH, dir / "out");

  for (const auto& m : {"full", "recursive", "consensus"}) {
    REQUIRE(report.at("methods").contains(m));
    REQUIRE(!report.at("methods").at(m).is_null());
    REQUIRE(report.at("profile").at(m).at("exit_code") == 0);
    REQUIRE(report.at("profile").at(m).at("peak_rss_kb").get<long>() > 0);
  }
  const auto& rec = report.at("comparisons").at("recursive_vs_full");
  REQUIRE(rec.at("latent").at("max_abs_mean_diff").get<double>() < 1e-8);
  REQUIRE(rec.at("latent").at("max_abs_sd_diff").get<double>() < 1e-8);
  REQUIRE(std::abs(rec.at("log_marginal_likelihood_diff").get<double>()) < 1e-8);
  REQUIRE(rec.at("grid").at("max_abs_shifted_diff").get<double>() < 1e-10);
  // fixed-hyper consensus folds the same Gaussian information
  const auto& con = report.at("comparisons").at("consensus_vs_full");
  REQUIRE(con.at("latent").at("max_abs_mean_diff").get<double>() < 1e-6);
  REQUIRE(fs::exists(dir / "out" / "report.json"));
  fs::remove_all(dir);
}

TEST_CASE("compare reports are deterministic and cover free hyperparameters") {
  const fs::path dir = fresh_dir("compare_free");
  auto j = quick_st_config((dir / "out").string());
  j["free"] = ordered_json::array(
      {{{"name", "tau_obs"}, {"prior_sd", 1.5}}, {{"name", "tau_st"}, {"prior_sd", 1.5}}});
  const fs::path cfg_path = dir / "cfg.json";
  std::ofstream(cfg_path) << j.dump(2);
  const auto cfg = load_experiment_config(cfg_path);

  const auto first = run_experiment(cfg, cfg_path, RLGM_CLI_PATH, dir / "out");
  const auto second = run_experiment(cfg, cfg_path, RLGM_CLI_PATH, dir / "out2");

  // identical configuration, identical data and fits; only the profile may move
  REQUIRE(first.at("methods") == second.at("methods"));
  REQUIRE(first.at("comparisons") == second.at("comparisons"));

  const auto& rec = first.at("comparisons").at("recursive_vs_full");
  REQUIRE(rec.at("hyper").contains("tau_obs"));
  REQUIRE(rec.at("hyper").contains("tau_st"));
  REQUIRE(rec.at("grid").at("max_abs_shifted_diff").get<double>() < 1e-8);
  REQUIRE(rec.at("latent").at("max_mean_diff_sd_units").get<double>() < 0.1);
  const auto& full = first.at("methods").at("full");
  REQUIRE(full.at("hyper").at("tau_obs").contains("mode_natural"));
  REQUIRE(full.at("truth_metrics").at("blocks").contains("field"));
  fs::remove_all(dir);
}

TEST_CASE("compare handles a poisson experiment end to end") {
  const fs::path dir = fresh_dir("compare_pois");
  auto j = quick_st_config((dir / "out").string());
  j["simulate"]["family"] = "poisson";
  j["simulate"]["beta0"] = 0.8;
  j["free"] = ordered_json::array({{{"name", "tau_st"}, {"prior_sd", 1.5}}});
  j["methods"] = {"full", "recursive"};
  const fs::path cfg_path = dir / "cfg.json";
  std::ofstream(cfg_path) << j.dump(2);
  const auto cfg = load_experiment_config(cfg_path);
  const auto report = run_experiment(cfg, cfg_path, RLGM_CLI_PATH, dir / "out");

  REQUIRE(!report.at("methods").at("full").is_null());
  REQUIRE(!report.at("methods").at("recursive").is_null());
  const auto& rec = report.at("comparisons").at("recursive_vs_full");
  // conditional accumulation is approximate for count data but stays close
  REQUIRE(rec.at("grid").at("max_abs_shifted_diff").get<double>() < 0.1);
  REQUIRE(rec.at("latent").at("max_mean_diff_sd_units").get<double>() < 0.25);
  fs::remove_all(dir);
}

TEST_CASE("failed methods stay in the report as explicit nulls") {
  const fs::path dir = fresh_dir("compare_fail");
  auto j = quick_st_config((dir / "out").string());
  // a free hyperparameter the spatiotemporal model does not define makes the
  // child fits fail while the driver still emits its report
  j["free"] = ordered_json::array({{{"name", "tau_a"}}});
  const fs::path cfg_path = dir / "cfg.json";
  std::ofstream(cfg_path) << j.dump(2);
  const auto cfg = load_experiment_config(cfg_path);
  const auto report = run_experiment(cfg, cfg_path, RLGM_CLI_PATH, dir / "out");

  for (const auto& m : {"full", "recursive", "consensus"}) {
    REQUIRE(report.at("methods").at(m).is_null());
    REQUIRE(report.at("profile").at(m).at("exit_code") == 2);
  }
  REQUIRE(report.at("comparisons").at("recursive_vs_full").is_null());
  REQUIRE(fs::exists(dir / "out" / "report.json"));
  fs::remove_all(dir);
}

TEST_CASE("gaussian coverage of 95 percent intervals stays calibrated") {
  // pooled over seeds; nominal 0.95 within the acceptance band
  ExperimentConfig cfg;
  cfg.experiment = "spatiotemporal";
  cfg.st.nrow = 2;
  cfg.st.ncol = 3;
  cfg.st.n_time = 8;
  cfg.st.beta0 = 1.0;
  cfg.st.rho_t = 0.6;
  cfg.st.range = 2.0;
  cfg.free_hypers = {{"tau_obs", 0.0, 1.5}};
  const FitConfig fit_cfg = engine_fit_config(cfg.engine);

  int covered = 0, total = 0;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    cfg.seed = seed;
    const auto ed = simulate_experiment(cfg);
    const auto built = build_experiment_model(cfg, ed);
    const auto res = fit_on(*built.model, ObsSelection::all(*built.model), fit_cfg);
    const auto metrics = truth_metrics(*built.model, res.summary, ed.truth);
    const auto& field = metrics.at("blocks").at("field");
    covered += static_cast<int>(std::lround(field.at("coverage95").get<double>() *
                                            field.at("n").get<int>()));
    total += field.at("n").get<int>();
  }
  const double pooled = static_cast<double>(covered) / total;
  REQUIRE(pooled > 0.85);
  REQUIRE(pooled < 0.99);
}
