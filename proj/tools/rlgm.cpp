// Command line front end: simulate datasets, fit them with the full, the
// recursive, or the sequential consensus method, compare the methods in
// child processes, and print conjugate oracle posteriors.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "rlgm/experiment.hpp"
#include "rlgm/oracle.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string partitions;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void apply_overrides(rlgm::ExperimentConfig& cfg, const CommonArgs& args) {
  if (args.seed_set) cfg.seed = args.seed;
  if (!args.out.empty()) cfg.out = args.out;
  if (args.partitions.empty()) return;
  const auto colon = args.partitions.find(':');
  std::string rule = cfg.partitions.rule;
  std::string count = args.partitions;
  if (colon != std::string::npos) {
    rule = args.partitions.substr(0, colon);
    count = args.partitions.substr(colon + 1);
  }
  if (rule != "temporal" && rule != "rows")
    throw rlgm::validation_error("--partitions: rule must be temporal or rows");
  try {
    cfg.partitions.count = std::stoi(count);
  } catch (const std::exception&) {
    throw rlgm::validation_error("--partitions: expected [rule:]count");
  }
  if (cfg.partitions.count < 1)
    throw rlgm::validation_error("--partitions: count must be positive");
  cfg.partitions.rule = rule;
}

void write_fit_outputs(const fs::path& out_dir, const fs::path& data_dir,
                       const rlgm::ModelAssembly& m, const rlgm::PosteriorSummary& s) {
  fs::create_directories(out_dir);
  rlgm::write_latent_marginals_csv(out_dir / "latent_marginals.csv", s.latent);
  rlgm::write_hyper_marginals_csv(out_dir / "hyper_marginals.csv", s.hyper);
  rlgm::write_summary_json(out_dir / "summary.json", s);
  if (fs::exists(data_dir / "truth.csv")) {
    const auto truth = rlgm::read_truth_csv(data_dir / "truth.csv");
    auto out = rlgm::detail::open_out(out_dir / "metrics.json");
    out << rlgm::truth_metrics(m, s, truth).dump(2) << "\n";
  }
}

int run_simulate(const CommonArgs& args) {
  auto cfg = rlgm::load_experiment_config(args.config);
  apply_overrides(cfg, args);
  const fs::path out_dir = cfg.out;
  fs::create_directories(out_dir);
  const auto ed = rlgm::simulate_experiment(cfg);
  rlgm::write_experiment_data(out_dir, ed);
  std::cout << "wrote " << ed.data.rows.size() << " rows to " << out_dir.string() << "\n";
  return 0;
}

int run_fit(const std::string& method, const CommonArgs& args) {
  auto cfg = rlgm::load_experiment_config(args.config);
  apply_overrides(cfg, args);
  const fs::path data_dir = args.data;
  const fs::path out_dir = args.out.empty() ? fs::path(cfg.out) / method : fs::path(args.out);
  const auto ed = rlgm::read_experiment_data(data_dir, cfg);
  const auto built = rlgm::build_experiment_model(cfg, ed);
  const auto fit_cfg = rlgm::engine_fit_config(cfg.engine);

  rlgm::PosteriorSummary summary;
  if (method == "full") {
    auto res = rlgm::fit_on(*built.model, rlgm::ObsSelection::all(*built.model), fit_cfg);
    summary = std::move(res.summary);
    fs::create_directories(out_dir);
    rlgm::write_grid_csv(out_dir / "grid.csv", *built.model, res.grid);
  } else if (method == "recursive") {
    const auto parts = rlgm::experiment_partitions(built, cfg.partitions);
    rlgm::RecursiveConfig rc;
    rc.fit = fit_cfg;
    const auto t0 = std::chrono::steady_clock::now();
    auto state = rlgm::init_recursion(built.model, parts.front(), rc);
    for (std::size_t p = 1; p < parts.size(); ++p) state = rlgm::step(std::move(state), parts[p]);
    summary = rlgm::finalize(state);
    summary.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fs::create_directories(out_dir);
    rlgm::write_grid_csv(out_dir / "grid.csv", *built.model, state.grid);
    rlgm::write_recursive_trace_csv(out_dir / "trace.csv", state);
  } else {
    const auto parts = rlgm::experiment_partitions(built, cfg.partitions);
    rlgm::ConsensusConfig cc;
    cc.fit = fit_cfg;
    cc.multivariate = cfg.engine.consensus_multivariate;
    summary = rlgm::sequential_consensus_fit(*built.model, parts, cc);
  }

  write_fit_outputs(out_dir, data_dir, *built.model, summary);
  std::cout << method << " fit: lml " << summary.log_marginal_likelihood << ", "
            << summary.runtime_seconds << "s\n";
  return 0;
}

int run_compare(const CommonArgs& args) {
  auto cfg = rlgm::load_experiment_config(args.config);
  apply_overrides(cfg, args);
  const fs::path cli = fs::read_symlink("/proc/self/exe");
  const auto report = rlgm::run_experiment(cfg, fs::absolute(args.config), cli, cfg.out);
  std::cout << "report written to " << (fs::path(cfg.out) / "report.json").string() << "\n";
  for (const auto& m : cfg.methods) {
    const auto& p = report.at("profile").at(m);
    std::cout << "  " << m << ": exit " << p.at("exit_code").get<int>() << ", "
              << p.at("wall_seconds").get<double>() << "s, "
              << p.at("peak_rss_kb").get<long>() << " KB\n";
  }
  return 0;
}

int run_oracle(const CommonArgs& args) {
  auto cfg = rlgm::load_experiment_config(args.config);
  apply_overrides(cfg, args);
  const fs::path data_dir = args.data;
  const fs::path out_dir = args.out.empty() ? fs::path(cfg.out) / "oracle" : fs::path(args.out);
  const auto ed = rlgm::read_experiment_data(data_dir, cfg);
  const auto built = rlgm::build_experiment_model(cfg, ed);
  const auto& m = *built.model;

  if (m.hypers.free_dim() != 0)
    throw rlgm::validation_error("oracle: all hyperparameters must be fixed");
  for (const auto& b : m.obs)
    if (b.likelihood.family != rlgm::Family::gaussian)
      throw rlgm::validation_error("oracle: only Gaussian observation blocks are supported");

  Eigen::VectorXd theta(static_cast<int>(m.hypers.params.size()));
  for (std::size_t i = 0; i < m.hypers.params.size(); ++i)
    theta[static_cast<int>(i)] = *m.hypers.params[i].fixed;

  const auto slices = rlgm::make_slices(m, rlgm::ObsSelection::all(m));
  const auto og = rlgm::oracle_conjugate_gaussian(m, theta, slices);

  fs::create_directories(out_dir);
  {
    auto out = rlgm::detail::open_out(out_dir / "oracle_latent.csv");
    out << "node,mean,sd\n";
    for (int i = 0; i < og.mean.size(); ++i)
      out << i << ',' << rlgm::detail::fmt(og.mean[i]) << ','
          << rlgm::detail::fmt(std::sqrt(og.marginal_var[i])) << '\n';
  }
  rlgm::ordered_json j;
  j["log_evidence"] = og.log_evidence;
  j["n_latent"] = m.latent_dim;
  auto out = rlgm::detail::open_out(out_dir / "oracle_summary.json");
  out << j.dump(2) << "\n";
  std::cout << "oracle evidence " << og.log_evidence << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent Gaussian model toolkit: simulate, fit, compare"};
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* sub, bool needs_data) {
    sub->add_option("--config", args.config, "experiment config JSON")->required();
    auto* seed = sub->add_option("--seed", args.seed, "override the config seed");
    sub->parse_complete_callback([&args, seed] { args.seed_set = seed->count() > 0; });
    sub->add_option("--out", args.out, "output directory");
    sub->add_option("--partitions", args.partitions, "partition override, [rule:]count");
    auto* data = sub->add_option("--data", args.data, "directory holding data.csv");
    if (needs_data) data->required();
  };

  auto* sim = app.add_subcommand("simulate", "draw a dataset and write it out");
  add_common(sim, false);
  auto* fit = app.add_subcommand("fit", "full fit on all data");
  add_common(fit, true);
  auto* rec = app.add_subcommand("fit-recursive", "partitioned recursive fit");
  add_common(rec, true);
  auto* con = app.add_subcommand("fit-consensus", "sequential consensus fit");
  add_common(con, true);
  auto* cmp = app.add_subcommand("compare", "run all configured methods and report");
  add_common(cmp, false);
  auto* orc = app.add_subcommand("oracle", "conjugate Gaussian oracle posterior");
  add_common(orc, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (sim->parsed()) return run_simulate(args);
    if (fit->parsed()) return run_fit("full", args);
    if (rec->parsed()) return run_fit("recursive", args);
    if (con->parsed()) return run_fit("consensus", args);
    if (cmp->parsed()) return run_compare(args);
    return run_oracle(args);
  } catch (const rlgm::validation_error& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const rlgm::numerical_error& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
