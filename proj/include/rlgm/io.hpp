#pragma once

// File formats for experiments: long-format data CSV, truth tables, region
// membership/measure tables, triplet matrices, marginal curves, run
// summaries, and the recursive step trace.  Numbers print with %.17g so a
// seeded run writes byte-identical files.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rlgm/fusion.hpp"
#include "rlgm/marginals.hpp"
#include "rlgm/recursive.hpp"
#include "rlgm/simulate.hpp"

namespace rlgm {

using ordered_json = nlohmann::ordered_json;

namespace detail {

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw validation_error("cannot write " + path.string());
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw validation_error("cannot read " + path.string());
  return in;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline void write_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
  auto out = detail::open_out(path);
  out << "response,site,time,level,source,phi\n";
  for (const auto& r : data.rows)
    out << detail::fmt(r.response) << ',' << r.site << ',' << r.time << ',' << r.level << ','
        << r.source << ',' << detail::fmt(r.phi) << '\n';
}

inline Dataset read_dataset_csv(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "dataset: empty file " + path.string());
  Dataset data;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv(line);
    require(f.size() == 6, "dataset: malformed row in " + path.string());
    SimRow r;
    r.response = std::stod(f[0]);
    r.site = std::stoi(f[1]);
    r.time = std::stoi(f[2]);
    r.level = std::stoi(f[3]);
    r.source = std::stoi(f[4]);
    r.phi = std::stod(f[5]);
    data.rows.push_back(r);
  }
  return data;
}

inline void write_truth_csv(const std::filesystem::path& path, const SimTruth& truth) {
  auto out = detail::open_out(path);
  out << "name,index,value\n";
  for (const auto& e : truth.values)
    out << e.name << ',' << e.index << ',' << detail::fmt(e.value) << '\n';
}

inline SimTruth read_truth_csv(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "truth: empty file " + path.string());
  SimTruth truth;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv(line);
    require(f.size() == 3, "truth: malformed row in " + path.string());
    truth.add(f[0], std::stoi(f[1]), std::stod(f[2]));
  }
  return truth;
}

// Region tables: `<name>_members.csv` holds (region_id, site_index) rows in
// region order, `<name>_measures.csv` holds one (region_id, measure) row each.
inline void write_regions_csv(const std::filesystem::path& dir, const std::string& name,
                              const std::vector<Region>& regions) {
  auto members = detail::open_out(dir / (name + "_members.csv"));
  members << "region_id,site_index\n";
  for (const auto& r : regions)
    for (int p : r.member_points) members << r.id << ',' << p << '\n';
  auto measures = detail::open_out(dir / (name + "_measures.csv"));
  measures << "region_id,measure\n";
  for (const auto& r : regions) measures << r.id << ',' << detail::fmt(r.measure) << '\n';
}

inline std::vector<Region> read_regions_csv(const std::filesystem::path& dir,
                                            const std::string& name) {
  std::vector<Region> regions;
  std::map<std::string, std::size_t> index;
  {
    auto in = detail::open_in(dir / (name + "_members.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto f = detail::split_csv(line);
      require(f.size() == 2, "regions: malformed member row");
      auto it = index.find(f[0]);
      if (it == index.end()) {
        index.emplace(f[0], regions.size());
        Region r;
        r.id = f[0];
        regions.push_back(std::move(r));
        it = index.find(f[0]);
      }
      regions[it->second].member_points.push_back(std::stoi(f[1]));
    }
  }
  {
    auto in = detail::open_in(dir / (name + "_measures.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto f = detail::split_csv(line);
      require(f.size() == 2, "regions: malformed measure row");
      auto it = index.find(f[0]);
      require(it != index.end(), "regions: measure for unknown region " + f[0]);
      regions[it->second].measure = std::stod(f[1]);
    }
  }
  return regions;
}

// Triplet serialization: `dim=<n>` (square symmetric, lower triangle) or
// `dim=<rows>x<cols>` (rectangular operators), then row,col,value lines.
inline void write_matrix_csv(const std::filesystem::path& path, const SparseSymmetric& m) {
  auto out = detail::open_out(path);
  out << "dim=" << m.dim() << '\n';
  for (const auto& t : m.triplets())
    out << t.row() << ',' << t.col() << ',' << detail::fmt(t.value()) << '\n';
}

inline SparseSymmetric read_matrix_csv(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line.rfind("dim=", 0) == 0,
          "matrix: missing dim header in " + path.string());
  const int dim = std::stoi(line.substr(4));
  std::vector<Triplet> t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv(line);
    require(f.size() == 3, "matrix: malformed triplet in " + path.string());
    t.emplace_back(std::stoi(f[0]), std::stoi(f[1]), std::stod(f[2]));
  }
  return SparseSymmetric::from_triplets(dim, t);
}

inline void write_operator_csv(const std::filesystem::path& path, const AggregationOperator& op) {
  auto out = detail::open_out(path);
  out << "dim=" << op.rows() << 'x' << op.cols() << '\n';
  for (int k = 0; k < op.matrix.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(op.matrix, k); it; ++it)
      out << it.row() << ',' << it.col() << ',' << detail::fmt(it.value()) << '\n';
}

// Marginal curves in long format, one row per grid point; plot-ready.
inline void write_latent_marginals_csv(const std::filesystem::path& path,
                                       const std::vector<LatentMarginal>& latent) {
  auto out = detail::open_out(path);
  out << "node,mean,sd,x,density\n";
  for (std::size_t i = 0; i < latent.size(); ++i) {
    const auto& lm = latent[i];
    for (int j = 0; j < lm.grid.size(); ++j)
      out << i << ',' << detail::fmt(lm.mean) << ',' << detail::fmt(lm.sd) << ','
          << detail::fmt(lm.grid[j]) << ',' << detail::fmt(lm.density[j]) << '\n';
  }
}

inline std::vector<LatentMarginal> read_latent_marginals_csv(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::string line;
  std::getline(in, line);
  std::vector<LatentMarginal> out;
  std::vector<std::vector<double>> xs, ds;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv(line);
    require(f.size() == 5, "latent marginals: malformed row");
    const std::size_t node = static_cast<std::size_t>(std::stoul(f[0]));
    require(node <= out.size(), "latent marginals: nodes out of order");
    if (node == out.size()) {
      LatentMarginal lm;
      lm.mean = std::stod(f[1]);
      lm.sd = std::stod(f[2]);
      out.push_back(lm);
      xs.emplace_back();
      ds.emplace_back();
    }
    xs[node].push_back(std::stod(f[3]));
    ds[node].push_back(std::stod(f[4]));
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].grid = Eigen::Map<const Eigen::VectorXd>(xs[i].data(), static_cast<long>(xs[i].size()));
    out[i].density =
        Eigen::Map<const Eigen::VectorXd>(ds[i].data(), static_cast<long>(ds[i].size()));
  }
  return out;
}

inline void write_hyper_marginals_csv(const std::filesystem::path& path,
                                      const std::vector<HyperMarginal>& hyper) {
  auto out = detail::open_out(path);
  out << "name,x_internal,density_internal,x_natural,density_natural\n";
  for (const auto& hm : hyper)
    for (int j = 0; j < hm.internal_grid.size(); ++j)
      out << hm.name << ',' << detail::fmt(hm.internal_grid[j]) << ','
          << detail::fmt(hm.internal_density[j]) << ',' << detail::fmt(hm.natural_grid[j]) << ','
          << detail::fmt(hm.natural_density[j]) << '\n';
}

inline ordered_json summary_to_json(const PosteriorSummary& s) {
  ordered_json j;
  j["method"] = s.method;
  j["log_marginal_likelihood"] = s.log_marginal_likelihood;
  j["runtime_seconds"] = s.runtime_seconds;
  j["newton_iters_total"] = s.newton_iters_total;
  j["feval_count"] = s.feval_count;
  j["bfgs_iters"] = s.bfgs_iters;
  j["n_latent"] = s.latent.size();
  ordered_json hyper = ordered_json::object();
  for (const auto& hm : s.hyper) {
    ordered_json h;
    h["internal_mean"] = hm.internal_mean;
    h["internal_sd"] = hm.internal_sd;
    h["natural_mean"] = hm.natural_mean;
    h["natural_sd"] = hm.natural_sd;
    h["mode_internal"] = hm.mode_internal;
    h["mode_natural"] = hm.mode_natural;
    hyper[hm.name] = std::move(h);
  }
  j["hyper"] = std::move(hyper);
  j["warnings"] = s.warnings;
  return j;
}

inline void write_summary_json(const std::filesystem::path& path, const PosteriorSummary& s) {
  auto out = detail::open_out(path);
  out << summary_to_json(s).dump(2) << '\n';
}

inline ordered_json read_json(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  return ordered_json::parse(in);
}

// Support-point table: free-hyper coordinates, then the accumulated log
// density and integration weight.
inline void write_grid_csv(const std::filesystem::path& path, const ModelAssembly& m,
                           const HyperGrid& grid) {
  auto out = detail::open_out(path);
  const auto free = m.hypers.free_indices();
  for (int f : free) out << m.hypers.params[static_cast<std::size_t>(f)].name << ',';
  out << "log_density,log_weight\n";
  for (int k = 0; k < grid.points.rows(); ++k) {
    for (int d = 0; d < grid.points.cols(); ++d) out << detail::fmt(grid.points(k, d)) << ',';
    out << detail::fmt(grid.log_density[k]) << ',' << detail::fmt(grid.log_weight[k]) << '\n';
  }
}

struct GridFile {
  std::vector<std::string> names;
  Eigen::MatrixXd points;
  Eigen::VectorXd log_density, log_weight;
};

inline GridFile read_grid_csv(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "grid: empty file " + path.string());
  auto head = detail::split_csv(line);
  require(head.size() >= 2 && head[head.size() - 2] == "log_density",
          "grid: malformed header in " + path.string());
  GridFile g;
  for (std::size_t i = 0; i + 2 < head.size(); ++i) g.names.push_back(head[i]);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv(line);
    require(f.size() == head.size(), "grid: malformed row in " + path.string());
    std::vector<double> r;
    for (const auto& v : f) r.push_back(std::stod(v));
    rows.push_back(std::move(r));
  }
  const int k = static_cast<int>(rows.size());
  const int d = static_cast<int>(g.names.size());
  g.points.resize(k, d);
  g.log_density.resize(k);
  g.log_weight.resize(k);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < d; ++j) g.points(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    g.log_density[i] = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)];
    g.log_weight[i] = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(d) + 1];
  }
  return g;
}

inline void write_recursive_trace_csv(const std::filesystem::path& path,
                                      const RecursiveState& state) {
  auto out = detail::open_out(path);
  out << "step,point,cond_lml,newton_iters,converged,mode_shift,boundary_mass\n";
  for (const auto& r : state.trace)
    out << r.step << ',' << r.point << ',' << detail::fmt(r.cond_lml) << ',' << r.newton_iters
        << ',' << (r.converged ? 1 : 0) << ',' << detail::fmt(r.mode_shift) << ','
        << detail::fmt(r.boundary_mass) << '\n';
}

// Truth recovery: per-block RMSE of posterior means and empirical coverage
// of central 95% intervals, matched through block names.
inline ordered_json truth_metrics(const ModelAssembly& m, const PosteriorSummary& s,
                                  const SimTruth& truth) {
  ordered_json blocks = ordered_json::object();
  double sq_all = 0.0;
  int n_all = 0, cover_all = 0;
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const auto& blk = m.blocks[b];
    bool have = false;
    for (const auto& e : truth.values)
      if (e.name == blk.name) have = true;
    if (!have) continue;
    const int off = m.offsets[b];
    double sq = 0.0;
    int cover = 0;
    for (int i = 0; i < blk.size(); ++i) {
      const auto& lm = s.latent[static_cast<std::size_t>(off + i)];
      const double t = truth.get(blk.name, i);
      sq += (lm.mean - t) * (lm.mean - t);
      if (std::abs(t - lm.mean) <= 1.959963984540054 * lm.sd) ++cover;
    }
    ordered_json jb;
    jb["rmse"] = std::sqrt(sq / blk.size());
    jb["coverage95"] = static_cast<double>(cover) / blk.size();
    jb["n"] = blk.size();
    blocks[blk.name] = std::move(jb);
    sq_all += sq;
    n_all += blk.size();
    cover_all += cover;
  }
  ordered_json j;
  j["blocks"] = std::move(blocks);
  if (n_all > 0) {
    j["rmse"] = std::sqrt(sq_all / n_all);
    j["coverage95"] = static_cast<double>(cover_all) / n_all;
  }
  return j;
}

}  // namespace rlgm
