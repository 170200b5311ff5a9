#pragma once

#include <random>
#include <string>
#include <vector>

#include "rlgm/model.hpp"
#include "rlgm/sparse.hpp"

namespace rlgm::testing {

inline Eigen::SparseMatrix<double> sparse_from_dense(const Eigen::MatrixXd& d) {
  return d.sparseView();
}

inline Eigen::SparseMatrix<double> identity_design(int n) {
  Eigen::SparseMatrix<double> a(n, n);
  a.setIdentity();
  return a;
}

inline HyperParam fixed_hyper(const std::string& name, Transform t, double internal_value) {
  HyperParam p;
  p.name = name;
  p.transform = t;
  p.fixed = internal_value;
  return p;
}

inline HyperParam free_hyper(const std::string& name, Transform t, double prior_mean = 0.0,
                             double prior_sd = 1.0) {
  HyperParam p;
  p.name = name;
  p.transform = t;
  p.prior_mean = prior_mean;
  p.prior_sd = prior_sd;
  return p;
}

// Random sparse diagonally dominant SPD matrix: a banded core plus a few
// scattered off-diagonal entries, diagonal = row absolute sum + margin.
inline SparseSymmetric make_random_spd(int dim, std::mt19937_64& rng, double extra_density = 0.02) {
  std::uniform_real_distribution<double> val(-1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<double>> offdiag(dim);
  std::vector<Triplet> t;
  std::vector<double> rowsum(dim, 0.0);
  auto add = [&](int r, int c, double v) {
    t.emplace_back(r, c, v);
    rowsum[r] += std::abs(v);
    rowsum[c] += std::abs(v);
  };
  for (int i = 1; i < dim; ++i) add(i, i - 1, val(rng));
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j + 1 < i; ++j)
      if (unit(rng) < extra_density) add(i, j, val(rng));
  for (int i = 0; i < dim; ++i) t.emplace_back(i, i, rowsum[i] + 0.5 + unit(rng));
  return SparseSymmetric::from_triplets(dim, t);
}

}  // namespace rlgm::testing
