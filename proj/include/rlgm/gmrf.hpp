#pragma once

// Precision constructors for the latent blocks: iid, first-order random walk,
// stationary AR1, a Matern-like lattice field, and Kronecker-separable
// space-time products of these.

#include <cmath>
#include <numbers>
#include <vector>

#include "rlgm/errors.hpp"
#include "rlgm/sparse.hpp"

namespace rlgm {

inline SparseSymmetric build_iid_precision(int n, double tau) {
  require(n >= 1, "iid: n must be >= 1");
  require(tau > 0.0, "iid: tau must be positive");
  return SparseSymmetric::identity(n, tau);
}

// Stationary AR1 with lag-one correlation rho and marginal precision tau:
// tridiagonal with 1/(1-rho^2) scaling so that the implied covariance is
// rho^|i-j| / tau.  A single node is just [tau].
inline SparseSymmetric build_ar1_precision(int n, double rho, double tau) {
  require(n >= 1, "ar1: n must be >= 1");
  require(std::abs(rho) < 1.0, "ar1: |rho| must be < 1");
  require(tau > 0.0, "ar1: tau must be positive");
  if (n == 1) return SparseSymmetric::from_triplets(1, {Triplet(0, 0, tau)});
  const double s = tau / (1.0 - rho * rho);
  std::vector<Triplet> t;
  t.reserve(2 * n);
  for (int i = 0; i < n; ++i) {
    const bool interior = i > 0 && i < n - 1;
    t.emplace_back(i, i, interior ? s * (1.0 + rho * rho) : s);
    if (i > 0) t.emplace_back(i, i - 1, -s * rho);
  }
  return SparseSymmetric::from_triplets(n, t);
}

// tau times the first-difference structure matrix; rank n-1 with the constant
// vector in its null space.  Callers pair it with a sum-to-zero constraint.
inline SparseSymmetric build_rw1_precision(int n, double tau) {
  require(n >= 2, "rw1: n must be >= 2");
  require(tau > 0.0, "rw1: tau must be positive");
  std::vector<Triplet> t;
  t.reserve(2 * n);
  for (int i = 0; i < n; ++i) {
    const bool interior = i > 0 && i < n - 1;
    t.emplace_back(i, i, tau * (interior ? 2.0 : 1.0));
    if (i > 0) t.emplace_back(i, i - 1, -tau);
  }
  return SparseSymmetric::from_triplets(n, t);
}

// Matern-like field on a regular lattice from the second-order stencil
// (kappa^2 I + G)^2 with G the 4-neighbour graph Laplacian and
// kappa = sqrt(8)/range.  The constant tau/(4 pi kappa^2) scales the result
// so the interior marginal precision is approximately tau (the lattice Green
// function inflates the target variance 1/tau by roughly 5..20% at desk
// sizes, which is inside the tolerance every consumer here uses).
inline SparseSymmetric build_lattice_matern_precision(int nrow, int ncol, double range,
                                                      double tau) {
  require(nrow >= 2 && ncol >= 2, "lattice: nrow and ncol must be >= 2");
  require(range > 0.0, "lattice: range must be positive");
  require(tau > 0.0, "lattice: tau must be positive");
  const int n = nrow * ncol;
  const double kappa2 = 8.0 / (range * range);
  Eigen::SparseMatrix<double> k(n, n);
  {
    std::vector<Triplet> t;
    t.reserve(5 * n);
    auto id = [ncol](int r, int c) { return r * ncol + c; };
    for (int r = 0; r < nrow; ++r)
      for (int c = 0; c < ncol; ++c) {
        int deg = 0;
        if (r > 0) ++deg;
        if (r + 1 < nrow) ++deg;
        if (c > 0) ++deg;
        if (c + 1 < ncol) ++deg;
        t.emplace_back(id(r, c), id(r, c), kappa2 + deg);
        if (r > 0) t.emplace_back(id(r, c), id(r - 1, c), -1.0);
        if (c > 0) t.emplace_back(id(r, c), id(r, c - 1), -1.0);
      }
    Eigen::SparseMatrix<double> klow(n, n);
    klow.setFromTriplets(t.begin(), t.end());
    k = klow.selfadjointView<Eigen::Lower>();
  }
  const double scale = tau / (4.0 * std::numbers::pi * kappa2);
  Eigen::SparseMatrix<double> q = (k * k).eval();
  return SparseSymmetric::from_full(scale * q);
}

// Separable space-time precision: tau_st * ar1(n_time, rho_t) (x)
// lattice(nrow, ncol, range).  Both factors are built with unit tau so the
// overall level is carried by tau_st alone.  Node index = time * n_space +
// site, matching the Kronecker order.
inline SparseSymmetric build_kronecker_ar1_lattice_precision(int n_time, int nrow, int ncol,
                                                             double rho_t, double range,
                                                             double tau_st) {
  require(tau_st > 0.0, "kronecker: tau_st must be positive");
  const SparseSymmetric qt = build_ar1_precision(n_time, rho_t, 1.0);
  const SparseSymmetric qs = build_lattice_matern_precision(nrow, ncol, range, 1.0);
  return kronecker(qt, qs).scaled(tau_st);
}

}  // namespace rlgm
