#pragma once

// Sparse Cholesky factorization of SparseSymmetric precisions, with the
// operations every Gaussian computation here needs: solves, log-determinant,
// seeded sampling, and marginal variances by selected inversion.
//
// Semidefinite inputs (intrinsic blocks such as random walks) are made
// factorizable by adding diagonal jitter relative to the largest diagonal
// entry; the jitter actually used is recorded on the factor.

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>

#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <vector>

#include "rlgm/errors.hpp"
#include "rlgm/sparse.hpp"

namespace rlgm {

struct JitterPolicy {
  double initial = 1e-5;  // first jitter, relative to max diagonal
  double growth = 10.0;   // multiplier between attempts
  int max_attempts = 6;   // attempts after the jitter-free one
};

namespace detail {
using SimplicialLLT =
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>, Eigen::Lower,
                         Eigen::AMDOrdering<int>>;
}

class CholeskyFactor {
 public:
  int dim() const { return dim_; }
  double log_det() const { return log_det_; }
  double jitter_used() const { return jitter_; }

  // Lower factor and fill-reducing permutation satisfy P Q_j P' = L L',
  // where Q_j is the input plus any recorded jitter.
  const Eigen::SparseMatrix<double>& matrix_l() const { return l_; }
  const Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int>& permutation() const {
    return llt_->permutationP();
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
    require(rhs.size() == dim_, "solve: rhs length mismatch");
    return llt_->solve(rhs);
  }

  Eigen::MatrixXd solve_matrix(const Eigen::MatrixXd& rhs) const {
    require(rhs.rows() == dim_, "solve_matrix: rhs rows mismatch");
    return llt_->solve(rhs);
  }

  // mean + P' L^-T z with z standard normal: the draw has precision Q_j.
  Eigen::VectorXd sample(const Eigen::VectorXd& mean, std::mt19937_64& rng) const {
    require(mean.size() == dim_, "sample: mean length mismatch");
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::VectorXd z(dim_);
    for (int i = 0; i < dim_; ++i) z[i] = gauss(rng);
    Eigen::VectorXd w = l_.triangularView<Eigen::Lower>().adjoint().solve(z);
    return mean + llt_->permutationPinv() * w;
  }

  friend CholeskyFactor cholesky(const SparseSymmetric&, const JitterPolicy&);

 private:
  int dim_ = 0;
  double log_det_ = 0.0;
  double jitter_ = 0.0;
  Eigen::SparseMatrix<double> l_;  // copy of the factor for selected inversion
  std::shared_ptr<detail::SimplicialLLT> llt_;
};

inline CholeskyFactor cholesky(const SparseSymmetric& q, const JitterPolicy& policy = {}) {
  const double scale = std::max(q.max_diagonal(), std::numeric_limits<double>::min());
  auto attempt = [&](double jitter, CholeskyFactor& out) -> bool {
    const SparseSymmetric qj = jitter > 0.0 ? q.with_diagonal_added(jitter) : q;
    auto llt = std::make_shared<detail::SimplicialLLT>();
    llt->compute(qj.full());
    if (llt->info() != Eigen::Success) return false;
    Eigen::SparseMatrix<double> l = llt->matrixL();
    const Eigen::VectorXd d = l.diagonal();
    const double dmin = d.minCoeff(), dmax = d.maxCoeff();
    // Treat a collapsed pivot as a semidefinite input even when Eigen
    // reports success; it would poison log_det and solves.
    if (!(dmin > 0.0) || !std::isfinite(dmin) || (dmin / dmax) * (dmin / dmax) < 1e-13)
      return false;
    out.dim_ = q.dim();
    out.jitter_ = jitter;
    out.l_ = std::move(l);
    out.llt_ = std::move(llt);
    out.log_det_ = 2.0 * d.array().log().sum();
    return true;
  };
  CholeskyFactor f;
  if (attempt(0.0, f)) return f;
  double rel = policy.initial;
  for (int k = 0; k < policy.max_attempts; ++k, rel *= policy.growth)
    if (attempt(rel * scale, f)) return f;
  throw numerical_error("cholesky: matrix not factorizable within jitter policy");
}

namespace detail {

// Selected inversion (Takahashi recurrences) on the factor's own sparsity
// pattern.  With P Q P' = L L' and S = (L L')^-1:
//   S_jj = 1/L_jj^2 - (1/L_jj) sum_{k>j} L_kj S_kj
//   S_ij = -(1/L_jj) sum_{k>j} L_kj S_{max(i,k),min(i,k)}   (i > j)
// computed for columns j = n-1..0, rows descending within each column.  The
// factor pattern is chordal, so every entry the sums touch is itself on the
// pattern and the recurrence is exact.
inline Eigen::VectorXd selected_inverse_diagonal(const Eigen::SparseMatrix<double>& l) {
  const int n = static_cast<int>(l.rows());
  const int* outer = l.outerIndexPtr();
  const int* inner = l.innerIndexPtr();
  const double* lv = l.valuePtr();
  std::vector<double> sig(static_cast<std::size_t>(l.nonZeros()), 0.0);

  auto find = [&](int row, int col) -> int {
    int lo = outer[col], hi = outer[col + 1];
    while (lo < hi) {
      const int mid = (lo + hi) / 2;
      if (inner[mid] < row)
        lo = mid + 1;
      else
        hi = mid;
    }
    return (lo < outer[col + 1] && inner[lo] == row) ? lo : -1;
  };

  for (int j = n - 1; j >= 0; --j) {
    const int beg = outer[j], end = outer[j + 1];
    const double ljj = lv[beg];  // rows are sorted, diagonal first
    for (int idx = end - 1; idx >= beg; --idx) {
      const int i = inner[idx];
      double acc = 0.0;
      for (int kidx = beg + 1; kidx < end; ++kidx) {
        const int k = inner[kidx];
        const int sidx = find(std::max(i, k), std::min(i, k));
        if (sidx >= 0) acc += lv[kidx] * sig[sidx];
      }
      sig[idx] = (i == j) ? 1.0 / (ljj * ljj) - acc / ljj : -acc / ljj;
    }
  }

  Eigen::VectorXd diag(n);
  for (int j = 0; j < n; ++j) diag[j] = sig[outer[j]];
  return diag;
}

}  // namespace detail

// diag(Q_j^-1) via selected inversion; falls back to dense inversion for
// modest dimensions if the selected path ever produces a non-finite value.
inline Eigen::VectorXd marginal_variances(const CholeskyFactor& f,
                                          int dense_fallback_dim = 5000) {
  Eigen::VectorXd perm_diag = detail::selected_inverse_diagonal(f.matrix_l());
  const auto& idx = f.permutation().indices();
  Eigen::VectorXd out(f.dim());
  for (int i = 0; i < f.dim(); ++i) out[i] = perm_diag[idx[i]];
  if (!out.allFinite()) {
    require(f.dim() <= dense_fallback_dim,
            "marginal_variances: selected inversion failed beyond dense fallback size");
    Eigen::MatrixXd id = Eigen::MatrixXd::Identity(f.dim(), f.dim());
    out = f.solve_matrix(id).diagonal();
  }
  return out;
}

inline Eigen::VectorXd sample_gmrf(const CholeskyFactor& f, const Eigen::VectorXd& mean,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return f.sample(mean, rng);
}

}  // namespace rlgm
