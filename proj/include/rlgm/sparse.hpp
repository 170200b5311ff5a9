#pragma once

// Symmetric sparse matrices stored as the lower triangle.  This is the
// universal currency for precision matrices throughout the library: block
// precisions, posterior precisions, consensus folds.  Storage keeps one
// entry per (row, col) with row >= col; the full matrix is implied.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rlgm/errors.hpp"

namespace rlgm {

using Triplet = Eigen::Triplet<double>;

class SparseSymmetric {
 public:
  SparseSymmetric() = default;

  // Entries must address the lower triangle (row >= col), 0-based, at most
  // once.  Entries with the same (row, col) are rejected, not summed, so a
  // builder bug cannot silently change a matrix.
  static SparseSymmetric from_triplets(int dim, const std::vector<Triplet>& entries) {
    require(dim >= 1, "SparseSymmetric: dim must be >= 1");
    std::set<std::pair<int, int>> seen;
    for (const auto& t : entries) {
      require(t.col() >= 0 && t.row() < dim, "SparseSymmetric: index out of range");
      require(t.row() >= t.col(), "SparseSymmetric: entry above the diagonal");
      require(seen.emplace(t.row(), t.col()).second, "SparseSymmetric: duplicate entry");
    }
    SparseSymmetric out;
    out.dim_ = dim;
    out.lower_.resize(dim, dim);
    out.lower_.setFromTriplets(entries.begin(), entries.end());
    out.lower_.makeCompressed();
    return out;
  }

  // Accepts a full symmetric sparse matrix and keeps its lower triangle.
  static SparseSymmetric from_full(const Eigen::SparseMatrix<double>& m) {
    require(m.rows() == m.cols(), "SparseSymmetric: matrix not square");
    SparseSymmetric out;
    out.dim_ = static_cast<int>(m.rows());
    out.lower_ = m.triangularView<Eigen::Lower>();
    out.lower_.makeCompressed();
    return out;
  }

  static SparseSymmetric identity(int dim, double scale = 1.0) {
    std::vector<Triplet> t;
    t.reserve(dim);
    for (int i = 0; i < dim; ++i) t.emplace_back(i, i, scale);
    return from_triplets(dim, t);
  }

  int dim() const { return dim_; }
  const Eigen::SparseMatrix<double>& lower() const { return lower_; }

  std::vector<Triplet> triplets() const {
    std::vector<Triplet> out;
    out.reserve(lower_.nonZeros());
    for (int k = 0; k < lower_.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(lower_, k); it; ++it)
        out.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), it.value());
    return out;
  }

  Eigen::SparseMatrix<double> full() const {
    Eigen::SparseMatrix<double> m = lower_.selfadjointView<Eigen::Lower>();
    m.makeCompressed();
    return m;
  }

  Eigen::MatrixXd dense() const { return Eigen::MatrixXd(full()); }

  // Quadratic form x' M x through the lower triangle (diagonal once,
  // off-diagonal twice).
  double quad_form(const Eigen::VectorXd& x) const {
    require(x.size() == dim_, "quad_form: dimension mismatch");
    double diag = 0.0, off = 0.0;
    for (int k = 0; k < lower_.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator it(lower_, k); it; ++it) {
        if (it.row() == it.col())
          diag += it.value() * x[it.row()] * x[it.col()];
        else
          off += it.value() * x[it.row()] * x[it.col()];
      }
    return diag + 2.0 * off;
  }

  Eigen::VectorXd multiply(const Eigen::VectorXd& x) const {
    require(x.size() == dim_, "multiply: dimension mismatch");
    return lower_.selfadjointView<Eigen::Lower>() * x;
  }

  SparseSymmetric plus(const SparseSymmetric& other) const {
    require(dim_ == other.dim_, "plus: dimension mismatch");
    SparseSymmetric out;
    out.dim_ = dim_;
    out.lower_ = lower_ + other.lower_;
    out.lower_.makeCompressed();
    return out;
  }

  SparseSymmetric minus(const SparseSymmetric& other) const {
    require(dim_ == other.dim_, "minus: dimension mismatch");
    SparseSymmetric out;
    out.dim_ = dim_;
    out.lower_ = lower_ - other.lower_;
    out.lower_.makeCompressed();
    return out;
  }

  SparseSymmetric scaled(double c) const {
    SparseSymmetric out;
    out.dim_ = dim_;
    out.lower_ = c * lower_;
    return out;
  }

  double max_diagonal() const {
    double m = 0.0;
    for (int i = 0; i < dim_; ++i) m = std::max(m, lower_.coeff(i, i));
    return m;
  }

  // Adds jitter * I in place on the diagonal.
  SparseSymmetric with_diagonal_added(double jitter) const {
    SparseSymmetric out;
    out.dim_ = dim_;
    Eigen::SparseMatrix<double> id(dim_, dim_);
    id.setIdentity();
    out.lower_ = lower_ + jitter * id;
    out.lower_.makeCompressed();
    return out;
  }

 private:
  int dim_ = 0;
  Eigen::SparseMatrix<double> lower_;  // column-major, row >= col entries only
};

// a (x) b with the product sparsity pattern.  The guard keeps an accidental
// pair of big factors from allocating an absurd result.
inline SparseSymmetric kronecker(const SparseSymmetric& a, const SparseSymmetric& b,
                                 std::int64_t max_dim = 10'000'000) {
  const std::int64_t nd = static_cast<std::int64_t>(a.dim()) * b.dim();
  require(nd <= max_dim, "kronecker: result dimension exceeds configured maximum");
  const int nb = b.dim();
  // Work on full triangles and reclaim the lower part at the end: a lower
  // triangle entry of a (x) b can come from upper-triangle entries of a or b.
  Eigen::SparseMatrix<double> af = a.full(), bf = b.full();
  std::vector<Triplet> out;
  out.reserve(static_cast<std::size_t>(af.nonZeros()) * bf.nonZeros() / 2 + nd);
  for (int ka = 0; ka < af.outerSize(); ++ka)
    for (Eigen::SparseMatrix<double>::InnerIterator ia(af, ka); ia; ++ia)
      for (int kb = 0; kb < bf.outerSize(); ++kb)
        for (Eigen::SparseMatrix<double>::InnerIterator ib(bf, kb); ib; ++ib) {
          const int row = static_cast<int>(ia.row()) * nb + static_cast<int>(ib.row());
          const int col = static_cast<int>(ia.col()) * nb + static_cast<int>(ib.col());
          if (row >= col) out.emplace_back(row, col, ia.value() * ib.value());
        }
  return SparseSymmetric::from_triplets(static_cast<int>(nd), out);
}

// Triplet CSV round trip.  Format: first line `dim=<n>`, then a `row,col,value`
// header and one line per stored lower-triangle entry.
inline void save_triplet_csv(const SparseSymmetric& m, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "save_triplet_csv: cannot open " + path);
  out << "dim=" << m.dim() << "\n";
  out << "row,col,value\n";
  out.precision(17);
  for (const auto& t : m.triplets())
    out << t.row() << "," << t.col() << "," << t.value() << "\n";
}

inline SparseSymmetric load_triplet_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "load_triplet_csv: cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "load_triplet_csv: empty file");
  require(line.rfind("dim=", 0) == 0, "load_triplet_csv: missing dim= header");
  const int dim = std::stoi(line.substr(4));
  std::getline(in, line);  // column header
  std::vector<Triplet> entries;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string r, c, v;
    require(static_cast<bool>(std::getline(ss, r, ',')) &&
                static_cast<bool>(std::getline(ss, c, ',')) &&
                static_cast<bool>(std::getline(ss, v, ',')),
            "load_triplet_csv: malformed line: " + line);
    entries.emplace_back(std::stoi(r), std::stoi(c), std::stod(v));
  }
  return SparseSymmetric::from_triplets(dim, entries);
}

}  // namespace rlgm
