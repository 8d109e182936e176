#pragma once

// Symmetric linear operators: the only interface between models (which
// supply Hessian-vector products) and the spectral/geometric code.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>

#include "prunability/parallel.hpp"

namespace prunability {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// A dimension plus a matrix-vector product. `apply` must be pure and
/// re-entrant; operators are shared read-only between threads.
class SymmetricOperator {
 public:
  using ApplyFn = std::function<Vector(const Vector&)>;

  SymmetricOperator(Eigen::Index dim, ApplyFn apply);

  Eigen::Index dim() const { return dim_; }

  /// Throws DimensionError when v.size() != dim().
  Vector apply(const Vector& v) const;

 private:
  Eigen::Index dim_;
  ApplyFn apply_;
};

/// Dense D x D symmetric matrix. The constructor symmetrizes its input as
/// (M + M^T) / 2, so entries(i,j) == entries(j,i) holds exactly.
class DenseSymmetric {
 public:
  DenseSymmetric() = default;
  explicit DenseSymmetric(const Matrix& m);

  static DenseSymmetric identity(Eigen::Index dim);
  static DenseSymmetric diagonal(const Vector& d);

  Eigen::Index dim() const { return m_.rows(); }
  const Matrix& entries() const { return m_; }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }

  /// ||M - M^T||_F / 2 of the matrix handed to the constructor.
  double symmetrization_residual() const { return residual_; }

 private:
  Matrix m_;
  double residual_ = 0.0;
};

/// Operator backed by a dense matrix. Parallel mode splits rows across
/// OpenMP threads; each row is an independent dot product, so results are
/// bitwise identical to the serial path.
SymmetricOperator make_dense_operator(DenseSymmetric m, Exec exec = Exec::Serial);

/// Operator view of an arbitrary (possibly non-symmetric) matrix. Test and
/// diagnostic use only: it is how asymmetric counterexamples are built.
SymmetricOperator make_raw_operator(Matrix m);

/// max over `probes` random unit pairs (u, v) of |<Au, v> - <u, Av>|.
double check_symmetry(const SymmetricOperator& op, int probes, std::uint64_t seed);

/// Full D x D CSV, one row per line, comma separated.
Matrix load_matrix_csv(const std::filesystem::path& path);
void save_matrix_csv(const std::filesystem::path& path, const Matrix& m);

}  // namespace prunability
