#include "prunability/operators.hpp"

#include <cmath>
#include <string>

#include "prunability/csv.hpp"
#include "prunability/errors.hpp"

namespace prunability {

SymmetricOperator::SymmetricOperator(Eigen::Index dim, ApplyFn apply)
    : dim_(dim), apply_(std::move(apply)) {
  if (dim_ < 1) throw DomainError("operator dimension must be positive");
}

Vector SymmetricOperator::apply(const Vector& v) const {
  if (v.size() != dim_)
    throw DimensionError("operator of dim " + std::to_string(dim_) + " applied to vector of size " +
                         std::to_string(v.size()));
  Vector out = apply_(v);
  if (out.size() != dim_) throw DimensionError("operator returned wrong-sized vector");
  return out;
}

DenseSymmetric::DenseSymmetric(const Matrix& m) {
  if (m.rows() != m.cols()) throw DimensionError("dense symmetric matrix must be square");
  if (m.rows() < 1) throw DomainError("dense symmetric matrix must be non-empty");
  m_ = 0.5 * (m + m.transpose());
  residual_ = 0.5 * (m - m.transpose()).norm();
}

DenseSymmetric DenseSymmetric::identity(Eigen::Index dim) {
  return DenseSymmetric(Matrix::Identity(dim, dim));
}

DenseSymmetric DenseSymmetric::diagonal(const Vector& d) {
  return DenseSymmetric(Matrix(d.asDiagonal()));
}

SymmetricOperator make_dense_operator(DenseSymmetric m, Exec exec) {
  const Eigen::Index n = m.dim();
  // Both modes use the same per-row dot products, so results match bitwise.
  // Column-major storage: row i of a symmetric matrix is column i.
  return SymmetricOperator(n, [m = std::move(m), exec](const Vector& v) -> Vector {
    const Matrix& a = m.entries();
    const Eigen::Index dim = a.rows();
    Vector out(dim);
#pragma omp parallel for schedule(static) if (exec == Exec::Parallel)
    for (Eigen::Index i = 0; i < dim; ++i) out[i] = a.col(i).dot(v);
    return out;
  });
}

SymmetricOperator make_raw_operator(Matrix m) {
  if (m.rows() != m.cols()) throw DimensionError("operator matrix must be square");
  const Eigen::Index n = m.rows();
  return SymmetricOperator(n, [m = std::move(m)](const Vector& v) -> Vector { return m * v; });
}

static Vector random_unit(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> normal;
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v / v.norm();
}

double check_symmetry(const SymmetricOperator& op, int probes, std::uint64_t seed) {
  if (probes < 1) throw DomainError("check_symmetry needs at least one probe");
  Rng rng = make_rng(seed, 0);
  double worst = 0.0;
  for (int k = 0; k < probes; ++k) {
    Vector u = random_unit(op.dim(), rng);
    Vector v = random_unit(op.dim(), rng);
    double asym = std::abs(op.apply(u).dot(v) - u.dot(op.apply(v)));
    if (!(asym <= worst)) worst = asym;  // propagates NaN
  }
  return worst;
}

Matrix load_matrix_csv(const std::filesystem::path& path) {
  auto table = csv::read(path, {});
  const auto n = static_cast<Eigen::Index>(table.rows.size());
  if (n == 0) throw ParseError("empty matrix file " + path.string());
  Matrix m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = table.rows[static_cast<std::size_t>(i)];
    if (static_cast<Eigen::Index>(row.size()) != n)
      throw ParseError("matrix is not square", static_cast<long>(i + 1));
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = row[static_cast<std::size_t>(j)];
  }
  return m;
}

void save_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto& row = rows[static_cast<std::size_t>(i)];
    row.resize(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
  }
  csv::write(path, {}, rows);
}

}  // namespace prunability
