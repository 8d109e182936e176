#include <doctest.h>

#include <fstream>

#include "helpers.hpp"
#include "prunability/errors.hpp"
#include "prunability/operators.hpp"

using namespace prunability;
using testing::random_symmetric;
using testing::random_vector;

TEST_SUITE("operators") {

TEST_CASE("dense operator applies the matrix") {
  auto id = make_dense_operator(DenseSymmetric::identity(3));
  Vector v(3);
  v << 1, 2, 3;
  CHECK(id.apply(v) == v);

  auto d = make_dense_operator(DenseSymmetric::diagonal(Vector::LinSpaced(3, 1, 3)));
  Vector expect(3);
  expect << 1, 2, 3;
  CHECK(d.apply(Vector::Ones(3)) == expect);
}

TEST_CASE("apply rejects the wrong dimension") {
  auto op = make_dense_operator(DenseSymmetric::identity(3));
  CHECK_THROWS_AS(op.apply(Vector::Ones(4)), DimensionError);
}

TEST_CASE("random symmetric operator passes 100 inner-product probes") {
  Matrix a = random_symmetric(10, 3);
  auto op = make_dense_operator(DenseSymmetric(a));
  for (int t = 0; t < 100; ++t) {
    Vector u = random_vector(10, 11, 2 * t).normalized();
    Vector v = random_vector(10, 11, 2 * t + 1).normalized();
    Vector au = op.apply(u);
    // Direct oracle: <Au, v> against <u, A v> with A v from Eigen.
    const double lhs = au.dot(v);
    const double rhs = u.dot(a * v);
    CHECK(std::abs(lhs - rhs) <= 1e-8 * (au.norm() * v.norm() + 1e-30));
  }
}

TEST_CASE("linearity and purity") {
  Matrix a = random_symmetric(12, 5);
  for (Exec exec : {Exec::Serial, Exec::Parallel}) {
    auto op = make_dense_operator(DenseSymmetric(a), exec);
    Vector u = random_vector(12, 1), v = random_vector(12, 2);
    Vector lhs = op.apply(2.5 * u - 0.75 * v);
    Vector rhs = 2.5 * op.apply(u) - 0.75 * op.apply(v);
    CHECK((lhs - rhs).norm() <= 1e-10 * rhs.norm());
    CHECK(op.apply(u) == op.apply(u));
  }
}

TEST_CASE("parallel dense apply equals serial bitwise") {
  Matrix a = random_symmetric(257, 9);
  Vector v = random_vector(257, 4);
  auto s = make_dense_operator(DenseSymmetric(a), Exec::Serial);
  auto p = make_dense_operator(DenseSymmetric(a), Exec::Parallel);
  CHECK(s.apply(v) == p.apply(v));
}

TEST_CASE("DenseSymmetric symmetrizes exactly") {
  Matrix m = Matrix::Random(6, 6);
  DenseSymmetric d(m);
  CHECK(d.entries() == d.entries().transpose());
  CHECK(d.symmetrization_residual() > 0.0);
  CHECK(DenseSymmetric(random_symmetric(6, 1)).symmetrization_residual() == 0.0);
}

TEST_CASE("check_symmetry") {
  SUBCASE("dense symmetric input") {
    auto op = make_dense_operator(DenseSymmetric(random_symmetric(20, 8)));
    CHECK(check_symmetry(op, 16, 1) <= 1e-10);
  }
  SUBCASE("perturbed entry is detected") {
    Matrix m = random_symmetric(8, 2);
    m(0, 1) += 1e-3;
    CHECK(check_symmetry(make_raw_operator(m), 100, 4) >= 1e-4);
  }
  SUBCASE("zero operator") {
    CHECK(check_symmetry(make_dense_operator(DenseSymmetric(Matrix::Zero(5, 5))), 10, 3) == 0.0);
  }
  SUBCASE("deterministic in the seed") {
    Matrix m = random_symmetric(8, 2);
    m(2, 3) += 0.1;
    auto op = make_raw_operator(m);
    CHECK(check_symmetry(op, 5, 42) == check_symmetry(op, 5, 42));
  }
}

TEST_CASE("matrix csv round trip") {
  testing::TempDir dir("ops");
  Matrix m = random_symmetric(7, 12);
  save_matrix_csv(dir / "m.csv", m);
  CHECK(load_matrix_csv(dir / "m.csv") == m);
}

TEST_CASE("matrix csv errors") {
  testing::TempDir dir("ops-err");
  {
    std::ofstream(dir / "ragged.csv") << "1,2\n3\n";
    CHECK_THROWS_AS(load_matrix_csv(dir / "ragged.csv"), ParseError);
  }
  {
    std::ofstream(dir / "rect.csv") << "1,2,3\n4,5,6\n";
    CHECK_THROWS_AS(load_matrix_csv(dir / "rect.csv"), ParseError);
  }
  {
    std::ofstream(dir / "bad.csv") << "1,x\n3,4\n";
    try {
      load_matrix_csv(dir / "bad.csv");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 1);
    }
  }
}

}
