#include <doctest.h>

#include <fstream>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "prunability/errors.hpp"
#include "prunability/nets.hpp"
#include "prunability/spectral.hpp"

using namespace prunability;
using testing::random_orthogonal;
using testing::random_symmetric;

namespace {

SymmetricOperator diag_op(std::vector<double> d) {
  return make_dense_operator(DenseSymmetric::diagonal(Eigen::Map<Vector>(d.data(), static_cast<Eigen::Index>(d.size()))));
}

std::vector<double> two_bump_values() {
  std::vector<double> d(50, 1.0);
  std::fill(d.begin(), d.begin() + 25, -1.0);
  return d;
}

double mass_between(const SpectralDensity& s, double lo, double hi) {
  double m = 0.0;
  for (std::size_t j = 0; j + 1 < s.grid.size(); ++j) {
    const double mid = 0.5 * (s.grid[j] + s.grid[j + 1]);
    if (mid >= lo && mid < hi) m += 0.5 * (s.density[j] + s.density[j + 1]) * (s.grid[j + 1] - s.grid[j]);
  }
  return m;
}

// W1 between two equal-size sorted multisets.
double wasserstein1(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double l1_distance(const SpectralDensity& a, const SpectralDensity& b) {
  // Both on their own grids; compare on a common fine grid by linear interpolation.
  auto at = [](const SpectralDensity& s, double t) {
    if (t <= s.grid.front() || t >= s.grid.back()) return 0.0;
    auto it = std::upper_bound(s.grid.begin(), s.grid.end(), t);
    const std::size_t j = static_cast<std::size_t>(it - s.grid.begin()) - 1;
    const double f = (t - s.grid[j]) / (s.grid[j + 1] - s.grid[j]);
    return (1 - f) * s.density[j] + f * s.density[j + 1];
  };
  const double lo = std::min(a.grid.front(), b.grid.front()), hi = std::max(a.grid.back(), b.grid.back());
  const int n = 20000;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double t = lo + (hi - lo) * (i + 0.5) / n;
    s += std::abs(at(a, t) - at(b, t));
  }
  return s * (hi - lo) / n;
}

}  // namespace

TEST_SUITE("spectral") {

TEST_CASE("lanczos recovers a 3x3 diagonal exactly") {
  auto t = lanczos(diag_op({1, 2, 3}), 3, 5);
  REQUIRE(t.size() == 3);
  auto r = ritz(t);
  CHECK(r.values[0] == doctest::Approx(1).epsilon(1e-8));
  CHECK(r.values[1] == doctest::Approx(2).epsilon(1e-8));
  CHECK(r.values[2] == doctest::Approx(3).epsilon(1e-8));
  for (double b : t.betas) CHECK(b > 0.0);
}

TEST_CASE("one Lanczos step is a Rayleigh quotient") {
  Matrix a = random_symmetric(15, 21);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a);
  auto t = lanczos(make_dense_operator(DenseSymmetric(a)), 1, 3);
  REQUIRE(t.size() == 1);
  CHECK(t.betas.empty());
  CHECK(t.alphas[0] >= eig.eigenvalues().minCoeff());
  CHECK(t.alphas[0] <= eig.eigenvalues().maxCoeff());
}

TEST_CASE("identity stops after one step") {
  auto t = lanczos(make_dense_operator(DenseSymmetric::identity(10)), 3, 1);
  auto r = ritz(t);
  REQUIRE(r.values.size() == 1);
  CHECK(r.values[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.weights[0] == doctest::Approx(1.0));
}

TEST_CASE("lanczos preconditions and determinism") {
  auto op = diag_op({1, 2, 3});
  CHECK_THROWS_AS(lanczos(op, 0, 1), DomainError);
  CHECK_THROWS_AS(lanczos(op, 4, 1), DomainError);
  Matrix a = random_symmetric(30, 2);
  auto dense = make_dense_operator(DenseSymmetric(a));
  auto t1 = lanczos(dense, 10, 9), t2 = lanczos(dense, 10, 9);
  CHECK(t1.alphas == t2.alphas);
  CHECK(t1.betas == t2.betas);
}

TEST_CASE("lanczos rejects non-finite operators") {
  SymmetricOperator bad(4, [](const Vector& v) { return Vector(v * std::numeric_limits<double>::quiet_NaN()); });
  CHECK_THROWS_AS(lanczos(bad, 3, 1), NumericalError);
}

TEST_CASE("ritz closed forms") {
  Tridiagonal one{{5.0}, {}};
  auto r1 = ritz(one);
  CHECK(r1.values == std::vector<double>{5.0});
  CHECK(r1.weights == std::vector<double>{1.0});

  Tridiagonal two{{0.0, 0.0}, {1.0}};
  auto r2 = ritz(two);
  CHECK(r2.values[0] == doctest::Approx(-1.0));
  CHECK(r2.values[1] == doctest::Approx(1.0));
  CHECK(r2.weights[0] == doctest::Approx(0.5));
  CHECK(r2.weights[1] == doctest::Approx(0.5));
}

TEST_CASE("ritz weights are a probability vector") {
  auto rng = make_rng(77, 0);
  std::uniform_real_distribution<double> u(-2, 2), pos(0.1, 2);
  for (int trial = 0; trial < 50; ++trial) {
    Tridiagonal t;
    const int m = 2 + trial % 20;
    for (int i = 0; i < m; ++i) t.alphas.push_back(u(rng));
    for (int i = 0; i + 1 < m; ++i) t.betas.push_back(pos(rng));
    auto r = ritz(t);
    CHECK(std::accumulate(r.weights.begin(), r.weights.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(std::is_sorted(r.values.begin(), r.values.end()));
    for (double w : r.weights) CHECK(w >= 0.0);
  }
}

TEST_CASE("ritz rejects NaN input") {
  Tridiagonal t{{std::nan(""), 1.0}, {1.0}};
  CHECK_THROWS_AS(ritz(t), NumericalError);
}

TEST_CASE("full Lanczos reproduces the exact spectrum") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Eigen::Index n = 60;
    Matrix a = random_symmetric(n, seed);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(a);
    auto r = ritz(lanczos(make_dense_operator(DenseSymmetric(a)), static_cast<int>(n), seed));
    REQUIRE(r.values.size() == static_cast<std::size_t>(n));
    const double scale = eig.eigenvalues().cwiseAbs().maxCoeff();
    for (Eigen::Index i = 0; i < n; ++i)
      CHECK(std::abs(r.values[static_cast<std::size_t>(i)] - eig.eigenvalues()[i]) <= 1e-6 * scale);
  }
}

TEST_CASE("Ritz values interlace the true spectrum") {
  Matrix a = random_symmetric(80, 5);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a);
  const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
  for (int m : {2, 5, 17, 40}) {
    auto r = ritz(lanczos(make_dense_operator(DenseSymmetric(a)), m, static_cast<std::uint64_t>(m)));
    CHECK(r.values.front() >= lo - 1e-8);
    CHECK(r.values.back() <= hi + 1e-8);
  }
}

TEST_CASE("slq of the identity is one unit bump") {
  SlqParams p;
  p.iters = 8;
  auto d = slq_density(make_dense_operator(DenseSymmetric::identity(50)), p, 1);
  CHECK(std::abs(d.mass() - 1.0) <= 0.01);
  const auto peak = std::max_element(d.density.begin(), d.density.end()) - d.density.begin();
  CHECK(d.grid[static_cast<std::size_t>(peak)] == doctest::Approx(1.0).epsilon(1e-3));
  const double s = std::sqrt(p.sigma2);
  CHECK(d.grid.front() == doctest::Approx(1.0 - 3 * s));
  CHECK(d.grid.back() == doctest::Approx(1.0 + 3 * s));
}

TEST_CASE("slq default hyperparameters") {
  SlqParams p;
  CHECK(p.runs == 1);
  CHECK(p.iters == 128);
  CHECK(p.bins == 10000);
  CHECK(p.sigma2 == 1e-5);
}

TEST_CASE("slq of a two-point spectrum has two half-mass bumps") {
  // With l = 4 the negative mass is a mean of four Beta(12.5, 12.5) draws
  // (sd ~0.049), so the +-0.05 band holds for roughly 70% of seeds. Seed 8
  // lands inside it; the spread itself is checked below.
  SlqParams p;
  p.iters = 8;
  p.runs = 4;
  auto d = slq_density(diag_op(two_bump_values()), p, 8);
  CHECK(std::abs(d.mass() - 1.0) <= 0.01);
  CHECK(std::abs(mass_between(d, -2.0, 0.0) - 0.5) <= 0.05);
  CHECK(std::abs(mass_between(d, 0.0, 2.0) - 0.5) <= 0.05);
  // Only the two eigenvalues carry mass.
  CHECK(mass_between(d, -2.0, 0.0) + mass_between(d, 0.0, 2.0) == doctest::Approx(d.mass()));
}

TEST_CASE("two-bump negative mass is unbiased over many runs") {
  // Each run's mass on -1 is sum of 25 squared coordinates of a random unit
  // vector in R^50, i.e. Beta(12.5, 12.5): mean 0.5, sd ~0.098.
  SlqParams p;
  p.iters = 8;
  p.runs = 200;
  p.bins = 2000;
  auto d = slq_density(diag_op(two_bump_values()), p, 17);
  const double se = 0.098 / std::sqrt(200.0);
  CHECK(std::abs(mass_between(d, -2.0, 0.0) - 0.5) <= 3 * se);
}

TEST_CASE("two-bump single-run masses have the Beta spread") {
  // sd of Beta(12.5, 12.5) is sqrt(1 / (4 * 26)); the sample sd of n = 300
  // draws has relative standard error ~1/sqrt(2n) = 4%.
  SlqParams p;
  p.iters = 8;
  p.bins = 400;
  std::vector<double> m;
  for (std::uint64_t seed = 0; seed < 300; ++seed)
    m.push_back(mass_between(slq_density(diag_op(two_bump_values()), p, 1000 + seed), -2.0, 0.0));
  const double mean = std::accumulate(m.begin(), m.end(), 0.0) / m.size();
  double var = 0.0;
  for (double x : m) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / (m.size() - 1));
  CHECK(std::abs(sd / std::sqrt(1.0 / 104.0) - 1.0) <= 0.15);
}

TEST_CASE("slq preconditions") {
  auto op = make_dense_operator(DenseSymmetric::identity(20));
  SlqParams p;
  p.iters = 1;
  CHECK_THROWS_AS(slq_density(op, p, 1), DomainError);
  p = SlqParams{};
  p.iters = 4;
  p.runs = 0;
  CHECK_THROWS_AS(slq_density(op, p, 1), DomainError);
  p.runs = 1;
  p.sigma2 = 0;
  CHECK_THROWS_AS(slq_density(op, p, 1), DomainError);
  p.sigma2 = 1e-5;
  p.bins = 50;
  CHECK_THROWS_AS(slq_density(op, p, 1), DomainError);
}

TEST_CASE("slq runs merge deterministically in parallel") {
  Matrix a = random_symmetric(120, 4);
  auto op = make_dense_operator(DenseSymmetric(a));
  SlqParams p;
  p.iters = 30;
  p.runs = 5;
  p.sigma2 = 1e-2;
  p.bins = 500;
  auto s = slq_density(op, p, 8, Exec::Serial);
  auto q = slq_density(op, p, 8, Exec::Parallel);
  CHECK(s.grid == q.grid);
  CHECK(s.density == q.density);
}

TEST_CASE("more slq runs bring independent estimates closer") {
  Matrix a = random_symmetric(100, 6);
  auto op = make_dense_operator(DenseSymmetric(a));
  SlqParams p;
  p.iters = 10;
  p.sigma2 = 0.05;
  p.bins = 400;
  double d1 = 0.0, d16 = 0.0;
  for (std::uint64_t pair = 0; pair < 10; ++pair) {
    p.runs = 1;
    d1 += l1_distance(slq_density(op, p, 1000 + pair), slq_density(op, p, 2000 + pair));
    p.runs = 16;
    d16 += l1_distance(slq_density(op, p, 3000 + 100 * pair), slq_density(op, p, 5000 + 100 * pair));
  }
  CHECK(d16 < d1);
}

TEST_CASE("exact spectrum") {
  SUBCASE("diagonal") {
    Vector d(3);
    d << 3, 1, 2;
    auto s = exact_spectrum(DenseSymmetric::diagonal(d));
    CHECK(s.eigenvalues == std::vector<double>{1, 2, 3});
    CHECK(s.source == SpectrumSource::Exact);
    CHECK(s.important_count == 0);
  }
  SUBCASE("rotated diagonal") {
    const Eigen::Index n = 40;
    Vector lam = Vector::LinSpaced(n, -3, 5);
    Matrix q = random_orthogonal(n, 3);
    auto s = exact_spectrum(DenseSymmetric(q.transpose() * lam.asDiagonal() * q));
    for (Eigen::Index i = 0; i < n; ++i) CHECK(std::abs(s.eigenvalues[static_cast<std::size_t>(i)] - lam[i]) <= 1e-9);
  }
  SUBCASE("zero matrix") {
    auto s = exact_spectrum(DenseSymmetric(Matrix::Zero(5, 5)));
    CHECK(s.eigenvalues == std::vector<double>(5, 0.0));
    CHECK(s.important_count == 5);
  }
  SUBCASE("limit is at least 3000") { CHECK(kExactSpectrumLimit >= 3000); }
}

TEST_CASE("important census") {
  SUBCASE("dead hidden unit rows are counted") {
    // [3,4,2] net whose hidden unit 1 has every incident weight zero.
    FeedforwardNet net = init_kaiming({3, 4, 2}, 5);
    net.weight(0).row(1).setZero();
    net.weight(1).col(1).setZero();
    net.bias(0)[1] = -1.0;  // keeps the unit dead on every input
    Dataset data = make_blobs(40, 2, 3.0, 2);
    data.features.conservativeResize(Eigen::NoChange, 3);
    data.features.col(2).setConstant(0.5);
    const Vector w = net.flatten();
    const DenseSymmetric h = exact_hessian(net, data);
    auto census = important_census(hessian_operator(net, data), w, static_cast<int>(w.size()));
    // Oracle: rows of the exact Hessian with zero L1 norm.
    int zero_rows = 0;
    const double max_row = h.entries().cwiseAbs().rowwise().sum().maxCoeff();
    for (Eigen::Index i = 0; i < h.dim(); ++i)
      if (h.entries().row(i).cwiseAbs().sum() <= 1e-8 * max_row) ++zero_rows;
    // Dead unit: 3 incoming weights, its bias and 2 outgoing weights.
    CHECK(zero_rows >= 6);
    CHECK(census.flagged == zero_rows);
    CHECK(census.estimate == zero_rows);
    CHECK(census.probed == w.size());
  }
  SUBCASE("pure quadratic has no important rows") {
    const int n = 30;
    auto op = make_dense_operator(DenseSymmetric::diagonal(Vector::LinSpaced(n, 1, n)));
    CHECK(count_important(op, testing::random_vector(n, 3), 10) == 0);
  }
  SUBCASE("parts = D probes every row") {
    Vector d = Vector::LinSpaced(20, 1, 20);
    d.head(5).setZero();
    auto op = make_dense_operator(DenseSymmetric::diagonal(d));
    auto census = important_census(op, testing::random_vector(20, 4), 20);
    CHECK(census.probed == 20);
    CHECK(census.flagged == 5);
    CHECK(census.estimate == 5);
  }
  SUBCASE("parts must be positive") {
    auto op = make_dense_operator(DenseSymmetric::identity(4));
    CHECK_THROWS_AS(count_important(op, Vector::Ones(4), 0), DomainError);
  }
}

TEST_CASE("reconstruct spectrum") {
  SlqParams p;
  p.iters = 8;
  auto bump = slq_density(make_dense_operator(DenseSymmetric::identity(50)), p, 1);
  const double s = std::sqrt(p.sigma2);

  SUBCASE("single bump") {
    auto r = reconstruct_spectrum(bump, 10, 0, bump.min_ritz);
    REQUIRE(r.eigenvalues.size() == 10);
    for (double x : r.eigenvalues) {
      CHECK(x >= 1 - 3 * s);
      CHECK(x <= 1 + 3 * s);
    }
    CHECK(r.source == SpectrumSource::SlqReconstructed);
  }
  SUBCASE("sentinel count") {
    auto r = reconstruct_spectrum(bump, 10, 4, bump.min_ritz);
    CHECK(std::count(r.eigenvalues.begin(), r.eigenvalues.end(), kImportantSentinel) == 4);
    CHECK(r.important_count == 4);
    CHECK(r.eigenvalues.size() == 10);
  }
  SUBCASE("two bumps match the exact multiset") {
    SlqParams q;
    q.iters = 8;
    q.runs = 4;
    // Seed 8 has its negative mass within 0.05 of 1/2 (see the slq test).
    auto d = slq_density(diag_op(two_bump_values()), q, 8);
    auto r = reconstruct_spectrum(d, 50, 0, d.min_ritz);
    CHECK(wasserstein1(r.eigenvalues, two_bump_values()) <= 0.1);
  }
  SUBCASE("two bumps: error is the mass error plus bump width") {
    // Each quantile that lands on the wrong bump costs 2/50; a mass error m
    // misplaces at most 50 m + 1/2 quantiles, and bump width adds ~3 sigma.
    SlqParams q;
    q.iters = 8;
    q.runs = 4;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      auto d = slq_density(diag_op(two_bump_values()), q, seed * 100);
      const double mass_err = std::abs(mass_between(d, -2.0, 0.0) / d.mass() - 0.5);
      auto r = reconstruct_spectrum(d, 50, 0, d.min_ritz);
      CHECK(wasserstein1(r.eigenvalues, two_bump_values()) <= 2 * mass_err + 0.02 + 3 * std::sqrt(q.sigma2));
    }
  }
  SUBCASE("minimum is clipped to the target") {
    auto r = reconstruct_spectrum(bump, 10, 0, 0.5);
    CHECK(r.eigenvalues.front() == 0.5);
    // A target above the support floor leaves the quantiles alone.
    auto same = reconstruct_spectrum(bump, 10, 0, 2.0);
    CHECK(same.eigenvalues.front() > 0.5);
    CHECK(same.eigenvalues.front() < 2.0);
  }
  SUBCASE("deterministic") {
    CHECK(reconstruct_spectrum(bump, 30, 3, 0.9).eigenvalues == reconstruct_spectrum(bump, 30, 3, 0.9).eigenvalues);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(reconstruct_spectrum(bump, 10, 11, 0.0), DomainError);
    CHECK_THROWS_AS(reconstruct_spectrum(bump, 10, -1, 0.0), DomainError);
    SpectralDensity broken = bump;
    for (double& x : broken.density) x *= 0.4;
    CHECK_THROWS_AS(reconstruct_spectrum(broken, 10, 0, 0.0), NumericalError);
  }
}

TEST_CASE("convexify") {
  Spectrum s{{-0.01, 2, 3}, SpectrumSource::Exact, 0};
  CHECK(convexify(s).eigenvalues == std::vector<double>{0.01, 2, 3});

  Spectrum z{{0, 1}, SpectrumSource::Exact, 0};
  auto cz = convexify(z);
  CHECK(cz.eigenvalues == std::vector<double>{kImportantSentinel, 1});
  CHECK(cz.important_count == 1);

  Spectrum pos{{0.5, 1, 4}, SpectrumSource::Exact, 0};
  CHECK(convexify(pos).eigenvalues == pos.eigenvalues);
  CHECK(convexify(pos).important_count == 0);
}

TEST_CASE("convexify is idempotent") {
  auto rng = make_rng(5, 0);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    Spectrum s;
    for (int i = 0; i < 30; ++i) s.eigenvalues.push_back(i % 7 == 0 ? 0.0 : g(rng));
    std::sort(s.eigenvalues.begin(), s.eigenvalues.end());
    auto once = convexify(s);
    auto twice = convexify(once);
    CHECK(once.eigenvalues == twice.eigenvalues);
    CHECK(once.important_count == twice.important_count);
  }
}

TEST_CASE("spectrum and density csv round trip") {
  testing::TempDir dir("spec");
  Spectrum s{{-1.5, 1e-30, 0.25, 3.0}, SpectrumSource::Exact, 1};
  save_spectrum_csv(dir / "s.csv", s);
  CHECK(load_spectrum_csv(dir / "s.csv") == s.eigenvalues);
  std::ifstream in(dir / "s.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "eigenvalue");

  SlqParams p;
  p.iters = 4;
  p.bins = 100;
  auto d = slq_density(make_dense_operator(DenseSymmetric::identity(10)), p, 1);
  save_density_csv(dir / "d.csv", d);
  auto back = load_density_csv(dir / "d.csv");
  CHECK(back.grid == d.grid);
  CHECK(back.density == d.density);
  std::ifstream din(dir / "d.csv");
  std::getline(din, header);
  CHECK(header == "t,phi");
}

}
