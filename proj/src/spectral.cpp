#include "prunability/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "prunability/csv.hpp"
#include "prunability/errors.hpp"

namespace prunability {

const char* to_string(SpectrumSource s) {
  return s == SpectrumSource::Exact ? "exact" : "slq";
}

Matrix Tridiagonal::dense() const {
  const auto m = static_cast<Eigen::Index>(alphas.size());
  Matrix t = Matrix::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i) t(i, i) = alphas[static_cast<std::size_t>(i)];
  for (Eigen::Index i = 0; i + 1 < m; ++i) {
    t(i, i + 1) = betas[static_cast<std::size_t>(i)];
    t(i + 1, i) = betas[static_cast<std::size_t>(i)];
  }
  return t;
}

Tridiagonal lanczos(const SymmetricOperator& op, int m, std::uint64_t seed) {
  const Eigen::Index n = op.dim();
  if (m < 1 || m > n) throw DomainError("lanczos needs 1 <= m <= D");

  Rng rng = make_rng(seed, 0);
  std::normal_distribution<double> normal;
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  v /= v.norm();

  Matrix basis(n, m);
  basis.col(0) = v;
  Tridiagonal t;

  Vector w = op.apply(v);
  double scale = w.norm();
  double alpha = w.dot(v);
  w -= alpha * v;
  t.alphas.push_back(alpha);

  for (int j = 1; j < m; ++j) {
    // Two passes of classical Gram-Schmidt against every previous vector.
    for (int pass = 0; pass < 2; ++pass) {
      auto prev = basis.leftCols(j);
      w -= prev * (prev.transpose() * w);
    }
    double beta = w.norm();
    if (!std::isfinite(beta) || !std::isfinite(alpha))
      throw NumericalError("non-finite value in Lanczos recurrence");
    scale = std::max({scale, std::abs(alpha), beta});
    if (beta <= 1e-10 * scale) break;

    Vector next = w / beta;
    basis.col(j) = next;
    w = op.apply(next);
    scale = std::max(scale, w.norm());
    alpha = w.dot(next);
    w -= alpha * next + beta * basis.col(j - 1);
    t.alphas.push_back(alpha);
    t.betas.push_back(beta);
  }
  if (!std::isfinite(t.alphas.back())) throw NumericalError("non-finite value in Lanczos recurrence");
  return t;
}

RitzSet ritz(const Tridiagonal& t) {
  const auto m = static_cast<Eigen::Index>(t.alphas.size());
  if (m == 0 || t.betas.size() + 1 != t.alphas.size()) throw DomainError("malformed tridiagonal");
  Vector diag = Eigen::Map<const Vector>(t.alphas.data(), m);
  for (Eigen::Index i = 0; i < m; ++i)
    if (!std::isfinite(diag[i])) throw NumericalError("non-finite tridiagonal entry");

  RitzSet out;
  if (m == 1) {
    out.values = {diag[0]};
    out.weights = {1.0};
    return out;
  }
  Vector sub = Eigen::Map<const Vector>(t.betas.data(), m - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> solver;
  solver.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) throw NumericalError("tridiagonal eigensolver did not converge");
  out.values.assign(solver.eigenvalues().data(), solver.eigenvalues().data() + m);
  out.weights.resize(static_cast<std::size_t>(m));
  for (Eigen::Index k = 0; k < m; ++k) {
    double first = solver.eigenvectors()(0, k);
    out.weights[static_cast<std::size_t>(k)] = first * first;
  }
  return out;
}

double SpectralDensity::mass() const {
  double s = 0.0;
  for (std::size_t j = 1; j < grid.size(); ++j)
    s += 0.5 * (density[j] + density[j - 1]) * (grid[j] - grid[j - 1]);
  return s;
}

SpectralDensity slq_density(const SymmetricOperator& op, const SlqParams& params, std::uint64_t seed,
                            Exec exec) {
  if (params.iters < 2) throw DomainError("slq needs m >= 2");
  if (params.runs < 1) throw DomainError("slq needs l >= 1");
  if (!(params.sigma2 > 0.0)) throw DomainError("slq needs sigma2 > 0");
  if (params.bins < 100) throw DomainError("slq needs bins >= 100");
  const int m = static_cast<int>(std::min<Eigen::Index>(params.iters, op.dim()));

  std::vector<RitzSet> runs(static_cast<std::size_t>(params.runs));
  if (exec == Exec::Parallel) {
    // Exceptions may not escape an OpenMP region; collect and rethrow.
    std::vector<std::exception_ptr> errors(runs.size());
#pragma omp parallel for schedule(dynamic, 1)
    for (int i = 0; i < params.runs; ++i) {
      try {
        runs[static_cast<std::size_t>(i)] = ritz(lanczos(op, m, seed + static_cast<std::uint64_t>(i)));
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (int i = 0; i < params.runs; ++i)
      runs[static_cast<std::size_t>(i)] = ritz(lanczos(op, m, seed + static_cast<std::uint64_t>(i)));
  }

  SpectralDensity d;
  d.sigma2 = params.sigma2;
  d.runs = params.runs;
  d.iters = m;
  d.min_ritz = runs.front().values.front();
  d.max_ritz = runs.front().values.back();
  for (const auto& r : runs) {
    d.min_ritz = std::min(d.min_ritz, r.values.front());
    d.max_ritz = std::max(d.max_ritz, r.values.back());
  }
  const double sigma = std::sqrt(params.sigma2);
  const double lo = d.min_ritz - 3.0 * sigma;
  const double hi = d.max_ritz + 3.0 * sigma;
  const auto bins = static_cast<std::size_t>(params.bins);
  d.grid.resize(bins);
  d.density.assign(bins, 0.0);
  for (std::size_t j = 0; j < bins; ++j)
    d.grid[j] = lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(bins - 1);

  // Flatten nodes in run order so every grid point sums in the same order.
  std::vector<double> nodes, weights;
  for (const auto& r : runs) {
    nodes.insert(nodes.end(), r.values.begin(), r.values.end());
    weights.insert(weights.end(), r.weights.begin(), r.weights.end());
  }
  const double norm = 1.0 / (static_cast<double>(params.runs) * std::sqrt(2.0 * std::numbers::pi * params.sigma2));
  auto eval = [&](std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      double z = d.grid[j] - nodes[k];
      s += weights[k] * std::exp(-0.5 * z * z / params.sigma2);
    }
    d.density[j] = s * norm;
  };
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(static)
    for (std::size_t j = 0; j < bins; ++j) eval(j);
  } else {
    for (std::size_t j = 0; j < bins; ++j) eval(j);
  }
  return d;
}

int count_near_zero(const std::vector<double>& eigenvalues) {
  double top = 0.0;
  for (double x : eigenvalues) top = std::max(top, std::abs(x));
  const double cut = kImportantRelativeThreshold * top;
  return static_cast<int>(std::count_if(eigenvalues.begin(), eigenvalues.end(),
                                        [cut](double x) { return std::abs(x) <= cut; }));
}

Spectrum exact_spectrum(const DenseSymmetric& m) {
  if (m.dim() > kExactSpectrumLimit)
    throw DomainError("exact_spectrum limited to D <= " + std::to_string(kExactSpectrumLimit));
  Eigen::SelfAdjointEigenSolver<Matrix> solver(m.entries(), Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw NumericalError("dense eigensolver failed");
  Spectrum s;
  s.eigenvalues.assign(solver.eigenvalues().data(), solver.eigenvalues().data() + m.dim());
  s.source = SpectrumSource::Exact;
  s.important_count = count_near_zero(s.eigenvalues);
  return s;
}

ImportantCensus important_census(const SymmetricOperator& hessian, const Vector& weights, int parts) {
  const Eigen::Index n = hessian.dim();
  if (weights.size() != n) throw DimensionError("weight vector does not match operator dimension");
  if (parts < 1) throw DomainError("count_important needs parts >= 1");
  parts = static_cast<int>(std::min<Eigen::Index>(parts, n));

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return std::abs(weights[a]) < std::abs(weights[b]);
  });

  ImportantCensus c;
  for (int p = 0; p < parts; ++p) {
    // Group p covers [p*n/parts, (p+1)*n/parts); its first entry is the smallest.
    auto start = static_cast<std::size_t>((static_cast<long long>(p) * n) / parts);
    Eigen::Index idx = order[start];
    Vector e = Vector::Zero(n);
    e[idx] = 1.0;
    c.rows.push_back(idx);
    c.row_l1.push_back(hessian.apply(e).lpNorm<1>());
  }
  c.probed = parts;
  double top = *std::max_element(c.row_l1.begin(), c.row_l1.end());
  const double cut = kImportantRelativeThreshold * top;
  c.flagged = static_cast<int>(std::count_if(c.row_l1.begin(), c.row_l1.end(), [cut](double x) { return x <= cut; }));
  c.estimate = static_cast<int>(std::lround(static_cast<double>(c.flagged) / parts * static_cast<double>(n)));
  return c;
}

int count_important(const SymmetricOperator& hessian, const Vector& weights, int parts) {
  return important_census(hessian, weights, parts).estimate;
}

Spectrum reconstruct_spectrum(const SpectralDensity& density, int dim, int important,
                              double lambda_min_target) {
  if (important < 0 || important > dim) throw DomainError("need 0 <= important <= D");
  const std::size_t bins = density.grid.size();
  if (bins < 2 || density.density.size() != bins) throw DomainError("malformed density");

  std::vector<double> cdf(bins, 0.0);
  for (std::size_t j = 1; j < bins; ++j)
    cdf[j] = cdf[j - 1] + 0.5 * (density.density[j] + density.density[j - 1]) * (density.grid[j] - density.grid[j - 1]);
  const double mass = cdf.back();
  if (!(mass >= 0.5)) throw NumericalError("density mass " + std::to_string(mass) + " < 0.5; broken SLQ run");

  Spectrum s;
  s.source = SpectrumSource::SlqReconstructed;
  s.important_count = important;
  const int bulk = dim - important;
  s.eigenvalues.reserve(static_cast<std::size_t>(dim));
  std::size_t j = 1;
  for (int k = 0; k < bulk; ++k) {
    double target = (k + 0.5) / bulk * mass;
    while (j + 1 < bins && cdf[j] < target) ++j;
    double c0 = cdf[j - 1], c1 = cdf[j];
    double frac = c1 > c0 ? (target - c0) / (c1 - c0) : 0.0;
    frac = std::clamp(frac, 0.0, 1.0);
    s.eigenvalues.push_back(density.grid[j - 1] + frac * (density.grid[j] - density.grid[j - 1]));
  }
  if (bulk > 0 && s.eigenvalues.front() > lambda_min_target) s.eigenvalues.front() = lambda_min_target;
  s.eigenvalues.insert(s.eigenvalues.end(), static_cast<std::size_t>(important), kImportantSentinel);
  std::sort(s.eigenvalues.begin(), s.eigenvalues.end());
  return s;
}

Spectrum convexify(const Spectrum& s) {
  Spectrum out = s;
  for (double& x : out.eigenvalues) x = (x == 0.0) ? kImportantSentinel : std::abs(x);
  std::sort(out.eigenvalues.begin(), out.eigenvalues.end());
  out.important_count = count_near_zero(out.eigenvalues);
  return out;
}

void save_spectrum_csv(const std::filesystem::path& path, const Spectrum& s) {
  std::vector<std::vector<double>> rows;
  rows.reserve(s.eigenvalues.size());
  for (double x : s.eigenvalues) rows.push_back({x});
  csv::write(path, {"eigenvalue"}, rows);
}

std::vector<double> load_spectrum_csv(const std::filesystem::path& path) {
  auto t = csv::read(path, {"eigenvalue"});
  std::vector<double> out;
  out.reserve(t.rows.size());
  for (const auto& r : t.rows) out.push_back(r[0]);
  return out;
}

void save_density_csv(const std::filesystem::path& path, const SpectralDensity& d) {
  std::vector<std::vector<double>> rows;
  rows.reserve(d.grid.size());
  for (std::size_t j = 0; j < d.grid.size(); ++j) rows.push_back({d.grid[j], d.density[j]});
  csv::write(path, {"t", "phi"}, rows);
}

SpectralDensity load_density_csv(const std::filesystem::path& path) {
  auto t = csv::read(path, {"t", "phi"});
  SpectralDensity d;
  for (const auto& r : t.rows) {
    d.grid.push_back(r[0]);
    d.density.push_back(r[1]);
  }
  return d;
}

}  // namespace prunability
