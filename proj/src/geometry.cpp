#include "prunability/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "prunability/csv.hpp"
#include "prunability/errors.hpp"

namespace prunability {

EllipsoidSpec::EllipsoidSpec(Spectrum spectrum, double eps_hat)
    : spectrum_(std::move(spectrum)), eps_hat_(eps_hat) {
  if (!(eps_hat_ >= 0.0) || !std::isfinite(eps_hat_)) throw DomainError("eps_hat must be finite and >= 0");
  if (spectrum_.eigenvalues.empty()) throw DomainError("empty spectrum");
  for (double x : spectrum_.eigenvalues)
    if (!(x > 0.0) || !std::isfinite(x)) throw DomainError("ellipsoid eigenvalues must be positive; convexify first");
}

std::vector<double> EllipsoidSpec::radii() const {
  std::vector<double> r;
  r.reserve(dim());
  for (double x : spectrum_.eigenvalues) r.push_back(std::sqrt(2.0 * eps_hat_ / x));
  return r;
}

double gaussian_width(const EllipsoidSpec& e) {
  double s = 0.0;
  for (double x : e.spectrum().eigenvalues) {
    if (x < 1e-20) throw DomainError("sentinel eigenvalue present; use projected_width");
    s += 1.0 / x;
  }
  return std::sqrt(2.0 * e.eps_hat() * s);
}

// r^2 / (R^2 + r^2) written as 1 / (1 + R^2 lambda / (2 eps)), which stays
// finite for sentinel eigenvalues.
static double projected_term_sum(const EllipsoidSpec& e, double R) {
  if (!(R >= 0.0)) throw DomainError("projection distance must be >= 0");
  if (R == 0.0) return static_cast<double>(e.dim());
  const double r2 = R * R;
  const double two_eps = 2.0 * e.eps_hat();
  double s = 0.0;
  for (double x : e.spectrum().eigenvalues) {
    double ratio = r2 * x / two_eps;  // +inf when eps_hat == 0
    s += 1.0 / (1.0 + ratio);
  }
  return s;
}

double projected_width(const EllipsoidSpec& e, double R) { return std::sqrt(projected_term_sum(e, R)); }

double threshold(const EllipsoidSpec& e, double R) {
  return std::clamp(projected_term_sum(e, R) / static_cast<double>(e.dim()), 0.0, 1.0);
}

ThresholdCurve solve_phase_transition(const EllipsoidSpec& e, const RadiusFn& R_of_p, double tol) {
  if (!(tol > 0.0)) throw DomainError("tolerance must be positive");
  ThresholdCurve c;
  for (int i = 0; i < kCurveGridPoints; ++i) {
    double p = (i + 0.5) / kCurveGridPoints;
    double R = R_of_p(p);
    c.p_grid.push_back(p);
    c.R_of_p.push_back(R);
    c.T_of_p.push_back(threshold(e, R));
  }

  auto g = [&](double p) { return threshold(e, R_of_p(p)) - p; };
  if (g(1.0) >= 0.0) {
    c.p_star = 1.0;
    c.degenerate = true;
    return c;
  }
  if (g(tol) < 0.0) {
    // T already below p at the first resolvable ratio.
    c.p_star = 0.0;
    c.degenerate = true;
    return c;
  }
  double lo = tol, hi = 1.0;
  while (hi - lo > tol) {
    double mid = 0.5 * (lo + hi);
    if (g(mid) >= 0.0)
      lo = mid;
    else
      hi = mid;
  }
  c.p_star = 0.5 * (lo + hi);
  return c;
}

std::vector<double> magnitude_scale_experiment(const EllipsoidSpec& e, const RadiusFn& R_of_p,
                                               const std::vector<double>& factors, double tol) {
  std::vector<double> out;
  for (double f : factors) {
    if (!(f >= 1.0)) throw DomainError("magnitude factors must be >= 1");
    RadiusFn scaled = [&R_of_p, f](double p) { return f * R_of_p(p); };
    out.push_back(solve_phase_transition(e, scaled, tol).p_star);
  }
  return out;
}

namespace {

struct Eigenbasis {
  Vector values;
  Matrix vectors;
};

Eigenbasis decompose(const DenseSymmetric& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(m.entries());
  if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  return {solver.eigenvalues(), solver.eigenvectors()};
}

template <class PerChunk>
void run_chunks(std::size_t samples, Exec exec, PerChunk&& body) {
  const auto chunks = static_cast<long>(chunk_count(samples, kMonteCarloChunk));
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(static)
    for (long c = 0; c < chunks; ++c) body(static_cast<std::size_t>(c));
  } else {
    for (long c = 0; c < chunks; ++c) body(static_cast<std::size_t>(c));
  }
}

}  // namespace

MonteCarloEstimate mc_width_oracle(const DenseSymmetric& h, double eps, std::size_t samples, std::uint64_t seed,
                                   Exec exec) {
  if (samples < 1000) throw DomainError("mc_width_oracle needs at least 1000 samples");
  if (!(eps >= 0.0)) throw DomainError("eps must be >= 0");
  auto basis = decompose(h);
  if (!(basis.values.minCoeff() > 0.0)) throw NumericalError("mc_width_oracle needs a positive definite matrix");
  const Vector inv = basis.values.cwiseInverse();
  const Eigen::Index n = inv.size();

  const std::size_t chunks = chunk_count(samples, kMonteCarloChunk);
  std::vector<double> sum(chunks, 0.0), sum2(chunks, 0.0);
  run_chunks(samples, exec, [&](std::size_t c) {
    Rng rng = make_rng(seed, c);
    std::normal_distribution<double> normal;
    const std::size_t begin = c * kMonteCarloChunk;
    const std::size_t end = std::min(samples, begin + kMonteCarloChunk);
    double s = 0.0, s2 = 0.0;
    for (std::size_t t = begin; t < end; ++t) {
      double quad = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        double g = normal(rng);
        quad += g * g * inv[i];
      }
      double val = std::sqrt(2.0 * eps * quad);
      s += val;
      s2 += val * val;
    }
    sum[c] = s;
    sum2[c] = s2;
  });
  const double ns = static_cast<double>(samples);
  double mean = ordered_sum(sum) / ns;
  double var = std::max(0.0, ordered_sum(sum2) / ns - mean * mean);
  return {mean, std::sqrt(var / ns), samples};
}

double jensen_ratio(const DenseSymmetric& q, std::size_t samples, std::uint64_t seed, Exec exec) {
  if (samples < 10000) throw DomainError("jensen_ratio needs at least 10000 samples");
  auto basis = decompose(q);
  const Vector mu = basis.values.cwiseMax(0.0);
  const Eigen::Index n = mu.size();
  const std::size_t chunks = chunk_count(samples, kMonteCarloChunk);
  std::vector<double> root(chunks, 0.0), quad(chunks, 0.0);
  run_chunks(samples, exec, [&](std::size_t c) {
    Rng rng = make_rng(seed, c);
    std::normal_distribution<double> normal;
    const std::size_t begin = c * kMonteCarloChunk;
    const std::size_t end = std::min(samples, begin + kMonteCarloChunk);
    double sr = 0.0, sq = 0.0;
    for (std::size_t t = begin; t < end; ++t) {
      double f = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        double g = normal(rng);
        f += mu[i] * g * g;
      }
      sr += std::sqrt(f);
      sq += f;
    }
    root[c] = sr;
    quad[c] = sq;
  });
  const double ns = static_cast<double>(samples);
  double mean_quad = ordered_sum(quad) / ns;
  if (!(mean_quad > 0.0)) return 0.0;
  return (ordered_sum(root) / ns) / std::sqrt(mean_quad) - 1.0;
}

double escape_bound(int k, double width) {
  double gap = k / std::sqrt(k + 1.0) - width;
  return 1.0 - 3.5 * std::exp(-gap * gap / 18.0);
}

namespace {

// Full orthogonal basis from the QR of an n x k Gaussian matrix. The first k
// columns span the random constraint directions, the remaining n - k their
// complement, so primal and dual solves of one trial see the same subspace.
Matrix random_split_basis(Eigen::Index n, Eigen::Index k, Rng& rng) {
  std::normal_distribution<double> normal;
  Matrix g(n, k);
  for (Eigen::Index j = 0; j < k; ++j)
    for (Eigen::Index i = 0; i < n; ++i) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ();
}

// Minimum of 1/2 x^T diag(lambda) x over x in delta + span(V), as the linear
// least-squares residual of sqrt(lambda) (delta + V z). Rank-revealing QR keeps
// this well defined when flat directions make V^T diag(lambda) V singular.
double primal_min(const Vector& lambda, const Vector& delta, const Matrix& v) {
  const Vector root = lambda.cwiseSqrt();
  const Matrix b = root.asDiagonal() * v;
  const Vector a = root.cwiseProduct(delta);
  const Vector z = b.colPivHouseholderQr().solve(-a);
  const Vector x = a + b * z;
  return 0.5 * x.squaredNorm();
}

// Same minimum via the k-dimensional complement U of the subspace:
// 1/2 c^T (U^T diag(1/lambda) U)^{-1} c with c = U^T delta.
double dual_min(const Vector& lambda, const Vector& delta, const Matrix& u) {
  const Vector inv_root = lambda.cwiseSqrt().cwiseInverse();
  Matrix scaled = inv_root.asDiagonal() * u;
  Matrix reduced = scaled.transpose() * scaled;
  Vector c = u.transpose() * delta;
  Eigen::LLT<Matrix> llt(reduced);
  if (llt.info() != Eigen::Success) return std::nan("");
  return 0.5 * c.dot(llt.solve(c));
}

}  // namespace

EscapeResult escape_mc(const DenseSymmetric& h, double eps, const Vector& w0, const Vector& wp, int k, int trials,
                       std::uint64_t seed, Exec exec, EscapeSolve solve) {
  const Eigen::Index n = h.dim();
  if (w0.size() != n || wp.size() != n) throw DimensionError("escape_mc weight vectors must match H");
  if (k < 1 || k > n) throw DomainError("escape_mc needs 1 <= k <= D");
  if (trials < 100) throw DomainError("escape_mc needs at least 100 trials");

  auto basis = decompose(h);
  // Eigenvalues that are zero up to rounding of the decomposition count as 0.
  const double round_off = 1e-12 * basis.values.cwiseAbs().maxCoeff();
  if (!(basis.values.minCoeff() >= -round_off)) throw NumericalError("escape_mc needs a positive semidefinite matrix");
  const Vector lambda = basis.values.cwiseMax(0.0);
  const Vector delta = basis.vectors.transpose() * (wp - w0);
  const Eigen::Index d = n - k;

  const bool well_conditioned = lambda.minCoeff() > 1e-12 * lambda.maxCoeff();
  bool use_dual = false;
  if (solve == EscapeSolve::Dual) {
    if (!(lambda.minCoeff() > 0.0)) throw NumericalError("dual escape solve needs a positive definite matrix");
    use_dual = true;
  } else if (solve == EscapeSolve::Auto) {
    use_dual = well_conditioned && k < d;
  }

  std::vector<char> hit(static_cast<std::size_t>(trials), 0);
  std::vector<int> redraws(static_cast<std::size_t>(trials), 0);
  auto trial = [&](int t) {
    if (d == 0) {
      hit[static_cast<std::size_t>(t)] = 0.5 * delta.cwiseProduct(delta).dot(lambda) <= eps;
      return;
    }
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(t));
    for (int attempt = 0; attempt < 16; ++attempt) {
      const Matrix q_full = random_split_basis(n, k, rng);
      double q = use_dual ? dual_min(lambda, delta, q_full.leftCols(k)) : primal_min(lambda, delta, q_full.rightCols(d));
      if (std::isfinite(q)) {
        hit[static_cast<std::size_t>(t)] = q <= eps;
        return;
      }
      ++redraws[static_cast<std::size_t>(t)];
    }
    redraws[static_cast<std::size_t>(t)] = -1;
  };
  if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(dynamic, 4)
    for (int t = 0; t < trials; ++t) trial(t);
  } else {
    for (int t = 0; t < trials; ++t) trial(t);
  }

  EscapeResult r;
  r.trials = trials;
  int hits = 0;
  for (int t = 0; t < trials; ++t) {
    if (redraws[static_cast<std::size_t>(t)] < 0) throw NumericalError("reduced escape system stayed singular");
    hits += hit[static_cast<std::size_t>(t)];
    r.redraws += redraws[static_cast<std::size_t>(t)];
  }
  r.probability = static_cast<double>(hits) / trials;
  r.std_error = std::sqrt(std::max(r.probability * (1.0 - r.probability), 1e-12) / trials);
  return r;
}

void save_curve(const std::filesystem::path& csv_path, const std::filesystem::path& json_path,
                const ThresholdCurve& curve, const EllipsoidSpec& e) {
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < curve.p_grid.size(); ++i)
    rows.push_back({curve.p_grid[i], curve.R_of_p[i], curve.T_of_p[i]});
  csv::write(csv_path, {"p", "R", "T"}, rows);

  nlohmann::ordered_json j;
  j["p_star"] = curve.p_star;
  j["D"] = e.dim();
  j["eps_hat"] = e.eps_hat();
  j["important_count"] = e.spectrum().important_count;
  j["degenerate"] = curve.degenerate;
  std::ofstream out(json_path, std::ios::binary);
  out << j.dump(2) << '\n';
  if (!out) throw Error("cannot write " + json_path.string());
}

}  // namespace prunability
