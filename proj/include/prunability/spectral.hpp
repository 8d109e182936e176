#pragma once

// Lanczos tridiagonalization, stochastic Lanczos quadrature (SLQ) density
// estimation, the dense eigendecomposition oracle, and the spectrum
// adjustments that feed the Gaussian-width computation: near-zero
// ("important") eigenvalue detection, density-to-spectrum reconstruction
// and convexification of indefinite spectra.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "prunability/operators.hpp"

namespace prunability {

/// Stand-in for zero and vanishingly small Hessian eigenvalues.
inline constexpr double kImportantSentinel = 1e-30;

/// A row (or eigenvalue) is "important" when its magnitude is at most this
/// fraction of the largest magnitude in the same census.
inline constexpr double kImportantRelativeThreshold = 1e-8;

/// Largest matrix exact_spectrum accepts.
inline constexpr Eigen::Index kExactSpectrumLimit = 4096;

struct Tridiagonal {
  std::vector<double> alphas;  // diagonal, size m
  std::vector<double> betas;   // off-diagonal, size m - 1, all > 0

  std::size_t size() const { return alphas.size(); }
  Matrix dense() const;
};

struct RitzSet {
  std::vector<double> values;   // ascending
  std::vector<double> weights;  // squared first eigenvector components, sum to 1
};

struct SpectralDensity {
  std::vector<double> grid;     // uniform evaluation points
  std::vector<double> density;  // phi(t) on the grid
  double sigma2 = 0.0;
  int runs = 0;
  int iters = 0;
  double min_ritz = 0.0;  // smallest Ritz value over all runs
  double max_ritz = 0.0;

  /// Trapezoid integral of the density over the grid.
  double mass() const;
};

enum class SpectrumSource { Exact, SlqReconstructed };

struct Spectrum {
  std::vector<double> eigenvalues;  // ascending, length D
  SpectrumSource source = SpectrumSource::Exact;
  int important_count = 0;

  std::size_t dim() const { return eigenvalues.size(); }
};

const char* to_string(SpectrumSource s);

/// SLQ hyperparameters. Defaults follow the small fully connected setting:
/// one run, 128 iterations, 10000 bins, kernel variance 1e-5.
struct SlqParams {
  int iters = 128;
  int runs = 1;
  double sigma2 = 1e-5;
  int bins = 10000;
};

/// Lanczos with full reorthogonalization. The start vector is a normalized
/// standard Gaussian drawn from `seed`. Stops early (returning j - 1 steps)
/// when the next off-diagonal beta_j vanishes relative to the running scale.
Tridiagonal lanczos(const SymmetricOperator& op, int m, std::uint64_t seed);

RitzSet ritz(const Tridiagonal& t);

/// phi(t) = (1/l) sum_i sum_k tau_k^(i) N(t; lambda_k^(i), sigma2) on a uniform
/// grid over [min Ritz - 3 sigma, max Ritz + 3 sigma]. Run i uses seed + i.
SpectralDensity slq_density(const SymmetricOperator& op, const SlqParams& params, std::uint64_t seed,
                            Exec exec = Exec::Serial);

/// Eigenvalues of a dense symmetric matrix; important_count counts
/// |lambda| <= kImportantRelativeThreshold * max|lambda|.
Spectrum exact_spectrum(const DenseSymmetric& m);

struct ImportantCensus {
  int estimate = 0;                 // scaled to the full dimension
  int probed = 0;
  int flagged = 0;                  // probed rows under the threshold
  std::vector<Eigen::Index> rows;   // probed parameter indices, in part order
  std::vector<double> row_l1;       // matching Hessian row L1 norms
};

/// Sorts parameters by |w| (ties by index), splits them into `parts`
/// contiguous groups and probes the Hessian row of the smallest entry of each
/// group via apply(e_i). The flagged fraction is scaled to D.
ImportantCensus important_census(const SymmetricOperator& hessian, const Vector& weights, int parts = 100);

int count_important(const SymmetricOperator& hessian, const Vector& weights, int parts = 100);

/// Inverse-CDF quantile reconstruction: D - important values at quantiles
/// (k + 0.5) / (D - important), the smallest clipped down to
/// `lambda_min_target` when it lies above it, plus `important` sentinels.
Spectrum reconstruct_spectrum(const SpectralDensity& density, int dim, int important,
                              double lambda_min_target);

/// lambda -> |lambda|; exact zeros become the sentinel. important_count is
/// recomputed with the relative threshold, so the map is idempotent.
Spectrum convexify(const Spectrum& s);

int count_near_zero(const std::vector<double>& eigenvalues);

void save_spectrum_csv(const std::filesystem::path& path, const Spectrum& s);
/// Reads values only; source/important_count are supplied by the caller.
std::vector<double> load_spectrum_csv(const std::filesystem::path& path);

void save_density_csv(const std::filesystem::path& path, const SpectralDensity& d);
SpectralDensity load_density_csv(const std::filesystem::path& path);

}  // namespace prunability
