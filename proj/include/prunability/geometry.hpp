#pragma once

// Gaussian widths of loss-sublevel ellipsoids, the pruning-ratio threshold
// curve and its phase-transition point, plus the Monte Carlo oracles that
// check them: a direct width estimator, a random-subspace escape simulator
// and the Jensen-ratio concentration probe.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "prunability/operators.hpp"
#include "prunability/spectral.hpp"

namespace prunability {

/// Sublevel set {w : 1/2 (w - w0)^T H (w - w0) <= eps_hat} described by the
/// eigenvalues of H. Eigenvalues must be strictly positive (convexify first).
class EllipsoidSpec {
 public:
  EllipsoidSpec(Spectrum spectrum, double eps_hat);

  const Spectrum& spectrum() const { return spectrum_; }
  double eps_hat() const { return eps_hat_; }
  std::size_t dim() const { return spectrum_.dim(); }

  /// r_i = sqrt(2 eps_hat / lambda_i).
  std::vector<double> radii() const;

 private:
  Spectrum spectrum_;
  double eps_hat_;
};

/// Unprojected width sqrt(2 eps_hat sum 1/lambda_i). Throws DomainError when
/// any eigenvalue is below 1e-20: the width of a sentinel-bearing spectrum is
/// unbounded and only the projected width is meaningful for it.
double gaussian_width(const EllipsoidSpec& e);

/// sqrt(sum r_i^2 / (R^2 + r_i^2)). Sentinel eigenvalues contribute ~1.
double projected_width(const EllipsoidSpec& e, double R);

/// projected_width^2 / D, in [0, 1].
double threshold(const EllipsoidSpec& e, double R);

using RadiusFn = std::function<double(double)>;

struct ThresholdCurve {
  std::vector<double> p_grid;
  std::vector<double> R_of_p;
  std::vector<double> T_of_p;
  double p_star = 0.0;
  // Set when T(p) - p has no sign change on (0, 1); p_star is then 0 or 1.
  bool degenerate = false;
};

inline constexpr int kCurveGridPoints = 200;

/// Bisection on g(p) = threshold(e, R(p)) - p, which is strictly decreasing
/// for non-decreasing R, so the root is unique. Also tabulates the curve on a
/// 200-point uniform grid of (0, 1).
ThresholdCurve solve_phase_transition(const EllipsoidSpec& e, const RadiusFn& R_of_p, double tol = 1e-4);

/// p* for each weight-magnitude factor c, with every pruning distance scaled
/// by c.
std::vector<double> magnitude_scale_experiment(const EllipsoidSpec& e, const RadiusFn& R_of_p,
                                               const std::vector<double>& factors, double tol = 1e-4);

struct MonteCarloEstimate {
  double value = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

/// E sup_{x in S} <g, x> for S = {x : 1/2 x^T H x <= eps}, estimated as the
/// mean of sqrt(2 eps g^T H^{-1} g). Evaluated in the eigenbasis of H, where
/// the Gaussian is unchanged by rotation. Throws NumericalError for non-PD H.
MonteCarloEstimate mc_width_oracle(const DenseSymmetric& h, double eps, std::size_t samples, std::uint64_t seed,
                                   Exec exec = Exec::Serial);

/// E sqrt(g^T Q g) / sqrt(E g^T Q g) - 1, both expectations over the same
/// samples.
double jensen_ratio(const DenseSymmetric& q, std::size_t samples, std::uint64_t seed, Exec exec = Exec::Serial);

struct EscapeResult {
  double probability = 0.0;  // fraction of trials whose subspace meets the set
  double std_error = 0.0;
  int trials = 0;
  int redraws = 0;
};

enum class EscapeSolve {
  Auto,    // dual when k < D - k and H is well conditioned, else primal
  Primal,  // least squares min ‖H^{1/2} (wp - w0 + V z)‖ over the (D-k)-dim basis V
  Dual,    // 1/2 c^T (U^T H^{-1} U)^{-1} c over the k-dim complement U
};

/// Draws `trials` random (D-k)-dimensional affine subspaces through wp and
/// reports how often min over the subspace of 1/2 (w - w0)^T H (w - w0) is
/// at most eps. Trial t draws from stream t of `seed`.
EscapeResult escape_mc(const DenseSymmetric& h, double eps, const Vector& w0, const Vector& wp, int k, int trials,
                       std::uint64_t seed, Exec exec = Exec::Serial, EscapeSolve solve = EscapeSolve::Auto);

/// 1 - 3.5 exp(-(k / sqrt(k + 1) - w)^2 / 18): lower bound on the miss
/// probability of a codimension-k subspace, valid for k > w^2.
double escape_bound(int k, double width);

void save_curve(const std::filesystem::path& csv_path, const std::filesystem::path& json_path,
                const ThresholdCurve& curve, const EllipsoidSpec& e);

}  // namespace prunability
