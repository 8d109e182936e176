#pragma once

// Global one-shot magnitude pruning. Weights are ranked by |w| across all
// layers (ties by flat index); biases are never pruned.

#include <filesystem>
#include <vector>

#include "prunability/nets.hpp"

namespace prunability {

struct PruneState {
  Vector w0;                  // trained dense parameters
  std::vector<bool> prunable;
  std::vector<bool> mask;     // true = pruned
  double p = 0.0;
  double R = 0.0;             // ||w0 - w_p||_2, the norm of the pruned entries

  std::size_t masked_count() const;
  Vector pruned_weights() const;  // w_p
};

/// Number of weights removed at ratio p: round(p * n), halves away from zero.
std::size_t prune_count(double p, std::size_t n_prunable);

/// Prunable indices in pruning order: ascending |w|, ties by lower index.
std::vector<Eigen::Index> pruning_order(const Vector& w0, const std::vector<bool>& prunable);

PruneState magnitude_mask(const Vector& w0, const std::vector<bool>& prunable, double p);

/// R(p) as a right-continuous step function, evaluated in O(1) from the
/// prefix sums of sorted squared magnitudes.
class RadiusCurve {
 public:
  RadiusCurve(const Vector& w0, const std::vector<bool>& prunable);

  double operator()(double p) const;
  /// R^2 after removing the `count` smallest weights.
  double squared_at_count(std::size_t count) const { return prefix_[count]; }
  std::size_t prunable_count() const { return prefix_.size() - 1; }

 private:
  std::vector<double> prefix_;  // prefix_[k] = sum of the k smallest w^2
};

RadiusCurve r_of_p(const Vector& w0, const std::vector<bool>& prunable);

FeedforwardNet apply_mask(const FeedforwardNet& net, const PruneState& state);

struct SweepRow {
  double p = 0.0;
  double R = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_loss = 0.0;
  double test_acc = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // rows[0] is the dense baseline at p = 0
  double dense_test_acc = 0.0;
  double empirical_max_p = 0.0;
  double tolerance_points = 1.0;
};

inline constexpr double kDefaultTolerancePoints = 1.0;

/// Largest grid p whose test accuracy is within `tolerance_points`
/// percentage points of the dense network's.
double empirical_max_p(const SweepResult& sweep, double tolerance_points);

SweepResult sweep(const FeedforwardNet& net, const Dataset& train, const Dataset& test,
                  const std::vector<double>& p_grid, double tolerance_points = kDefaultTolerancePoints,
                  Exec exec = Exec::Serial);

void save_sweep(const std::filesystem::path& csv_path, const std::filesystem::path& json_path,
                const SweepResult& s);

}  // namespace prunability
