#pragma once

// Small fully connected ReLU classifiers: initialization, cross-entropy
// loss and its analytic gradient, L1-regularized SGD, finite-difference
// Hessian-vector products, dense Hessians, the sublevel margin estimate and
// dataset handling.
//
// Flat parameter order: for each layer in turn, the weight matrix
// (fan_out x fan_in) in row-major order, then that layer's bias vector.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "prunability/errors.hpp"
#include "prunability/operators.hpp"

namespace prunability {

enum class Activation { ReLU };

enum class Split { Train, Test };

struct Dataset {
  Matrix features;          // N x K
  std::vector<int> labels;  // N entries in [0, classes)
  int classes = 0;
  Split split = Split::Train;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index feature_dim() const { return features.cols(); }
  Dataset subset(const std::vector<Eigen::Index>& rows) const;
  Dataset slice(Eigen::Index begin, Eigen::Index end) const;
};

class FeedforwardNet {
 public:
  FeedforwardNet() = default;
  explicit FeedforwardNet(std::vector<int> widths, Activation act = Activation::ReLU);

  const std::vector<int>& widths() const { return widths_; }
  Activation activation() const { return activation_; }
  std::size_t layers() const { return weights_.size(); }

  Matrix& weight(std::size_t l) { return weights_[l]; }
  const Matrix& weight(std::size_t l) const { return weights_[l]; }
  Vector& bias(std::size_t l) { return biases_[l]; }
  const Vector& bias(std::size_t l) const { return biases_[l]; }

  Eigen::Index param_count() const { return param_count_; }
  Vector flatten() const;
  void unflatten(const Vector& flat);

  /// true for weight entries, false for biases (which are never pruned).
  std::vector<bool> prunable() const;

  /// Logits, N x classes.
  Matrix forward(const Matrix& x) const;

  friend bool operator==(const FeedforwardNet&, const FeedforwardNet&) = default;

 private:
  std::vector<int> widths_;
  Activation activation_ = Activation::ReLU;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
  Eigen::Index param_count_ = 0;
};

Eigen::Index parameter_count(const std::vector<int>& widths);

/// Weights ~ N(0, 2 / fan_in), biases zero.
FeedforwardNet init_kaiming(const std::vector<int>& widths, std::uint64_t seed);

/// Mean cross-entropy with a max-subtracted softmax.
double loss(const FeedforwardNet& net, const Dataset& batch);

/// Gradient of the mean cross-entropy (no L1 term), flat order. Sums fixed
/// 64-sample chunks in chunk order, so Serial and Parallel agree bitwise.
Vector grad(const FeedforwardNet& net, const Dataset& batch, Exec exec = Exec::Serial);

/// ReLU gates (1 where the pre-activation is > 0) of each hidden layer for
/// every sample of a batch, N x width per layer.
struct ActivationPattern {
  std::vector<Matrix> gates;
};

ActivationPattern activation_pattern(const FeedforwardNet& net, const Dataset& batch);

/// Gradient with hidden-unit gates frozen to `pattern` (nullptr = live ReLU):
/// the gradient of the smooth piece of the loss that contains the pattern's
/// base point.
Vector grad(const FeedforwardNet& net, const Dataset& batch, const ActivationPattern* pattern, Exec exec);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};
Evaluation evaluate(const FeedforwardNet& net, const Dataset& data);

struct TrainConfig {
  int batch_size = 32;
  int epochs = 200;
  double lr = 0.01;
  double momentum = 0.9;
  double lambda_l1 = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainResult {
  FeedforwardNet net;
  std::vector<double> loss_history;  // per-epoch mean data loss over batches
};

/// Thrown when the training loss becomes non-finite; keeps the history.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, std::vector<double> history)
      : NumericalError(what), history_(std::move(history)) {}
  const std::vector<double>& history() const { return history_; }

 private:
  std::vector<double> history_;
};

/// Heavy-ball SGD (v <- mu v + g, w <- w - lr v) on loss + lambda ||w||_1 with
/// subgradient sign(w), sign(0) = 0. Biases carry no L1 penalty. Batches are
/// reshuffled every epoch from `cfg.seed`.
TrainResult train_l1(FeedforwardNet net, const Dataset& data, const TrainConfig& cfg);

using GradientFn = std::function<Vector(const Vector&)>;

/// (grad(w + h v) - grad(w - h v)) / (2h), h = 1e-4 max(1, ||w||) / max(1e-12, ||v||).
Vector hessian_vector_product(const GradientFn& gradient, const Vector& w, const Vector& v);

/// Gradient map w -> grad(w) with ReLU gates frozen at the net's current
/// weights. Equal to the true gradient at the base point; finite differences
/// of it give the Hessian of the local smooth piece, which is the Hessian of
/// the loss wherever it exists, instead of picking up kink jumps.
GradientFn net_gradient_fn(const FeedforwardNet& net, const Dataset& batch, Exec exec = Exec::Serial);

Vector hvp(const FeedforwardNet& net, const Dataset& batch, const Vector& v);

/// Matrix-free Hessian of the mean data loss at the net's parameters.
SymmetricOperator hessian_operator(const FeedforwardNet& net, const Dataset& batch, Exec exec = Exec::Serial);

inline constexpr Eigen::Index kExactHessianLimit = 3000;

/// Columns hvp(e_i), symmetrized. Throws NumericalError when the asymmetry
/// exceeds 1e-3 ||M||.
DenseSymmetric finite_difference_hessian(const GradientFn& gradient, const Vector& w, Exec exec = Exec::Serial);
DenseSymmetric exact_hessian(const FeedforwardNet& net, const Dataset& batch, Exec exec = Exec::Serial);

/// Mean losses of consecutive batches in stored order (last batch may be short).
std::vector<double> batch_losses(const FeedforwardNet& net, const Dataset& data, int batch_size);

double population_std(const std::vector<double>& xs);

/// Population standard deviation of the per-batch training losses.
double epsilon_hat(const FeedforwardNet& net, const Dataset& data, int batch_size);

/// Isotropic unit Gaussians centred at separation/sqrt(2) * e_c, so every
/// pair of centres is `separation` apart. Sample i has label i % classes.
Dataset make_blobs(int n, int classes, double separation, std::uint64_t seed, Split split = Split::Train);

/// Numeric CSV with an optional header row. `label_column` indexes the label
/// field (negative counts from the end); `classes` = 0 infers max label + 1.
Dataset load_csv_dataset(const std::filesystem::path& path, int label_column, int classes = 0,
                         Split split = Split::Train);

void save_checkpoint(const std::filesystem::path& path, const FeedforwardNet& net, std::uint64_t seed);
FeedforwardNet load_checkpoint(const std::filesystem::path& path);

}  // namespace prunability
