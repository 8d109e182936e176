#include "prunability/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "prunability/csv.hpp"

namespace prunability {

std::size_t PruneState::masked_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

Vector PruneState::pruned_weights() const {
  Vector wp = w0;
  for (Eigen::Index i = 0; i < wp.size(); ++i)
    if (mask[static_cast<std::size_t>(i)]) wp[i] = 0.0;
  return wp;
}

std::size_t prune_count(double p, std::size_t n_prunable) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("pruning ratio must lie in [0, 1]");
  return static_cast<std::size_t>(std::lround(p * static_cast<double>(n_prunable)));
}

std::vector<Eigen::Index> pruning_order(const Vector& w0, const std::vector<bool>& prunable) {
  if (static_cast<Eigen::Index>(prunable.size()) != w0.size())
    throw DimensionError("prunable flags do not match weight vector");
  std::vector<Eigen::Index> order;
  for (Eigen::Index i = 0; i < w0.size(); ++i)
    if (prunable[static_cast<std::size_t>(i)]) order.push_back(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return std::abs(w0[a]) < std::abs(w0[b]); });
  return order;
}

PruneState magnitude_mask(const Vector& w0, const std::vector<bool>& prunable, double p) {
  auto order = pruning_order(w0, prunable);
  const std::size_t count = prune_count(p, order.size());
  PruneState s;
  s.w0 = w0;
  s.prunable = prunable;
  s.mask.assign(static_cast<std::size_t>(w0.size()), false);
  s.p = p;
  double r2 = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    s.mask[static_cast<std::size_t>(order[k])] = true;
    r2 += w0[order[k]] * w0[order[k]];
  }
  s.R = std::sqrt(r2);
  return s;
}

RadiusCurve::RadiusCurve(const Vector& w0, const std::vector<bool>& prunable) {
  auto order = pruning_order(w0, prunable);
  prefix_.assign(order.size() + 1, 0.0);
  for (std::size_t k = 0; k < order.size(); ++k) prefix_[k + 1] = prefix_[k] + w0[order[k]] * w0[order[k]];
}

double RadiusCurve::operator()(double p) const {
  return std::sqrt(prefix_[prune_count(std::clamp(p, 0.0, 1.0), prunable_count())]);
}

RadiusCurve r_of_p(const Vector& w0, const std::vector<bool>& prunable) { return RadiusCurve(w0, prunable); }

FeedforwardNet apply_mask(const FeedforwardNet& net, const PruneState& state) {
  if (state.w0.size() != net.param_count() || static_cast<Eigen::Index>(state.mask.size()) != net.param_count())
    throw DimensionError("prune state does not match network size");
  Vector flat = net.flatten();
  for (Eigen::Index i = 0; i < flat.size(); ++i)
    if (state.mask[static_cast<std::size_t>(i)]) flat[i] = 0.0;
  FeedforwardNet out = net;
  out.unflatten(flat);
  return out;
}

double empirical_max_p(const SweepResult& sweep, double tolerance_points) {
  const double floor = sweep.dense_test_acc - tolerance_points / 100.0;
  double best = 0.0;
  for (const auto& row : sweep.rows)
    // 1e-12 absorbs the rounding in acc = correct / N against the floor.
    if (row.test_acc >= floor - 1e-12) best = std::max(best, row.p);
  return best;
}

SweepResult sweep(const FeedforwardNet& net, const Dataset& train, const Dataset& test,
                  const std::vector<double>& p_grid, double tolerance_points, Exec exec) {
  if (!std::is_sorted(p_grid.begin(), p_grid.end())) throw DomainError("p grid must be ascending");
  for (double p : p_grid)
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("p grid must lie in [0, 1]");

  const Vector w0 = net.flatten();
  const auto prunable = net.prunable();
  std::vector<double> ps;
  ps.push_back(0.0);
  ps.insert(ps.end(), p_grid.begin(), p_grid.end());

  SweepResult result;
  result.tolerance_points = tolerance_points;
  result.rows.resize(ps.size());
  auto eval_row = [&](std::size_t i) {
    PruneState state = magnitude_mask(w0, prunable, ps[i]);
    FeedforwardNet pruned = apply_mask(net, state);
    Evaluation tr = evaluate(pruned, train);
    Evaluation te = evaluate(pruned, test);
    result.rows[i] = {ps[i], state.R, tr.loss, tr.accuracy, te.loss, te.accuracy};
  };
  if (exec == Exec::Parallel) {
    std::vector<std::exception_ptr> errors(ps.size());
#pragma omp parallel for schedule(dynamic, 4)
    for (std::size_t i = 0; i < ps.size(); ++i) {
      try {
        eval_row(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (std::size_t i = 0; i < ps.size(); ++i) eval_row(i);
  }
  result.dense_test_acc = result.rows.front().test_acc;
  result.empirical_max_p = empirical_max_p(result, tolerance_points);
  return result;
}

void save_sweep(const std::filesystem::path& csv_path, const std::filesystem::path& json_path,
                const SweepResult& s) {
  std::vector<std::vector<double>> rows;
  for (const auto& r : s.rows) rows.push_back({r.p, r.R, r.train_loss, r.train_acc, r.test_loss, r.test_acc});
  csv::write(csv_path, {"p", "R", "train_loss", "train_acc", "test_loss", "test_acc"}, rows);
  nlohmann::ordered_json j;
  j["dense_test_acc"] = s.dense_test_acc;
  j["empirical_max_p"] = s.empirical_max_p;
  j["tolerance_points"] = s.tolerance_points;
  std::ofstream out(json_path, std::ios::binary);
  out << j.dump(2) << '\n';
  if (!out) throw Error("cannot write " + json_path.string());
}

}  // namespace prunability
