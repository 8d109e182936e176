#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "prunability/operators.hpp"
#include "prunability/parallel.hpp"

namespace testing {

using prunability::Matrix;
using prunability::Vector;

inline Matrix random_symmetric(Eigen::Index n, std::uint64_t seed) {
  auto rng = prunability::make_rng(seed, 0);
  std::normal_distribution<double> g;
  Matrix a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = g(rng);
  return (a + a.transpose()) / 2.0;
}

inline Vector random_vector(Eigen::Index n, std::uint64_t seed, std::uint64_t stream = 0) {
  auto rng = prunability::make_rng(seed, stream);
  std::normal_distribution<double> g;
  Vector v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

// Haar-ish orthogonal matrix from the QR of a Gaussian matrix.
inline Matrix random_orthogonal(Eigen::Index n, std::uint64_t seed) {
  auto rng = prunability::make_rng(seed, 7);
  std::normal_distribution<double> g;
  Matrix a(n, n);
  for (auto& x : a.reshaped()) x = g(rng);
  Eigen::HouseholderQR<Matrix> qr(a);
  return qr.householderQ();
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("prunability-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
