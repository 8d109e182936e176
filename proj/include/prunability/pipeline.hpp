#pragma once

// End-to-end orchestration: config files, per-stage artifacts with a
// content-hash manifest, stage caching, the output-directory lock and the
// report.
//
// Config format: INI-style `key = value` lines grouped under [section]
// headers, `;` or `#` comments. Every key is optional (defaults below);
// unknown sections or keys are errors.
//
//   [run]       task, seed, out
//   [data]      source (blobs|csv), n_train, n_test, classes, separation,
//               train_path, test_path, label_column
//   [net]       widths (comma separated)
//   [train]     batch_size, epochs, lr, momentum, lambda_l1
//   [spectrum]  mode (exact|slq), iters, runs, sigma2, bins, parts
//   [predict]   tol
//   [sweep]     points, tolerance_points
//   [escape]    p, trials, k_step
//
// Relative CSV paths are resolved against the config file's directory.
//
// Stage seeds: derive_seed(seed, fnv1a64(stage name)) for the stage names
// "data.train", "data.test", "init", "train", "spectrum" and "escape".

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "prunability/errors.hpp"
#include "prunability/nets.hpp"
#include "prunability/parallel.hpp"
#include "prunability/spectral.hpp"

namespace prunability {

enum class Task { Train, Spectrum, Predict, Sweep, VerifyEscape, Report, Full };
enum class SpectrumMode { Exact, Slq };
enum class DataSource { Blobs, Csv };

const char* to_string(Task t);
const char* to_string(SpectrumMode m);
const char* to_string(DataSource s);
Task parse_task(std::string_view name);

/// Bad config text or value. Maps to CLI exit code 1.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage threw. Maps to CLI exit code 2.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Another process holds the output directory. Maps to CLI exit code 3.
class LockError : public Error {
 public:
  using Error::Error;
};

struct DataConfig {
  DataSource source = DataSource::Blobs;
  int n_train = 500;
  int n_test = 2000;
  int classes = 2;
  double separation = 4.0;
  std::string train_path;
  std::string test_path;
  int label_column = -1;  // -1 = last column

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunConfig {
  Task task = Task::Full;
  std::uint64_t seed = 1;
  std::string out = "out";

  DataConfig data;
  std::vector<int> widths = {2, 32, 32, 2};

  int batch_size = 32;
  int epochs = 200;
  double lr = 0.01;
  double momentum = 0.9;
  double lambda_l1 = 1e-3;

  SpectrumMode mode = SpectrumMode::Exact;
  SlqParams slq;
  int parts = 100;

  double tol = 1e-4;

  int sweep_points = 400;  // grid p = i / points, i = 1..points
  double tolerance_points = 1.0;

  double escape_p = 0.5;
  int escape_trials = 500;
  int escape_k_step = 1;

  // Directory that relative data paths resolve against; not serialized.
  std::filesystem::path base_dir;

  /// Throws ConfigError naming the offending key.
  void validate() const;
  TrainConfig train_config() const;
  std::vector<double> p_grid() const;

  friend bool operator==(const RunConfig& a, const RunConfig& b);
};

RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const RunConfig& c);

std::uint64_t fnv1a64(std::string_view s);
std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Exclusive advisory lock (flock) on `<dir>/.prunability.lock`, released on
/// destruction. Throws LockError when already held.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  int fd_ = -1;
};

struct Report {
  double p_star = 0.0;
  bool p_star_degenerate = false;
  std::string curve_file;
  double empirical_max_p = 0.0;
  double delta = 0.0;  // p_star - empirical_max_p
  double tolerance_points = 1.0;
  double dense_test_acc = 0.0;
  double eps_hat = 0.0;
  Eigen::Index dim = 0;
  int important_count = 0;
  SpectrumSource source = SpectrumSource::Exact;
  double residual_grad_norm = 0.0;

  std::string to_json() const;
  std::string to_text() const;
  static Report from_json(std::string_view text);
};

struct EscapeRow {
  int k = 0;
  double empirical_prob = 0.0;  // intersection probability
  double theorem_bound = 0.0;   // lower bound on the miss probability, clamped at 0; 0 for k <= w^2
};

struct EscapeTable {
  std::vector<EscapeRow> rows;
  double width = 0.0;  // projected width at R(p)
  double R = 0.0;
  int trials = 0;
  Eigen::Index dim = 0;
};

inline constexpr Eigen::Index kEscapeDimLimit = 300;

/// Runs a task against `cfg.out`, holding the lock for the whole call.
/// Stages whose key matches the manifest and whose files still hash the same
/// are loaded instead of recomputed.
class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, Exec exec = Exec::Parallel);

  void train();
  void spectrum();
  void predict();
  void sweep();
  Report report();
  Report full();
  EscapeTable verify_escape();

  /// Dispatch on cfg.task.
  void run();

  const std::filesystem::path& out_dir() const { return out_; }
  /// Stage names recomputed (not loaded from cache) by this instance.
  const std::vector<std::string>& computed_stages() const { return computed_; }

 private:
  struct StageRecord {
    std::string key;
    std::vector<std::string> files;
  };

  std::pair<Dataset, Dataset> datasets() const;
  FeedforwardNet trained_net();
  Spectrum convex_spectrum(double* eps_hat);
  std::string stage_key(std::string_view stage, std::string_view config_subset,
                        const std::vector<std::string>& upstream_files) const;
  bool cached(const std::string& stage, const std::string& key) const;
  void record(const std::string& stage, const std::string& key, std::vector<std::string> files);
  void write_manifest() const;
  std::string read_file(const std::string& name) const;
  template <class F>
  void run_stage(const std::string& stage, F&& body);

  RunConfig cfg_;
  Exec exec_;
  std::filesystem::path out_;
  std::optional<OutputLock> lock_;
  std::map<std::string, StageRecord> stages_;
  std::map<std::string, std::string> hashes_;
  std::vector<std::string> computed_;
};

/// Convenience wrappers that construct a Pipeline for one task.
Report cmd_full(const RunConfig& cfg, Exec exec = Exec::Parallel);
EscapeTable cmd_verify_escape(const RunConfig& cfg, Exec exec = Exec::Parallel);

/// Log level from PRUNABILITY_LOG (trace, debug, info, warn, error, off);
/// default warn.
void init_logging_from_env();

}  // namespace prunability
