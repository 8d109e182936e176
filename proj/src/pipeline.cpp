#include "prunability/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

#include <openssl/evp.h>
#include <spdlog/spdlog.h>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "prunability/csv.hpp"
#include "prunability/geometry.hpp"
#include "prunability/pruning.hpp"

namespace prunability {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kLockFile = ".prunability.lock";

template <class E>
struct Named {
  E value;
  const char* name;
};

constexpr Named<Task> kTasks[] = {
    {Task::Train, "train"},         {Task::Spectrum, "spectrum"}, {Task::Predict, "predict"},
    {Task::Sweep, "sweep"},         {Task::VerifyEscape, "verify-escape"},
    {Task::Report, "report"},       {Task::Full, "full"},
};
constexpr Named<SpectrumMode> kModes[] = {{SpectrumMode::Exact, "exact"}, {SpectrumMode::Slq, "slq"}};
constexpr Named<DataSource> kSources[] = {{DataSource::Blobs, "blobs"}, {DataSource::Csv, "csv"}};

template <class E, std::size_t N>
const char* name_of(const Named<E> (&table)[N], E v) {
  for (const auto& t : table)
    if (t.value == v) return t.name;
  return "?";
}

template <class E, std::size_t N>
E parse_named(const Named<E> (&table)[N], std::string_view s, const std::string& key) {
  for (const auto& t : table)
    if (s == t.name) return t.value;
  throw ConfigError(key + ": unknown value '" + std::string(s) + "'");
}

template <class T>
T parse_integer(const std::string& s, const std::string& key) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return v;
}

double parse_real(const std::string& s, const std::string& key) {
  try {
    return csv::parse_double(s, -1);
  } catch (const ParseError&) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
}

std::vector<int> parse_widths(const std::string& s, const std::string& key) {
  std::vector<int> out;
  for (auto f : csv::split(s)) {
    std::string t(f);
    t.erase(0, t.find_first_not_of(' '));
    t.erase(t.find_last_not_of(' ') + 1);
    out.push_back(parse_integer<int>(t, key));
  }
  return out;
}

std::string join_widths(const std::vector<int>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "," : "") + std::to_string(w[i]);
  return s;
}

struct Field {
  const char* section;
  const char* key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define INT_FIELD(sec, name, member)                                                                    \
  Field {                                                                                               \
    sec, name, [](RunConfig& c, const std::string& v, const std::string& k) {                           \
      c.member = parse_integer<decltype(c.member)>(v, k);                                               \
    },                                                                                                  \
        [](const RunConfig& c) { return std::to_string(c.member); }                                     \
  }
#define REAL_FIELD(sec, name, member)                                                                   \
  Field {                                                                                               \
    sec, name, [](RunConfig& c, const std::string& v, const std::string& k) { c.member = parse_real(v, k); }, \
        [](const RunConfig& c) { return csv::format_double(c.member); }                                 \
  }
#define STRING_FIELD(sec, name, member)                                                                 \
  Field {                                                                                               \
    sec, name, [](RunConfig& c, const std::string& v, const std::string&) { c.member = v; },           \
        [](const RunConfig& c) { return c.member; }                                                     \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"run", "task", [](RunConfig& c, const std::string& v, const std::string&) { c.task = parse_task(v); },
            [](const RunConfig& c) { return std::string(to_string(c.task)); }},
      INT_FIELD("run", "seed", seed),
      STRING_FIELD("run", "out", out),
      Field{"data", "source",
            [](RunConfig& c, const std::string& v, const std::string& k) { c.data.source = parse_named(kSources, v, k); },
            [](const RunConfig& c) { return std::string(to_string(c.data.source)); }},
      INT_FIELD("data", "n_train", data.n_train),
      INT_FIELD("data", "n_test", data.n_test),
      INT_FIELD("data", "classes", data.classes),
      REAL_FIELD("data", "separation", data.separation),
      STRING_FIELD("data", "train_path", data.train_path),
      STRING_FIELD("data", "test_path", data.test_path),
      INT_FIELD("data", "label_column", data.label_column),
      Field{"net", "widths",
            [](RunConfig& c, const std::string& v, const std::string& k) { c.widths = parse_widths(v, k); },
            [](const RunConfig& c) { return join_widths(c.widths); }},
      INT_FIELD("train", "batch_size", batch_size),
      INT_FIELD("train", "epochs", epochs),
      REAL_FIELD("train", "lr", lr),
      REAL_FIELD("train", "momentum", momentum),
      REAL_FIELD("train", "lambda_l1", lambda_l1),
      Field{"spectrum", "mode",
            [](RunConfig& c, const std::string& v, const std::string& k) { c.mode = parse_named(kModes, v, k); },
            [](const RunConfig& c) { return std::string(to_string(c.mode)); }},
      INT_FIELD("spectrum", "iters", slq.iters),
      INT_FIELD("spectrum", "runs", slq.runs),
      REAL_FIELD("spectrum", "sigma2", slq.sigma2),
      INT_FIELD("spectrum", "bins", slq.bins),
      INT_FIELD("spectrum", "parts", parts),
      REAL_FIELD("predict", "tol", tol),
      INT_FIELD("sweep", "points", sweep_points),
      REAL_FIELD("sweep", "tolerance_points", tolerance_points),
      REAL_FIELD("escape", "p", escape_p),
      INT_FIELD("escape", "trials", escape_trials),
      INT_FIELD("escape", "k_step", escape_k_step),
  };
  return table;
}

#undef INT_FIELD
#undef REAL_FIELD
#undef STRING_FIELD

// key = value lines for the given sections, in table order.
std::string section_text(const RunConfig& c, std::initializer_list<std::string_view> sections) {
  std::string out;
  for (const auto& f : fields())
    for (auto s : sections)
      if (s == f.section) out += std::string(f.section) + "." + f.key + "=" + f.get(c) + "\n";
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace

const char* to_string(Task t) { return name_of(kTasks, t); }
const char* to_string(SpectrumMode m) { return name_of(kModes, m); }
const char* to_string(DataSource s) { return name_of(kSources, s); }

Task parse_task(std::string_view name) { return parse_named(kTasks, name, "task"); }

bool operator==(const RunConfig& a, const RunConfig& b) {
  // Every serialized field and nothing else. Reals print in shortest
  // round-trip form, so equal text means equal values.
  for (const auto& f : fields())
    if (f.get(a) != f.get(b)) return false;
  return true;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (data.classes < 2) fail("data.classes", "need at least 2 classes");
  if (data.source == DataSource::Blobs) {
    if (data.n_train < data.classes) fail("data.n_train", "must be at least data.classes");
    if (data.n_test < data.classes) fail("data.n_test", "must be at least data.classes");
    if (!(data.separation > 0.0)) fail("data.separation", "must be positive");
  } else {
    if (data.train_path.empty()) fail("data.train_path", "required for csv data");
    if (data.test_path.empty()) fail("data.test_path", "required for csv data");
  }
  if (widths.size() < 2) fail("net.widths", "need at least an input and an output width");
  for (int w : widths)
    if (w < 1) fail("net.widths", "widths must be positive");
  if (data.source == DataSource::Blobs && widths.front() != data.classes)
    fail("net.widths", "blobs have one feature per class, so the input width must equal data.classes");
  if (widths.back() != data.classes) fail("net.widths", "output width must equal data.classes");
  if (batch_size < 1) fail("train.batch_size", "must be >= 1");
  if (epochs < 1) fail("train.epochs", "must be >= 1");
  if (!(lr > 0.0)) fail("train.lr", "must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("train.momentum", "must lie in [0, 1)");
  if (!(lambda_l1 >= 0.0)) fail("train.lambda_l1", "must be non-negative");
  if (slq.iters < 2) fail("spectrum.iters", "must be >= 2");
  if (slq.runs < 1) fail("spectrum.runs", "must be >= 1");
  if (!(slq.sigma2 > 0.0)) fail("spectrum.sigma2", "must be positive");
  if (slq.bins < 100) fail("spectrum.bins", "must be >= 100");
  if (parts < 1) fail("spectrum.parts", "must be >= 1");
  if (!(tol > 0.0 && tol < 0.5)) fail("predict.tol", "must lie in (0, 0.5)");
  if (sweep_points < 1) fail("sweep.points", "must be >= 1");
  if (!(tolerance_points >= 0.0 && tolerance_points <= 100.0)) fail("sweep.tolerance_points", "must lie in [0, 100]");
  if (!(escape_p >= 0.0 && escape_p <= 1.0)) fail("escape.p", "must lie in [0, 1]");
  if (escape_trials < 100) fail("escape.trials", "must be >= 100");
  if (escape_k_step < 1) fail("escape.k_step", "must be >= 1");
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.batch_size = batch_size;
  t.epochs = epochs;
  t.lr = lr;
  t.momentum = momentum;
  t.lambda_l1 = lambda_l1;
  t.seed = stage_seed(seed, "train");
  return t;
}

std::vector<double> RunConfig::p_grid() const {
  std::vector<double> g;
  for (int i = 1; i <= sweep_points; ++i) g.push_back(static_cast<double>(i) / sweep_points);
  return g;
}

RunConfig parse_config(std::string_view text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  RunConfig c;
  std::set<std::string> known_sections;
  for (const auto& f : fields()) known_sections.insert(f.section);
  for (const auto& [section, node] : tree) {
    if (node.empty() && !node.data().empty()) throw ConfigError("key '" + section + "' outside any [section]");
    if (!known_sections.count(section)) throw ConfigError("unknown section [" + section + "]");
    for (const auto& [key, value] : node) {
      const std::string full = section + "." + key;
      auto it = std::find_if(fields().begin(), fields().end(),
                             [&](const Field& f) { return section == f.section && key == f.key; });
      if (it == fields().end()) throw ConfigError("unknown key '" + full + "'");
      if (!value.empty()) throw ConfigError(full + ": nested value");
      it->set(c, value.data(), full);
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c = parse_config(ss.str());
  c.base_dir = fs::absolute(path).parent_path();
  return c;
}

std::string serialize_config(const RunConfig& c) {
  std::string out;
  std::string current;
  for (const auto& f : fields()) {
    if (current != f.section) {
      if (!current.empty()) out += "\n";
      current = f.section;
      out += "[" + current + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(c) + "\n";
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) { return derive_seed(seed, fnv1a64(stage)); }

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

OutputLock::OutputLock(const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path path = dir / kLockFile;
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw Error("cannot open lock file " + path.string() + ": " + std::strerror(errno));
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    const int err = errno;
    ::close(fd_);
    fd_ = -1;
    if (err == EWOULDBLOCK) throw LockError("output directory " + dir.string() + " is locked by another run");
    throw Error("cannot lock " + path.string() + ": " + std::strerror(err));
  }
}

OutputLock::~OutputLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

std::string Report::to_json() const {
  nlohmann::ordered_json j;
  j["p_star"] = p_star;
  j["p_star_degenerate"] = p_star_degenerate;
  j["curve_file"] = curve_file;
  j["empirical_max_p"] = empirical_max_p;
  j["delta"] = delta;
  j["tolerance_points"] = tolerance_points;
  j["dense_test_acc"] = dense_test_acc;
  j["eps_hat"] = eps_hat;
  j["D"] = dim;
  j["important_count"] = important_count;
  j["spectrum_source"] = prunability::to_string(source);
  j["residual_grad_norm"] = residual_grad_norm;
  return j.dump(2) + "\n";
}

Report Report::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("report: ") + e.what());
  }
  Report r;
  try {
    r.p_star = j.at("p_star").get<double>();
    r.p_star_degenerate = j.at("p_star_degenerate").get<bool>();
    r.curve_file = j.at("curve_file").get<std::string>();
    r.empirical_max_p = j.at("empirical_max_p").get<double>();
    r.delta = j.at("delta").get<double>();
    r.tolerance_points = j.at("tolerance_points").get<double>();
    r.dense_test_acc = j.at("dense_test_acc").get<double>();
    r.eps_hat = j.at("eps_hat").get<double>();
    r.dim = j.at("D").get<Eigen::Index>();
    r.important_count = j.at("important_count").get<int>();
    const auto src = j.at("spectrum_source").get<std::string>();
    if (src == to_string(SpectrumSource::Exact))
      r.source = SpectrumSource::Exact;
    else if (src == to_string(SpectrumSource::SlqReconstructed))
      r.source = SpectrumSource::SlqReconstructed;
    else
      throw ParseError("report: unknown spectrum_source '" + src + "'");
    r.residual_grad_norm = j.at("residual_grad_norm").get<double>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("report: ") + e.what());
  }
  return r;
}

std::string Report::to_text() const {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "predicted max pruning ratio  " << 100.0 * p_star << "%" << (p_star_degenerate ? " (no crossing)" : "")
    << "\n";
  s << "empirical max pruning ratio  " << 100.0 * empirical_max_p << "% (test accuracy within " << tolerance_points
    << " points of dense " << 100.0 * dense_test_acc << "%)\n";
  s << "difference                   " << 100.0 * delta << " points\n";
  s << std::defaultfloat << std::setprecision(6);
  s << "eps_hat                      " << eps_hat << "\n";
  s << "parameters D                 " << dim << "\n";
  s << "important eigenvalues        " << important_count << "\n";
  s << "spectrum                     " << prunability::to_string(source) << "\n";
  s << "residual gradient norm       " << residual_grad_norm << "\n";
  s << "threshold curve              " << curve_file << "\n";
  return s.str();
}

Pipeline::Pipeline(RunConfig cfg, Exec exec) : cfg_(std::move(cfg)), exec_(exec), out_(cfg_.out) {
  cfg_.validate();
  lock_.emplace(out_);
  const fs::path manifest = out_ / kManifest;
  if (!fs::exists(manifest)) return;
  try {
    json j = read_json(manifest);
    for (const auto& [name, s] : j.at("stages").items())
      stages_[name] = {s.at("key").get<std::string>(), s.at("files").get<std::vector<std::string>>()};
    for (const auto& [name, h] : j.at("files").items()) hashes_[name] = h.get<std::string>();
  } catch (const std::exception& e) {
    spdlog::warn("ignoring unreadable manifest {}: {}", manifest.string(), e.what());
    stages_.clear();
    hashes_.clear();
  }
}

std::pair<Dataset, Dataset> Pipeline::datasets() const {
  const auto& d = cfg_.data;
  if (d.source == DataSource::Blobs)
    return {make_blobs(d.n_train, d.classes, d.separation, stage_seed(cfg_.seed, "data.train"), Split::Train),
            make_blobs(d.n_test, d.classes, d.separation, stage_seed(cfg_.seed, "data.test"), Split::Test)};
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : cfg_.base_dir / p; };
  Dataset train = load_csv_dataset(resolve(d.train_path), d.label_column, d.classes, Split::Train);
  Dataset test = load_csv_dataset(resolve(d.test_path), d.label_column, d.classes, Split::Test);
  if (train.feature_dim() != cfg_.widths.front() || test.feature_dim() != cfg_.widths.front())
    throw DimensionError("dataset feature count does not match the input width");
  return {std::move(train), std::move(test)};
}

std::string Pipeline::stage_key(std::string_view stage, std::string_view config_subset,
                                const std::vector<std::string>& upstream_files) const {
  std::string material = std::string(stage) + "\n" + std::string(config_subset);
  if (cfg_.data.source == DataSource::Csv) {
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : cfg_.base_dir / p; };
    material += "train_csv=" + sha256_file(resolve(cfg_.data.train_path)) + "\n";
    material += "test_csv=" + sha256_file(resolve(cfg_.data.test_path)) + "\n";
  }
  for (const auto& f : upstream_files) {
    auto it = hashes_.find(f);
    material += f + "=" + (it == hashes_.end() ? std::string("missing") : it->second) + "\n";
  }
  return sha256_hex(material);
}

bool Pipeline::cached(const std::string& stage, const std::string& key) const {
  auto it = stages_.find(stage);
  if (it == stages_.end() || it->second.key != key) return false;
  for (const auto& f : it->second.files) {
    auto h = hashes_.find(f);
    if (h == hashes_.end() || !fs::exists(out_ / f) || sha256_file(out_ / f) != h->second) return false;
  }
  return true;
}

void Pipeline::record(const std::string& stage, const std::string& key, std::vector<std::string> files) {
  for (const auto& f : files) hashes_[f] = sha256_file(out_ / f);
  stages_[stage] = {key, std::move(files)};
  write_manifest();
}

void Pipeline::write_manifest() const {
  json j;
  j["version"] = 1;
  j["files"] = json::object();
  for (const auto& [name, h] : hashes_) j["files"][name] = h;
  j["stages"] = json::object();
  for (const auto& [name, s] : stages_) j["stages"][name] = {{"key", s.key}, {"files", s.files}};
  write_text(out_ / kManifest, j.dump(2) + "\n");
}

std::string Pipeline::read_file(const std::string& name) const {
  std::ifstream in(out_ / name, std::ios::binary);
  if (!in) throw Error("missing artifact " + (out_ / name).string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class F>
void Pipeline::run_stage(const std::string& stage, F&& body) {
  try {
    body();
  } catch (const StageError&) {
    throw;
  } catch (const LockError&) {
    throw;
  } catch (const std::exception& e) {
    write_manifest();
    throw StageError(stage, e.what());
  }
}

void Pipeline::train() {
  const std::string key = stage_key("train", std::to_string(cfg_.seed) + "\n" + section_text(cfg_, {"data", "net", "train"}), {});
  if (cached("train", key)) return;
  run_stage("train", [&] {
    spdlog::info("train: widths {} lambda_l1 {}", join_widths(cfg_.widths), cfg_.lambda_l1);
    auto [train_data, test_data] = datasets();
    const TrainConfig tc = cfg_.train_config();
    TrainResult res = train_l1(init_kaiming(cfg_.widths, stage_seed(cfg_.seed, "init")), train_data, tc);
    save_checkpoint(out_ / "model.ckpt", res.net, cfg_.seed);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < res.loss_history.size(); ++i)
      rows.push_back({static_cast<double>(i + 1), res.loss_history[i]});
    csv::write(out_ / "train_history.csv", {"epoch", "loss"}, rows);
    computed_.push_back("train");
    record("train", key, {"model.ckpt", "train_history.csv"});
  });
}

FeedforwardNet Pipeline::trained_net() {
  train();
  return load_checkpoint(out_ / "model.ckpt");
}

void Pipeline::spectrum() {
  train();
  const std::string key = stage_key("spectrum", std::to_string(cfg_.seed) + "\n" + section_text(cfg_, {"data", "train", "spectrum"}),
                                    {"model.ckpt"});
  if (cached("spectrum", key)) return;
  run_stage("spectrum", [&] {
    const FeedforwardNet net = trained_net();
    auto [train_data, test_data] = datasets();
    const Vector w0 = net.flatten();
    const Eigen::Index dim = w0.size();
    nlohmann::ordered_json meta;
    meta["D"] = dim;
    meta["eps_hat"] = epsilon_hat(net, train_data, cfg_.batch_size);
    const double gnorm = grad(net, train_data, exec_).norm();
    spdlog::info("spectrum: residual gradient norm at w0 {}", gnorm);
    meta["residual_grad_norm"] = gnorm;
    std::vector<std::string> files = {"spectrum.csv", "spectrum.json"};
    Spectrum spec;
    if (cfg_.mode == SpectrumMode::Exact) {
      if (dim > kExactHessianLimit)
        throw DomainError("exact mode supports D <= " + std::to_string(kExactHessianLimit) + ", got " +
                          std::to_string(dim));
      DenseSymmetric h = exact_hessian(net, train_data, exec_);
      spec = exact_spectrum(h);
      meta["symmetrization_residual"] = h.symmetrization_residual();
    } else {
      const SymmetricOperator op = hessian_operator(net, train_data, exec_);
      const ImportantCensus census = important_census(op, w0, cfg_.parts);
      SlqParams params = cfg_.slq;
      if (params.iters > dim) {
        spdlog::warn("spectrum: iters {} exceeds D = {}, using D", params.iters, dim);
        params.iters = static_cast<int>(dim);
      }
      const SpectralDensity density = slq_density(op, params, stage_seed(cfg_.seed, "spectrum"), exec_);
      save_density_csv(out_ / "density.csv", density);
      files.push_back("density.csv");
      spec = reconstruct_spectrum(density, static_cast<int>(dim), census.estimate, density.min_ritz);
      meta["census_probed"] = census.probed;
      meta["census_flagged"] = census.flagged;
      meta["density_mass"] = density.mass();
    }
    meta["source"] = to_string(spec.source);
    meta["important_count"] = spec.important_count;
    save_spectrum_csv(out_ / "spectrum.csv", spec);
    write_text(out_ / "spectrum.json", meta.dump(2) + "\n");
    computed_.push_back("spectrum");
    record("spectrum", key, files);
  });
}

Spectrum Pipeline::convex_spectrum(double* eps_hat) {
  spectrum();
  json meta = json::parse(read_file("spectrum.json"));
  Spectrum s;
  s.eigenvalues = load_spectrum_csv(out_ / "spectrum.csv");
  s.source = meta.at("source").get<std::string>() == to_string(SpectrumSource::Exact) ? SpectrumSource::Exact
                                                                                        : SpectrumSource::SlqReconstructed;
  s.important_count = meta.at("important_count").get<int>();
  if (eps_hat) *eps_hat = meta.at("eps_hat").get<double>();
  return convexify(s);
}

void Pipeline::predict() {
  spectrum();
  const std::string key = stage_key("predict", section_text(cfg_, {"predict"}), {"model.ckpt", "spectrum.csv", "spectrum.json"});
  if (cached("predict", key)) return;
  run_stage("predict", [&] {
    double eps = 0.0;
    const Spectrum spec = convex_spectrum(&eps);
    const FeedforwardNet net = trained_net();
    const EllipsoidSpec e(spec, eps);
    const RadiusCurve rc = r_of_p(net.flatten(), net.prunable());
    const ThresholdCurve curve = solve_phase_transition(e, [&](double p) { return rc(p); }, cfg_.tol);
    spdlog::info("predict: p* = {}{}", curve.p_star, curve.degenerate ? " (degenerate)" : "");
    save_curve(out_ / "curve.csv", out_ / "curve.json", curve, e);
    computed_.push_back("predict");
    record("predict", key, {"curve.csv", "curve.json"});
  });
}

void Pipeline::sweep() {
  train();
  const std::string key = stage_key("sweep", std::to_string(cfg_.seed) + "\n" + section_text(cfg_, {"data", "sweep"}), {"model.ckpt"});
  if (cached("sweep", key)) return;
  run_stage("sweep", [&] {
    const FeedforwardNet net = trained_net();
    auto [train_data, test_data] = datasets();
    const SweepResult s = prunability::sweep(net, train_data, test_data, cfg_.p_grid(), cfg_.tolerance_points, exec_);
    spdlog::info("sweep: dense test accuracy {}, empirical max p {}", s.dense_test_acc, s.empirical_max_p);
    save_sweep(out_ / "sweep.csv", out_ / "sweep.json", s);
    computed_.push_back("sweep");
    record("sweep", key, {"sweep.csv", "sweep.json"});
  });
}

Report Pipeline::report() {
  Report r;
  run_stage("report", [&] {
    for (const char* f : {"curve.json", "sweep.json", "spectrum.json"}) {
      auto h = hashes_.find(f);
      if (h == hashes_.end() || !fs::exists(out_ / f) || sha256_file(out_ / f) != h->second)
        throw Error(std::string("artifact ") + f + " is missing or stale; run predict and sweep first");
    }
    const json curve = json::parse(read_file("curve.json"));
    const json sw = json::parse(read_file("sweep.json"));
    const json spec = json::parse(read_file("spectrum.json"));
    r.p_star = curve.at("p_star").get<double>();
    r.p_star_degenerate = curve.value("degenerate", false);
    r.curve_file = "curve.csv";
    r.empirical_max_p = sw.at("empirical_max_p").get<double>();
    r.tolerance_points = sw.at("tolerance_points").get<double>();
    r.dense_test_acc = sw.at("dense_test_acc").get<double>();
    r.delta = r.p_star - r.empirical_max_p;
    r.eps_hat = curve.at("eps_hat").get<double>();
    r.dim = curve.at("D").get<Eigen::Index>();
    r.important_count = curve.at("important_count").get<int>();
    r.source = spec.at("source").get<std::string>() == to_string(SpectrumSource::Exact)
                   ? SpectrumSource::Exact
                   : SpectrumSource::SlqReconstructed;
    r.residual_grad_norm = spec.at("residual_grad_norm").get<double>();
    write_text(out_ / "report.json", r.to_json());
    write_text(out_ / "report.txt", r.to_text());
    computed_.push_back("report");
    record("report", sha256_hex(r.to_json()), {"report.json", "report.txt"});
  });
  return r;
}

Report Pipeline::full() {
  predict();
  sweep();
  return report();
}

EscapeTable Pipeline::verify_escape() {
  spectrum();
  const std::string key = stage_key("escape", std::to_string(cfg_.seed) + "\n" + section_text(cfg_, {"data", "escape"}),
                                    {"model.ckpt", "spectrum.json"});
  EscapeTable table;
  if (cached("escape", key)) {
    const json meta = json::parse(read_file("escape.json"));
    table.width = meta.at("width").get<double>();
    table.R = meta.at("R").get<double>();
    table.trials = meta.at("trials").get<int>();
    table.dim = meta.at("D").get<Eigen::Index>();
    for (const auto& row : csv::read(out_ / "escape.csv", {"k", "empirical_prob", "theorem_bound"}).rows)
      table.rows.push_back({static_cast<int>(row[0]), row[1], row[2]});
    return table;
  }
  run_stage("verify-escape", [&] {
    const FeedforwardNet net = trained_net();
    auto [train_data, test_data] = datasets();
    const Vector w0 = net.flatten();
    const Eigen::Index dim = w0.size();
    if (dim > kEscapeDimLimit)
      throw DomainError("verify-escape needs D <= " + std::to_string(kEscapeDimLimit) + ", got " + std::to_string(dim));
    const double eps = json::parse(read_file("spectrum.json")).at("eps_hat").get<double>();

    // Convexified Hessian Q |Lambda| Q^T, with near-zero eigenvalues at the
    // sentinel, so the tested set is the one the width formula describes.
    const DenseSymmetric h = exact_hessian(net, train_data, exec_);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(h.entries());
    if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    Vector lam = eig.eigenvalues().cwiseAbs();
    const double top = lam.maxCoeff();
    for (Eigen::Index i = 0; i < dim; ++i)
      if (lam[i] <= kImportantRelativeThreshold * top) lam[i] = kImportantSentinel;
    const DenseSymmetric hc(eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose());
    Spectrum spec;
    spec.eigenvalues.assign(lam.data(), lam.data() + dim);
    std::sort(spec.eigenvalues.begin(), spec.eigenvalues.end());
    spec.important_count = count_near_zero(spec.eigenvalues);

    const PruneState state = magnitude_mask(w0, net.prunable(), cfg_.escape_p);
    const Vector wp = state.pruned_weights();
    table.R = state.R;
    table.width = projected_width(EllipsoidSpec(spec, eps), state.R);
    table.trials = cfg_.escape_trials;
    table.dim = dim;
    const std::uint64_t seed = stage_seed(cfg_.seed, "escape");
    std::vector<int> ks;
    for (int k = cfg_.escape_k_step; k < dim; k += cfg_.escape_k_step) ks.push_back(k);
    ks.push_back(static_cast<int>(dim));
    std::vector<std::vector<double>> rows;
    for (int k : ks) {
      const EscapeResult r = escape_mc(hc, eps, w0, wp, k, cfg_.escape_trials, derive_seed(seed, k), exec_);
      // Below w^2 the theorem says nothing; above it the bound can still be
      // negative (vacuous), which is reported as 0 as well.
      const double bound = k > table.width * table.width ? std::max(0.0, escape_bound(k, table.width)) : 0.0;
      table.rows.push_back({k, r.probability, bound});
      rows.push_back({static_cast<double>(k), r.probability, bound});
    }
    csv::write(out_ / "escape.csv", {"k", "empirical_prob", "theorem_bound"}, rows);
    nlohmann::ordered_json meta;
    meta["D"] = dim;
    meta["p"] = cfg_.escape_p;
    meta["R"] = table.R;
    meta["eps_hat"] = eps;
    meta["width"] = table.width;
    meta["trials"] = table.trials;
    write_text(out_ / "escape.json", meta.dump(2) + "\n");
    computed_.push_back("escape");
    record("escape", key, {"escape.csv", "escape.json"});
  });
  return table;
}

void Pipeline::run() {
  switch (cfg_.task) {
    case Task::Train: train(); break;
    case Task::Spectrum: spectrum(); break;
    case Task::Predict: predict(); break;
    case Task::Sweep: sweep(); break;
    case Task::VerifyEscape: verify_escape(); break;
    case Task::Report: report(); break;
    case Task::Full: full(); break;
  }
}

Report cmd_full(const RunConfig& cfg, Exec exec) { return Pipeline(cfg, exec).full(); }

EscapeTable cmd_verify_escape(const RunConfig& cfg, Exec exec) { return Pipeline(cfg, exec).verify_escape(); }

void init_logging_from_env() {
  const char* env = std::getenv("PRUNABILITY_LOG");
  spdlog::set_level(spdlog::level::warn);
  if (!env || !*env) return;
  const auto level = spdlog::level::from_str(env);
  // from_str maps unknown names to off; only accept "off" when spelled out.
  if (level == spdlog::level::off && std::string_view(env) != "off") {
    spdlog::warn("unknown PRUNABILITY_LOG level '{}', using warn", env);
    return;
  }
  spdlog::set_level(level);
}

}  // namespace prunability
