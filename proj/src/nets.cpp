#include "prunability/nets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>

#include <nlohmann/json.hpp>

#include "prunability/csv.hpp"

namespace prunability {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr Eigen::Index kGradChunk = 64;

Matrix add_bias(const Matrix& z, const Vector& b) { return z.rowwise() + b.transpose(); }

struct ChunkResult {
  double loss_sum = 0.0;
  Vector grad_sum;
};

// Summed (not averaged) loss and gradient over rows [begin, end). With a
// pattern, hidden units use the stored 0/1 gates instead of z > 0.
ChunkResult loss_grad_sum(const FeedforwardNet& net, const Dataset& data, Eigen::Index begin, Eigen::Index end,
                          bool want_grad, const ActivationPattern* pattern = nullptr) {
  const std::size_t layers = net.layers();
  const Eigen::Index n = end - begin;
  std::vector<Matrix> acts;   // inputs to each layer
  std::vector<Matrix> pre;    // pre-activations of each layer
  acts.reserve(layers);
  pre.reserve(layers);
  acts.push_back(data.features.middleRows(begin, n));
  for (std::size_t l = 0; l < layers; ++l) {
    pre.push_back(add_bias(acts.back() * net.weight(l).transpose(), net.bias(l)));
    if (l + 1 < layers) {
      if (pattern)
        acts.push_back(pre.back().cwiseProduct(pattern->gates[l].middleRows(begin, n)));
      else
        acts.push_back(pre.back().cwiseMax(0.0));
    }
  }
  const Matrix& logits = pre.back();

  ChunkResult r;
  Matrix dz(n, logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double top = logits.row(i).maxCoeff();
    auto shifted = (logits.row(i).array() - top).exp();
    const double denom = shifted.sum();
    const int y = data.labels[static_cast<std::size_t>(begin + i)];
    r.loss_sum += std::log(denom) - (logits(i, y) - top);
    if (want_grad) {
      dz.row(i) = shifted / denom;
      dz(i, y) -= 1.0;
    }
  }
  if (!std::isfinite(r.loss_sum)) throw NumericalError("non-finite activations in forward pass");
  if (!want_grad) return r;

  r.grad_sum = Vector::Zero(net.param_count());
  // Offsets of each layer's block in flat order.
  std::vector<Eigen::Index> offset(layers);
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    offset[l] = off;
    off += net.weight(l).size() + net.bias(l).size();
  }
  for (std::size_t l = layers; l-- > 0;) {
    const Matrix& w = net.weight(l);
    Eigen::Map<RowMajor>(r.grad_sum.data() + offset[l], w.rows(), w.cols()) = dz.transpose() * acts[l];
    r.grad_sum.segment(offset[l] + w.size(), w.rows()) = dz.colwise().sum().transpose();
    if (l > 0) {
      Matrix da = dz * w;
      if (pattern)
        dz = da.cwiseProduct(pattern->gates[l - 1].middleRows(begin, n));
      else
        dz = da.cwiseProduct((pre[l - 1].array() > 0.0).cast<double>().matrix());
    }
  }
  return r;
}

void require_batch(const FeedforwardNet& net, const Dataset& batch) {
  if (batch.size() < 1) throw DomainError("empty batch");
  if (batch.feature_dim() != net.widths().front()) throw DimensionError("batch feature dimension does not match net");
  for (int y : batch.labels)
    if (y < 0 || y >= net.widths().back()) throw DomainError("label out of range for net output");
}

}  // namespace

Dataset Dataset::subset(const std::vector<Eigen::Index>& rows) const {
  Dataset d;
  d.features.resize(static_cast<Eigen::Index>(rows.size()), feature_dim());
  d.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    d.features.row(static_cast<Eigen::Index>(i)) = features.row(rows[i]);
    d.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  d.classes = classes;
  d.split = split;
  return d;
}

Dataset Dataset::slice(Eigen::Index begin, Eigen::Index end) const {
  Dataset d;
  d.features = features.middleRows(begin, end - begin);
  d.labels.assign(labels.begin() + begin, labels.begin() + end);
  d.classes = classes;
  d.split = split;
  return d;
}

Eigen::Index parameter_count(const std::vector<int>& widths) {
  Eigen::Index d = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l)
    d += static_cast<Eigen::Index>(widths[l]) * widths[l + 1] + widths[l + 1];
  return d;
}

FeedforwardNet::FeedforwardNet(std::vector<int> widths, Activation act)
    : widths_(std::move(widths)), activation_(act) {
  if (widths_.size() < 2) throw DomainError("a network needs at least two layers of widths");
  for (int w : widths_)
    if (w < 1) throw DomainError("layer widths must be positive");
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    weights_.push_back(Matrix::Zero(widths_[l + 1], widths_[l]));
    biases_.push_back(Vector::Zero(widths_[l + 1]));
  }
  param_count_ = parameter_count(widths_);
}

Vector FeedforwardNet::flatten() const {
  Vector flat(param_count_);
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const Matrix& w = weights_[l];
    Eigen::Map<RowMajor>(flat.data() + off, w.rows(), w.cols()) = w;
    off += w.size();
    flat.segment(off, biases_[l].size()) = biases_[l];
    off += biases_[l].size();
  }
  return flat;
}

void FeedforwardNet::unflatten(const Vector& flat) {
  if (flat.size() != param_count_) throw DimensionError("flat parameter vector has wrong length");
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Matrix& w = weights_[l];
    w = Eigen::Map<const RowMajor>(flat.data() + off, w.rows(), w.cols());
    off += w.size();
    biases_[l] = flat.segment(off, biases_[l].size());
    off += biases_[l].size();
  }
}

std::vector<bool> FeedforwardNet::prunable() const {
  std::vector<bool> mask;
  mask.reserve(static_cast<std::size_t>(param_count_));
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    mask.insert(mask.end(), static_cast<std::size_t>(weights_[l].size()), true);
    mask.insert(mask.end(), static_cast<std::size_t>(biases_[l].size()), false);
  }
  return mask;
}

Matrix FeedforwardNet::forward(const Matrix& x) const {
  if (x.cols() != widths_.front()) throw DimensionError("input dimension does not match net");
  Matrix a = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Matrix z = add_bias(a * weights_[l].transpose(), biases_[l]);
    a = (l + 1 < weights_.size()) ? Matrix(z.cwiseMax(0.0)) : z;
  }
  return a;
}

FeedforwardNet init_kaiming(const std::vector<int>& widths, std::uint64_t seed) {
  FeedforwardNet net(widths);
  Rng rng = make_rng(seed, 0);
  for (std::size_t l = 0; l < net.layers(); ++l) {
    Matrix& w = net.weight(l);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(w.cols())));
    // Fill in flat (row-major) order so the draw sequence matches the layout.
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = normal(rng);
  }
  return net;
}

double loss(const FeedforwardNet& net, const Dataset& batch) {
  require_batch(net, batch);
  return loss_grad_sum(net, batch, 0, batch.size(), false).loss_sum / static_cast<double>(batch.size());
}

ActivationPattern activation_pattern(const FeedforwardNet& net, const Dataset& batch) {
  require_batch(net, batch);
  ActivationPattern p;
  Matrix a = batch.features;
  for (std::size_t l = 0; l + 1 < net.layers(); ++l) {
    Matrix z = add_bias(a * net.weight(l).transpose(), net.bias(l));
    p.gates.push_back((z.array() > 0.0).cast<double>().matrix());
    a = z.cwiseMax(0.0);
  }
  return p;
}

Vector grad(const FeedforwardNet& net, const Dataset& batch, Exec exec) {
  return grad(net, batch, nullptr, exec);
}

Vector grad(const FeedforwardNet& net, const Dataset& batch, const ActivationPattern* pattern, Exec exec) {
  require_batch(net, batch);
  const Eigen::Index n = batch.size();
  // Both modes sum the same fixed chunks in chunk order, so they agree bitwise.
  const Eigen::Index chunks = (n + kGradChunk - 1) / kGradChunk;
  std::vector<Vector> partial(static_cast<std::size_t>(chunks));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(chunks));
#pragma omp parallel for schedule(static) if (exec == Exec::Parallel)
  for (Eigen::Index c = 0; c < chunks; ++c) {
    try {
      Eigen::Index begin = c * kGradChunk;
      partial[static_cast<std::size_t>(c)] =
          loss_grad_sum(net, batch, begin, std::min(n, begin + kGradChunk), true, pattern).grad_sum;
    } catch (...) {
      errors[static_cast<std::size_t>(c)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  Vector total = Vector::Zero(net.param_count());
  for (const auto& p : partial) total += p;
  return total / static_cast<double>(n);
}

Evaluation evaluate(const FeedforwardNet& net, const Dataset& data) {
  require_batch(net, data);
  Matrix logits = net.forward(data.features);
  Evaluation e;
  int correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (static_cast<int>(arg) == data.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  e.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  e.loss = loss(net, data);
  return e;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw DomainError("lr must be > 0");
  if (batch_size < 1) throw DomainError("batch_size must be >= 1");
  if (epochs < 0) throw DomainError("epochs must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw DomainError("momentum must be in [0, 1)");
  if (!(lambda_l1 >= 0.0)) throw DomainError("lambda_l1 must be >= 0");
}

TrainResult train_l1(FeedforwardNet net, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  require_batch(net, data);
  const Eigen::Index n = data.size();
  const auto prunable = net.prunable();
  Vector w = net.flatten();
  Vector velocity = Vector::Zero(w.size());
  Vector penalty_mask(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) penalty_mask[i] = prunable[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    int batches = 0;
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      Eigen::Index stop = std::min<Eigen::Index>(n, start + cfg.batch_size);
      std::vector<Eigen::Index> rows(order.begin() + start, order.begin() + stop);
      Dataset batch = data.subset(rows);
      net.unflatten(w);
      ChunkResult lg;
      try {
        lg = loss_grad_sum(net, batch, 0, batch.size(), true);
      } catch (const NumericalError& e) {
        throw DivergenceError(e.what(), result.loss_history);
      }
      const double inv = 1.0 / static_cast<double>(batch.size());
      epoch_loss += lg.loss_sum * inv;
      ++batches;
      Vector g = lg.grad_sum * inv;
      if (cfg.lambda_l1 > 0.0) g += cfg.lambda_l1 * w.cwiseSign().cwiseProduct(penalty_mask);
      velocity = cfg.momentum * velocity + g;
      w -= cfg.lr * velocity;
    }
    double mean = epoch_loss / batches;
    if (!std::isfinite(mean) || !w.allFinite()) {
      result.loss_history.push_back(mean);
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch), result.loss_history);
    }
    result.loss_history.push_back(mean);
  }
  net.unflatten(w);
  result.net = std::move(net);
  return result;
}

Vector hessian_vector_product(const GradientFn& gradient, const Vector& w, const Vector& v) {
  if (v.size() != w.size()) throw DimensionError("hvp direction has wrong length");
  const double vnorm = v.norm();
  if (!std::isfinite(vnorm)) throw NumericalError("hvp direction is not finite");
  if (vnorm == 0.0) return Vector::Zero(w.size());
  const double h = 1e-4 * std::max(1.0, w.norm()) / std::max(1e-12, vnorm);
  Vector out = (gradient(w + h * v) - gradient(w - h * v)) / (2.0 * h);
  if (!out.allFinite()) throw NumericalError("non-finite Hessian-vector product");
  return out;
}

GradientFn net_gradient_fn(const FeedforwardNet& net, const Dataset& batch, Exec exec) {
  auto pattern = std::make_shared<const ActivationPattern>(activation_pattern(net, batch));
  return [net, batch, exec, pattern](const Vector& w) {
    FeedforwardNet probe = net;
    probe.unflatten(w);
    return grad(probe, batch, pattern.get(), exec);
  };
}

Vector hvp(const FeedforwardNet& net, const Dataset& batch, const Vector& v) {
  return hessian_vector_product(net_gradient_fn(net, batch), net.flatten(), v);
}

SymmetricOperator hessian_operator(const FeedforwardNet& net, const Dataset& batch, Exec exec) {
  auto gradient = net_gradient_fn(net, batch, exec);
  Vector w = net.flatten();
  return SymmetricOperator(w.size(), [gradient, w](const Vector& v) { return hessian_vector_product(gradient, w, v); });
}

DenseSymmetric finite_difference_hessian(const GradientFn& gradient, const Vector& w, Exec exec) {
  const Eigen::Index n = w.size();
  if (n > kExactHessianLimit) throw DomainError("exact Hessian limited to D <= " + std::to_string(kExactHessianLimit));
  Matrix m(n, n);
  auto column = [&](Eigen::Index i) {
    Vector e = Vector::Zero(n);
    e[i] = 1.0;
    m.col(i) = hessian_vector_product(gradient, w, e);
  };
  if (exec == Exec::Parallel) {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic, 8)
    for (Eigen::Index i = 0; i < n; ++i) {
      try {
        column(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (Eigen::Index i = 0; i < n; ++i) column(i);
  }
  DenseSymmetric h(m);
  const double scale = m.norm();
  if (h.symmetrization_residual() > 1e-3 * scale)
    throw NumericalError("Hessian asymmetry " + std::to_string(h.symmetrization_residual()) +
                         " exceeds 1e-3 ||M||; gradient is inconsistent");
  return h;
}

DenseSymmetric exact_hessian(const FeedforwardNet& net, const Dataset& batch, Exec exec) {
  return finite_difference_hessian(net_gradient_fn(net, batch, Exec::Serial), net.flatten(), exec);
}

std::vector<double> batch_losses(const FeedforwardNet& net, const Dataset& data, int batch_size) {
  if (batch_size < 1) throw DomainError("batch_size must be >= 1");
  std::vector<double> out;
  for (Eigen::Index start = 0; start < data.size(); start += batch_size)
    out.push_back(loss(net, data.slice(start, std::min<Eigen::Index>(data.size(), start + batch_size))));
  return out;
}

double population_std(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  const double n = static_cast<double>(xs.size());
  double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / n);
}

double epsilon_hat(const FeedforwardNet& net, const Dataset& data, int batch_size) {
  auto losses = batch_losses(net, data, batch_size);
  if (losses.size() < 2) throw DomainError("epsilon_hat needs at least two batches");
  return population_std(losses);
}

Dataset make_blobs(int n, int classes, double separation, std::uint64_t seed, Split split) {
  if (classes < 2) throw DomainError("make_blobs needs at least two classes");
  if (n < classes) throw DomainError("make_blobs needs n >= classes");
  Dataset d;
  d.classes = classes;
  d.split = split;
  d.features.resize(n, classes);
  d.labels.resize(static_cast<std::size_t>(n));
  Rng rng = make_rng(seed, 0);
  std::normal_distribution<double> normal;
  const double offset = separation / std::sqrt(2.0);
  for (int i = 0; i < n; ++i) {
    const int label = i % classes;
    d.labels[static_cast<std::size_t>(i)] = label;
    for (int j = 0; j < classes; ++j) d.features(i, j) = normal(rng) + (j == label ? offset : 0.0);
  }
  return d;
}

Dataset load_csv_dataset(const std::filesystem::path& path, int label_column, int classes, Split split) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  std::string line;
  long line_no = 0;
  std::size_t width = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto fields = csv::split(line);
    if (first) {
      first = false;
      width = fields.size();
      if (label_column < 0) label_column += static_cast<int>(width);
      if (label_column < 0 || static_cast<std::size_t>(label_column) >= width)
        throw ParseError("label column out of range", line_no);
      try {
        csv::parse_double(fields[0], line_no);
      } catch (const ParseError&) {
        continue;  // header row
      }
    }
    if (fields.size() != width)
      throw ParseError("expected " + std::to_string(width) + " fields, got " + std::to_string(fields.size()), line_no);
    std::vector<double> row;
    int label = 0;
    for (std::size_t j = 0; j < fields.size(); ++j) {
      double v = csv::parse_double(fields[j], line_no);
      if (static_cast<int>(j) == label_column) {
        if (v != std::floor(v) || v < 0) throw ParseError("label must be a non-negative integer", line_no);
        label = static_cast<int>(v);
      } else {
        row.push_back(v);
      }
    }
    if (classes > 0 && label >= classes)
      throw ParseError("label " + std::to_string(label) + " out of range", line_no);
    feats.push_back(std::move(row));
    labels.push_back(label);
  }
  if (feats.empty()) throw ParseError("dataset " + path.string() + " has no rows");
  Dataset d;
  d.split = split;
  d.classes = classes > 0 ? classes : *std::max_element(labels.begin(), labels.end()) + 1;
  d.features.resize(static_cast<Eigen::Index>(feats.size()), static_cast<Eigen::Index>(width - 1));
  for (std::size_t i = 0; i < feats.size(); ++i)
    for (std::size_t j = 0; j + 1 < width; ++j)
      d.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = feats[i][j];
  d.labels = std::move(labels);
  return d;
}

namespace {

std::uint64_t to_little_endian(std::uint64_t x) {
  if constexpr (std::endian::native == std::endian::little) return x;
  std::uint64_t y = 0;
  for (int i = 0; i < 8; ++i) y |= ((x >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return y;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const FeedforwardNet& net, std::uint64_t seed) {
  nlohmann::ordered_json header;
  header["version"] = 1;
  header["widths"] = net.widths();
  header["activation"] = "relu";
  header["seed"] = seed;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << header.dump() << '\n';
  Vector flat = net.flatten();
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    std::uint64_t bits = to_little_endian(std::bit_cast<std::uint64_t>(flat[i]));
    out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
  if (!out) throw Error("write failed for " + path.string());
}

FeedforwardNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::string header_line;
  if (!std::getline(in, header_line)) throw ParseError("missing checkpoint header", 1);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad checkpoint header: ") + e.what(), 1);
  }
  if (header.value("version", 0) != 1) throw ParseError("unsupported checkpoint version", 1);
  if (header.value("activation", std::string()) != "relu") throw ParseError("unsupported activation", 1);
  FeedforwardNet net(header.at("widths").get<std::vector<int>>());
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto expected = static_cast<std::size_t>(net.param_count()) * 8;
  if (payload.size() != expected)
    throw ParseError("checkpoint payload has " + std::to_string(payload.size()) + " bytes, expected " +
                     std::to_string(expected));
  Vector flat(net.param_count());
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, payload.data() + 8 * i, 8);
    flat[i] = std::bit_cast<double>(to_little_endian(bits));
  }
  net.unflatten(flat);
  return net;
}

}  // namespace prunability
