#include "emofuse/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "emofuse/errors.hpp"
#include "emofuse/rng.hpp"

namespace emofuse {

Tensor2::Tensor2(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor2::Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
  }
}

Tensor2 Tensor2::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged row in Tensor2::from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor2(r, c, std::move(data));
}

Tensor2 Tensor2::row_vector(std::span<const double> values) {
  return Tensor2(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Tensor2 Tensor2::identity(std::size_t n) {
  Tensor2 t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::string Tensor2::shape_string() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

bool Tensor2::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor2::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

bool bitwise_equal(const Tensor2& a, const Tensor2& b) {
  return a.same_shape(b) && bitwise_equal(a.values(), b.values());
}

namespace {

void require_shape(bool ok, const char* op, const Tensor2& a, const Tensor2& b) {
  if (!ok) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                         b.shape_string());
  }
}

}  // namespace

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  require_shape(a.cols() == b.rows(), "matmul", a, b);
  Tensor2 c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b) {
  require_shape(a.rows() == b.rows(), "matmul_tn", a, b);
  Tensor2 c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* brow = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      double* out = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) out[j] += aki * brow[j];
    }
  }
  return c;
}

Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b) {
  require_shape(a.cols() == b.cols(), "matmul_nt", a, b);
  Tensor2 c(a.rows(), b.rows());
  const std::size_t inner = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j).data();
      double acc = 0.0;
      for (std::size_t k = 0; k < inner; ++k) acc += arow[k] * brow[k];
      c(i, j) = acc;
    }
  }
  return c;
}

Tensor2 transpose(const Tensor2& a) {
  Tensor2 t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

void add_row_bias(Tensor2& x, const Tensor2& bias) {
  require_shape(bias.rows() == 1 && bias.cols() == x.cols(), "add_row_bias", x, bias);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = x.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
  }
}

Tensor2 column_sums(const Tensor2& x) {
  Tensor2 s(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) s[j] += row[j];
  }
  return s;
}

void axpy(double alpha, const Tensor2& x, Tensor2& y) {
  require_shape(x.same_shape(y), "axpy", x, y);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Tensor2 relu(const Tensor2& x) {
  Tensor2 y = x;
  for (auto& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor2 relu_mask(const Tensor2& x) {
  Tensor2 m(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) m[i] = x[i] > 0.0 ? 1.0 : 0.0;
  return m;
}

void hadamard_inplace(Tensor2& x, const Tensor2& mask) {
  require_shape(x.same_shape(mask), "hadamard", x, mask);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] *= mask[i];
}

std::vector<double> relu(std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  for (auto& v : y) v = v > 0.0 ? v : 0.0;
  return y;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ArgumentError("softmax of an empty vector");
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - peak);
    total += p[i];
  }
  for (auto& v : p) v /= total;
  return p;
}

LossGrad cross_entropy(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) {
    throw ArgumentError("cross_entropy target " + std::to_string(target) + " out of range for " +
                        std::to_string(logits.size()) + " classes");
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) total += std::exp(v - peak);
  const double log_norm = peak + std::log(total);

  LossGrad out;
  out.loss = log_norm - logits[target];
  out.grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out.grad[i] = std::exp(logits[i] - log_norm);
  out.grad[target] -= 1.0;
  return out;
}

LossGrad mse(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("mse: length mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  LossGrad out;
  out.grad.resize(a.size());
  if (a.empty()) return out;
  const double d = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    out.loss += diff * diff;
    out.grad[i] = 2.0 * diff / d;
  }
  out.loss /= d;
  return out;
}

// ---------------------------------------------------------------------------
// ParamSet

Tensor2& ParamSet::add(const std::string& name, Tensor2 init) {
  if (contains(name)) throw ArgumentError("duplicate parameter name '" + name + "'");
  Entry e;
  e.grad = Tensor2(init.rows(), init.cols());
  e.value = std::move(init);
  return entries_.emplace(name, std::move(e)).first->second.value;
}

const ParamSet::Entry& ParamSet::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return it->second;
}

ParamSet::Entry& ParamSet::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ArgumentError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor2& ParamSet::param(const std::string& name) { return entry(name).value; }
const Tensor2& ParamSet::param(const std::string& name) const { return entry(name).value; }
Tensor2& ParamSet::grad(const std::string& name) { return entry(name).grad; }
const Tensor2& ParamSet::grad(const std::string& name) const { return entry(name).grad; }

void ParamSet::set_frozen(const std::string& name, bool frozen) { entry(name).frozen = frozen; }
bool ParamSet::frozen(const std::string& name) const { return entry(name).frozen; }

void ParamSet::zero_grad() {
  for (auto& [name, e] : entries_) e.grad.fill(0.0);
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += e.value.size();
  return n;
}

bool ParamSet::parameters_bitwise_equal(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (const auto& [name, e] : entries_) {
    auto it = other.entries_.find(name);
    if (it == other.entries_.end() || !bitwise_equal(e.value, it->second.value)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(ParamSet& params, AdamState& state) {
  const auto names = params.names();
  for (const auto& name : names) {
    if (params.frozen(name)) continue;
    if (!params.grad(name).all_finite()) {
      throw NumericError("non-finite gradient in parameter '" + name + "'; step rejected");
    }
  }

  const AdamConfig& cfg = state.config_;
  state.step_ += 1;
  const double t = static_cast<double>(state.step_);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);

  for (const auto& name : names) {
    if (params.frozen(name)) continue;
    Tensor2& theta = params.param(name);
    const Tensor2& g = params.grad(name);
    auto [mit, m_new] = state.first_.try_emplace(name, theta.rows(), theta.cols());
    auto [vit, v_new] = state.second_.try_emplace(name, theta.rows(), theta.cols());
    Tensor2& m = mit->second;
    Tensor2& v = vit->second;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double gi = g[i];
      if (cfg.coupled_weight_decay) gi += cfg.weight_decay * theta[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      theta[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
      if (!cfg.coupled_weight_decay) theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checker

GradCheckReport finite_diff_check(const LossFn& loss_fn, ParamSet& params,
                                  const GradCheckOptions& options) {
  params.zero_grad();
  const double base = loss_fn(params);
  std::map<std::string, Tensor2> analytic;
  for (const auto& name : params.names()) analytic.emplace(name, params.grad(name));

  params.zero_grad();
  const double again = loss_fn(params);
  if (!bitwise_equal(std::span<const double>(&base, 1), std::span<const double>(&again, 1))) {
    throw OracleError("loss function is not deterministic: " + std::to_string(base) + " vs " +
                      std::to_string(again));
  }

  Rng rng(options.seed);
  GradCheckReport report;
  const double h = options.step;
  for (const auto& name : params.names()) {
    if (params.frozen(name)) continue;
    Tensor2& theta = params.param(name);
    std::vector<std::size_t> coords(theta.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (theta.size() > options.subsample_threshold) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(std::min(coords.size(), options.subsample_count));
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      const double saved = theta[idx];
      theta[idx] = saved + h;
      const double plus = loss_fn(params);
      theta[idx] = saved - h;
      const double minus = loss_fn(params);
      theta[idx] = saved;

      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic.at(name)[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      report.coordinates_checked += 1;
      if (report.coordinates_checked == 1 || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = name;
        report.worst_index = idx;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }

  // Leave the set holding the analytic gradients at the unperturbed point.
  for (const auto& name : params.names()) params.grad(name) = analytic.at(name);
  return report;
}

}  // namespace emofuse
