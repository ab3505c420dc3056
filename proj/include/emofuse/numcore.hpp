#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace emofuse {

/// Dense row-major float64 matrix. Feature vectors are 1×d.
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor2 from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor2 row_vector(std::span<const double> values);
  static Tensor2 row_vector(std::initializer_list<double> values) {
    return row_vector(std::span<const double>(values.begin(), values.size()));
  }
  static Tensor2 identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::string shape_string() const;
  bool same_shape(const Tensor2& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool all_finite() const noexcept;
  void fill(double value);

  friend bool operator==(const Tensor2&, const Tensor2&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Byte-level equality (distinguishes -0.0 from 0.0 and compares NaN payloads).
bool bitwise_equal(const Tensor2& a, const Tensor2& b);
bool bitwise_equal(std::span<const double> a, std::span<const double> b);

Tensor2 matmul(const Tensor2& a, const Tensor2& b);
/// aᵀ·b without materializing the transpose.
Tensor2 matmul_tn(const Tensor2& a, const Tensor2& b);
/// a·bᵀ without materializing the transpose.
Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b);
Tensor2 transpose(const Tensor2& a);

void add_row_bias(Tensor2& x, const Tensor2& bias);
/// Column sums as a 1×cols tensor (bias gradients).
Tensor2 column_sums(const Tensor2& x);
void axpy(double alpha, const Tensor2& x, Tensor2& y);

Tensor2 relu(const Tensor2& x);
/// 1 where x > 0, else 0 (subgradient at 0 is 0).
Tensor2 relu_mask(const Tensor2& x);
void hadamard_inplace(Tensor2& x, const Tensor2& mask);
std::vector<double> relu(std::span<const double> x);

std::vector<double> softmax(std::span<const double> logits);

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// −log softmax(logits)[target]; grad = softmax(logits) − onehot(target).
LossGrad cross_entropy(std::span<const double> logits, std::size_t target);

/// (1/d)Σ(a−b)²; grad is with respect to `a` (the gradient for `b` is its negation).
LossGrad mse(std::span<const double> a, std::span<const double> b);

/// Named parameter tensors with parallel gradient storage.
class ParamSet {
 public:
  Tensor2& add(const std::string& name, Tensor2 init);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor2& param(const std::string& name);
  const Tensor2& param(const std::string& name) const;
  Tensor2& grad(const std::string& name);
  const Tensor2& grad(const std::string& name) const;

  /// Frozen tensors are skipped by the optimizer and the gradient checker.
  void set_frozen(const std::string& name, bool frozen);
  bool frozen(const std::string& name) const;

  void zero_grad();
  std::vector<std::string> names() const;
  std::size_t parameter_count() const;

  /// True if every parameter tensor is bitwise identical (gradients ignored).
  bool parameters_bitwise_equal(const ParamSet& other) const;

 private:
  struct Entry {
    Tensor2 value;
    Tensor2 grad;
    bool frozen = false;
  };
  const Entry& entry(const std::string& name) const;
  Entry& entry(const std::string& name);

  std::map<std::string, Entry> entries_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.02;
  // false: AdamW-style decay applied after the moment update.
  bool coupled_weight_decay = false;
};

class AdamState {
 public:
  explicit AdamState(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const noexcept { return config_; }
  AdamConfig& config() noexcept { return config_; }
  std::uint64_t step_count() const noexcept { return step_; }
  const Tensor2& first_moment(const std::string& name) const { return first_.at(name); }
  const Tensor2& second_moment(const std::string& name) const { return second_.at(name); }

  friend void adam_step(ParamSet& params, AdamState& state);

 private:
  AdamConfig config_;
  std::map<std::string, Tensor2> first_;
  std::map<std::string, Tensor2> second_;
  std::uint64_t step_ = 0;
};

/// One bias-corrected Adam update over every non-frozen parameter.
/// Throws NumericError (and leaves everything untouched) if any gradient is non-finite.
void adam_step(ParamSet& params, AdamState& state);

/// Computes the loss at the current parameters and writes analytic gradients into the set.
using LossFn = std::function<double(ParamSet&)>;

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t subsample_threshold = 256;
  std::size_t subsample_count = 64;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

/// Central-difference oracle against the analytic gradients produced by `loss_fn`.
/// Relative error per coordinate is |a − n| / max(|a|, |n|, 1e−8). Tensors larger
/// than `subsample_threshold` entries are checked on `subsample_count` random coordinates.
GradCheckReport finite_diff_check(const LossFn& loss_fn, ParamSet& params,
                                  const GradCheckOptions& options = {});

}  // namespace emofuse
