#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "emofuse/numcore.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/sample.hpp"

namespace emofuse {

struct AdapterDims {
  std::size_t layers = 6;
  std::size_t feature_dim = 0;
  std::size_t bottleneck = 0;
  std::size_t num_classes = kNumEmotions;
};

/// Borrowed view of one layer's bottleneck adapter.
/// Weights are stored input-major: w_down is d_a×d̂ and w_up is d̂×d_a, applied as x·W.
struct AdapterLayerParams {
  const Tensor2& w_down;
  const Tensor2& b_down;
  const Tensor2& w_up;
  const Tensor2& b_up;
};

/// Stage-1 model: k residual bottleneck adapters, learnable layer weights, the masked
/// reconstruction MLP (d_a→d_a→d_a) and a d_a→6 classifier.
///
/// Parameter names: adapter.<i>.{w_down,b_down,w_up,b_up}, layer_weights (1×k),
/// recon.{w1,b1,w2,b2}, classifier.{w,b}.
class AdapterModel {
 public:
  /// Zero-initialized model. Throws DimensionError unless 0 < bottleneck < feature_dim.
  explicit AdapterModel(AdapterDims dims, double mask_ratio = 0.15);

  /// Adapter, reconstruction and classifier weights ~ U(−1/√fan_in, 1/√fan_in), biases zero,
  /// layer weights one-hot at `best_layer`.
  static AdapterModel initialized(AdapterDims dims, std::size_t best_layer, double mask_ratio,
                                  Rng& rng);

  const AdapterDims& dims() const noexcept { return dims_; }
  double mask_ratio() const noexcept { return mask_ratio_; }
  void set_mask_ratio(double ratio);

  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  AdapterLayerParams layer(std::size_t i) const;
  std::span<const double> layer_weights() const { return params_.param("layer_weights").values(); }

  static std::string layer_param(std::size_t i, const char* field);

 private:
  AdapterDims dims_;
  double mask_ratio_;
  ParamSet params_;
};

/// y = x + ReLU(ReLU(x·W_down + b_down)·W_up + b_up).
std::vector<double> adapter_forward(std::span<const double> x, const AdapterLayerParams& p);

/// Σ_i w_i·stack_i over the rows of a k×d_a stack.
std::vector<double> layer_fuse(const Tensor2& stack, std::span<const double> weights);

struct MaskResult {
  std::vector<double> masked;
  std::vector<std::size_t> indices;  // ascending
};

/// Zeroes exactly round(ratio·d) coordinates drawn uniformly without replacement.
MaskResult mask_features(std::span<const double> features, double ratio, Rng& rng);

std::vector<double> recon_forward(std::span<const double> masked, const AdapterModel& model);

struct AdapterLossOptions {
  // The fused target is a constant when true.
  bool stop_grad_target = true;
};

struct AdapterLoss {
  double ce = 0.0;
  double mlm = 0.0;
  double total = 0.0;
};

/// Batch-mean joint objective L = L_ce + L_mlm. Overwrites the model's gradients.
/// Masks are drawn from `rng` sample by sample in batch order.
AdapterLoss adapter_loss(SampleBatch batch, AdapterModel& model, Rng& rng,
                         const AdapterLossOptions& options = {});

/// Adapters followed by layer fusion; no masking, no classifier.
std::vector<double> extract_acoustic(const Tensor2& stack, const AdapterModel& model);

/// Classifier logits on the unmasked fused feature (evaluation path).
std::vector<double> adapter_logits(const Tensor2& stack, const AdapterModel& model);

struct AdapterTrainConfig {
  AdapterDims dims;
  std::size_t best_layer = 2;
  double mask_ratio = 0.15;
  bool stop_grad_target = true;
  AdamConfig adam{};
  std::size_t batch_size = 16;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
};

struct AdapterEpochLog {
  std::size_t epoch = 0;
  double ce = 0.0;
  double mlm = 0.0;
  double total = 0.0;
  double val_wf1 = 0.0;
  std::vector<double> layer_weights;
};

struct AdapterTrainResult {
  AdapterModel model;
  std::vector<AdapterEpochLog> log;
  std::size_t best_epoch = 0;
};

/// Minibatch Adam on the joint objective. Returns the epoch with the best validation
/// weighted F1 (ties keep the earlier epoch); with an empty validation set the last epoch wins.
AdapterTrainResult train_adapter_stage(SampleBatch train, SampleBatch validation,
                                       const AdapterTrainConfig& config);

/// TSV rows: epoch, L_ce, L_mlm, L, val_wF1, w_1..w_k.
std::string format_adapter_log(const std::vector<AdapterEpochLog>& log);

}  // namespace emofuse
