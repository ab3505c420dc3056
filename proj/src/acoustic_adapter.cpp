#include "emofuse/acoustic_adapter.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "emofuse/errors.hpp"
#include "emofuse/metrics.hpp"

namespace emofuse {

namespace {

Tensor2 uniform_tensor(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  Tensor2 t(rows, cols);
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

std::vector<double> affine(std::span<const double> x, const Tensor2& w, const Tensor2& b) {
  if (x.size() != w.rows() || b.cols() != w.cols()) {
    throw DimensionError("affine: input of length " + std::to_string(x.size()) +
                         " against weight " + w.shape_string() + " and bias " + b.shape_string());
  }
  std::vector<double> y(b.values().begin(), b.values().end());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const auto wrow = w.row(i);
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += xi * wrow[j];
  }
  return y;
}

Tensor2 affine(const Tensor2& x, const Tensor2& w, const Tensor2& b) {
  Tensor2 y = matmul(x, w);
  add_row_bias(y, b);
  return y;
}

void check_stack(const Tensor2& stack, const AdapterDims& dims, const std::string& id) {
  if (stack.rows() != dims.layers || stack.cols() != dims.feature_dim) {
    throw DimensionError("acoustic stack " + stack.shape_string() + (id.empty() ? "" : " of '" + id + "'") +
                         " does not match model layers x feature_dim (" +
                         std::to_string(dims.layers) + "x" + std::to_string(dims.feature_dim) + ")");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// AdapterModel

std::string AdapterModel::layer_param(std::size_t i, const char* field) {
  return "adapter." + std::to_string(i) + "." + field;
}

AdapterModel::AdapterModel(AdapterDims dims, double mask_ratio) : dims_(dims), mask_ratio_(0.0) {
  if (dims.layers == 0) throw DimensionError("adapter model needs at least one layer");
  if (dims.bottleneck == 0 || dims.bottleneck >= dims.feature_dim) {
    throw DimensionError("adapter bottleneck " + std::to_string(dims.bottleneck) +
                         " must be in 1..feature_dim-1 (feature_dim " +
                         std::to_string(dims.feature_dim) + ")");
  }
  if (dims.num_classes != kNumEmotions) {
    throw DimensionError("adapter classifier width must be " + std::to_string(kNumEmotions));
  }
  set_mask_ratio(mask_ratio);
  const std::size_t d = dims.feature_dim;
  const std::size_t b = dims.bottleneck;
  for (std::size_t i = 0; i < dims.layers; ++i) {
    params_.add(layer_param(i, "w_down"), Tensor2(d, b));
    params_.add(layer_param(i, "b_down"), Tensor2(1, b));
    params_.add(layer_param(i, "w_up"), Tensor2(b, d));
    params_.add(layer_param(i, "b_up"), Tensor2(1, d));
  }
  params_.add("layer_weights", Tensor2(1, dims.layers));
  params_.add("recon.w1", Tensor2(d, d));
  params_.add("recon.b1", Tensor2(1, d));
  params_.add("recon.w2", Tensor2(d, d));
  params_.add("recon.b2", Tensor2(1, d));
  params_.add("classifier.w", Tensor2(d, dims.num_classes));
  params_.add("classifier.b", Tensor2(1, dims.num_classes));
}

AdapterModel AdapterModel::initialized(AdapterDims dims, std::size_t best_layer,
                                       double mask_ratio, Rng& rng) {
  AdapterModel model(dims, mask_ratio);
  if (best_layer >= dims.layers) {
    throw ArgumentError("best layer position " + std::to_string(best_layer) +
                        " outside the " + std::to_string(dims.layers) + "-layer stack");
  }
  const std::size_t d = dims.feature_dim;
  const std::size_t b = dims.bottleneck;
  const double bound_d = 1.0 / std::sqrt(static_cast<double>(d));
  ParamSet& p = model.params_;
  for (std::size_t i = 0; i < dims.layers; ++i) {
    p.param(layer_param(i, "w_down")) = uniform_tensor(d, b, bound_d, rng);
    p.param(layer_param(i, "w_up")) = uniform_tensor(b, d, bound_d, rng);
  }
  p.param("layer_weights")[best_layer] = 1.0;
  p.param("recon.w1") = uniform_tensor(d, d, bound_d, rng);
  p.param("recon.w2") = uniform_tensor(d, d, bound_d, rng);
  p.param("classifier.w") = uniform_tensor(d, dims.num_classes, bound_d, rng);
  return model;
}

void AdapterModel::set_mask_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ArgumentError("mask ratio must be in [0, 1), got " + std::to_string(ratio));
  }
  mask_ratio_ = ratio;
}

AdapterLayerParams AdapterModel::layer(std::size_t i) const {
  if (i >= dims_.layers) throw ArgumentError("adapter layer index out of range");
  return {params_.param(layer_param(i, "w_down")), params_.param(layer_param(i, "b_down")),
          params_.param(layer_param(i, "w_up")), params_.param(layer_param(i, "b_up"))};
}

// ---------------------------------------------------------------------------
// Forward pieces

std::vector<double> adapter_forward(std::span<const double> x, const AdapterLayerParams& p) {
  if (x.size() != p.w_down.rows() || p.w_up.cols() != x.size() ||
      p.w_down.cols() != p.w_up.rows()) {
    throw DimensionError("adapter_forward: input length " + std::to_string(x.size()) +
                         " vs w_down " + p.w_down.shape_string() + " and w_up " +
                         p.w_up.shape_string());
  }
  const auto hidden = relu(affine(x, p.w_down, p.b_down));
  const auto branch = affine(hidden, p.w_up, p.b_up);
  std::vector<double> y(x.begin(), x.end());
  for (std::size_t j = 0; j < y.size(); ++j) y[j] += branch[j] > 0.0 ? branch[j] : 0.0;
  return y;
}

std::vector<double> layer_fuse(const Tensor2& stack, std::span<const double> weights) {
  if (weights.size() != stack.rows()) {
    throw DimensionError("layer_fuse: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(stack.rows()) + " layers");
  }
  std::vector<double> fused(stack.cols(), 0.0);
  for (std::size_t i = 0; i < stack.rows(); ++i) {
    const auto row = stack.row(i);
    for (std::size_t j = 0; j < fused.size(); ++j) fused[j] += weights[i] * row[j];
  }
  return fused;
}

MaskResult mask_features(std::span<const double> features, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ArgumentError("mask ratio must be in [0, 1), got " + std::to_string(ratio));
  }
  const std::size_t d = features.size();
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(d)));
  std::vector<std::size_t> pool(d);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  // Partial Fisher-Yates: the first `count` slots are a uniform draw without replacement.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.uniform_index(d - i);
    std::swap(pool[i], pool[j]);
  }
  MaskResult out;
  out.masked.assign(features.begin(), features.end());
  out.indices.assign(pool.begin(), pool.begin() + count);
  std::sort(out.indices.begin(), out.indices.end());
  for (std::size_t idx : out.indices) out.masked[idx] = 0.0;
  return out;
}

std::vector<double> recon_forward(std::span<const double> masked, const AdapterModel& model) {
  const ParamSet& p = model.params();
  const auto hidden = relu(affine(masked, p.param("recon.w1"), p.param("recon.b1")));
  return affine(hidden, p.param("recon.w2"), p.param("recon.b2"));
}

std::vector<double> extract_acoustic(const Tensor2& stack, const AdapterModel& model) {
  check_stack(stack, model.dims(), "");
  Tensor2 adapted(stack.rows(), stack.cols());
  for (std::size_t i = 0; i < stack.rows(); ++i) {
    const auto y = adapter_forward(stack.row(i), model.layer(i));
    std::copy(y.begin(), y.end(), adapted.row(i).begin());
  }
  return layer_fuse(adapted, model.layer_weights());
}

std::vector<double> adapter_logits(const Tensor2& stack, const AdapterModel& model) {
  const auto fused = extract_acoustic(stack, model);
  const auto recon = recon_forward(fused, model);
  const ParamSet& p = model.params();
  return affine(recon, p.param("classifier.w"), p.param("classifier.b"));
}

// ---------------------------------------------------------------------------
// Joint objective with closed-form gradients

AdapterLoss adapter_loss(SampleBatch batch, AdapterModel& model, Rng& rng,
                         const AdapterLossOptions& options) {
  if (batch.empty()) throw ArgumentError("adapter_loss: empty batch");
  const AdapterDims& dims = model.dims();
  const std::size_t n = batch.size();
  const std::size_t d = dims.feature_dim;
  const std::size_t k = dims.layers;
  for (const Sample* s : batch) {
    if (!s->label) throw DataError("sample '" + s->id + "' has no label");
    check_stack(s->acoustic, dims, s->id);
  }

  ParamSet& p = model.params();
  p.zero_grad();
  const auto w = model.layer_weights();

  // Per-layer adapter forward, batched over samples.
  struct LayerCache {
    Tensor2 input, pre_down, hidden, pre_up, output;
  };
  std::vector<LayerCache> layers(k);
  Tensor2 fused(n, d);
  for (std::size_t i = 0; i < k; ++i) {
    LayerCache& c = layers[i];
    c.input = Tensor2(n, d);
    for (std::size_t b = 0; b < n; ++b) {
      const auto src = batch[b]->acoustic.row(i);
      std::copy(src.begin(), src.end(), c.input.row(b).begin());
    }
    const AdapterLayerParams lp = model.layer(i);
    c.pre_down = affine(c.input, lp.w_down, lp.b_down);
    c.hidden = relu(c.pre_down);
    c.pre_up = affine(c.hidden, lp.w_up, lp.b_up);
    c.output = c.input;
    axpy(1.0, relu(c.pre_up), c.output);
    axpy(w[i], c.output, fused);
  }

  Tensor2 mask(n, d, 1.0);
  Tensor2 masked = fused;
  for (std::size_t b = 0; b < n; ++b) {
    const MaskResult m = mask_features(fused.row(b), model.mask_ratio(), rng);
    for (std::size_t idx : m.indices) {
      mask(b, idx) = 0.0;
      masked(b, idx) = 0.0;
    }
  }

  const Tensor2 r1 = affine(masked, p.param("recon.w1"), p.param("recon.b1"));
  const Tensor2 q = relu(r1);
  const Tensor2 recon = affine(q, p.param("recon.w2"), p.param("recon.b2"));
  const Tensor2 logits = affine(recon, p.param("classifier.w"), p.param("classifier.b"));

  const double inv_n = 1.0 / static_cast<double>(n);
  AdapterLoss loss;
  Tensor2 d_logits(n, dims.num_classes);
  Tensor2 d_recon(n, d);
  for (std::size_t b = 0; b < n; ++b) {
    const LossGrad ce = cross_entropy(logits.row(b), emotion_index(*batch[b]->label));
    const LossGrad mlm = mse(recon.row(b), fused.row(b));
    loss.ce += ce.loss * inv_n;
    loss.mlm += mlm.loss * inv_n;
    for (std::size_t c = 0; c < ce.grad.size(); ++c) d_logits(b, c) = ce.grad[c] * inv_n;
    for (std::size_t j = 0; j < d; ++j) d_recon(b, j) = mlm.grad[j] * inv_n;
  }
  loss.total = loss.ce + loss.mlm;

  // d_recon currently holds ∂L_mlm/∂recon; the target path gets its negation.
  Tensor2 d_fused(n, d);
  if (!options.stop_grad_target) axpy(-1.0, d_recon, d_fused);

  p.grad("classifier.w") = matmul_tn(recon, d_logits);
  p.grad("classifier.b") = column_sums(d_logits);
  axpy(1.0, matmul_nt(d_logits, p.param("classifier.w")), d_recon);

  p.grad("recon.w2") = matmul_tn(q, d_recon);
  p.grad("recon.b2") = column_sums(d_recon);
  Tensor2 d_r1 = matmul_nt(d_recon, p.param("recon.w2"));
  hadamard_inplace(d_r1, relu_mask(r1));
  p.grad("recon.w1") = matmul_tn(masked, d_r1);
  p.grad("recon.b1") = column_sums(d_r1);
  Tensor2 d_masked = matmul_nt(d_r1, p.param("recon.w1"));
  hadamard_inplace(d_masked, mask);
  axpy(1.0, d_masked, d_fused);

  Tensor2& d_w = p.grad("layer_weights");
  for (std::size_t i = 0; i < k; ++i) {
    const LayerCache& c = layers[i];
    double dw = 0.0;
    for (std::size_t idx = 0; idx < d_fused.size(); ++idx) dw += d_fused[idx] * c.output[idx];
    d_w[i] = dw;

    Tensor2 d_pre_up = d_fused;
    for (auto& v : d_pre_up.values()) v *= w[i];
    hadamard_inplace(d_pre_up, relu_mask(c.pre_up));
    p.grad(AdapterModel::layer_param(i, "w_up")) = matmul_tn(c.hidden, d_pre_up);
    p.grad(AdapterModel::layer_param(i, "b_up")) = column_sums(d_pre_up);
    Tensor2 d_pre_down = matmul_nt(d_pre_up, p.param(AdapterModel::layer_param(i, "w_up")));
    hadamard_inplace(d_pre_down, relu_mask(c.pre_down));
    p.grad(AdapterModel::layer_param(i, "w_down")) = matmul_tn(c.input, d_pre_down);
    p.grad(AdapterModel::layer_param(i, "b_down")) = column_sums(d_pre_down);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training

namespace {

double adapter_validation_f1(SampleBatch validation, const AdapterModel& model) {
  std::vector<std::size_t> preds, labels;
  preds.reserve(validation.size());
  labels.reserve(validation.size());
  for (const Sample* s : validation) {
    if (!s->label) throw DataError("validation sample '" + s->id + "' has no label");
    const auto logits = adapter_logits(s->acoustic, model);
    preds.push_back(static_cast<std::size_t>(
        std::max_element(logits.begin(), logits.end()) - logits.begin()));
    labels.push_back(emotion_index(*s->label));
  }
  return weighted_f1(preds, labels);
}

}  // namespace

AdapterTrainResult train_adapter_stage(SampleBatch train, SampleBatch validation,
                                       const AdapterTrainConfig& config) {
  if (train.empty()) throw ConfigError("adapter stage: empty training set");
  if (config.batch_size == 0) throw ConfigError("adapter stage: batch size must be positive");

  Rng init_rng(derive_seed(config.seed, 1));
  Rng order_rng(derive_seed(config.seed, 2));
  Rng mask_rng(derive_seed(config.seed, 3));

  AdapterModel model =
      AdapterModel::initialized(config.dims, config.best_layer, config.mask_ratio, init_rng);
  AdamState adam(config.adam);
  const AdapterLossOptions loss_options{config.stop_grad_target};

  AdapterTrainResult result{model, {}, 0};
  double best_f1 = -1.0;
  std::size_t since_best = 0;

  std::vector<const Sample*> order(train.begin(), train.end());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(std::span<const Sample*>(order));
    AdapterEpochLog entry;
    entry.epoch = epoch;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      const SampleBatch batch(order.data() + start, len);
      const AdapterLoss l = adapter_loss(batch, model, mask_rng, loss_options);
      if (!std::isfinite(l.total)) {
        throw NumericError("adapter stage: non-finite loss at epoch " + std::to_string(epoch));
      }
      entry.ce += l.ce * static_cast<double>(len);
      entry.mlm += l.mlm * static_cast<double>(len);
      seen += len;
      adam_step(model.params(), adam);
    }
    entry.ce /= static_cast<double>(seen);
    entry.mlm /= static_cast<double>(seen);
    entry.total = entry.ce + entry.mlm;
    const auto lw = model.layer_weights();
    entry.layer_weights.assign(lw.begin(), lw.end());

    if (validation.empty()) {
      entry.val_wf1 = 0.0;
      result.model = model;
      result.best_epoch = epoch;
    } else {
      entry.val_wf1 = adapter_validation_f1(validation, model);
      if (entry.val_wf1 > best_f1) {
        best_f1 = entry.val_wf1;
        result.model = model;
        result.best_epoch = epoch;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    result.log.push_back(std::move(entry));
    if (config.patience > 0 && !validation.empty() && since_best >= config.patience) break;
  }
  if (config.epochs == 0) result.model = model;
  return result;
}

std::string format_adapter_log(const std::vector<AdapterEpochLog>& log) {
  std::ostringstream out;
  out << "epoch\tL_ce\tL_mlm\tL\tval_wF1";
  const std::size_t k = log.empty() ? 0 : log.front().layer_weights.size();
  for (std::size_t i = 0; i < k; ++i) out << "\tw_" << (i + 1);
  out << '\n';
  char buf[64];
  for (const auto& e : log) {
    out << e.epoch;
    for (double v : {e.ce, e.mlm, e.total, e.val_wf1}) {
      std::snprintf(buf, sizeof(buf), "\t%.6f", v);
      out << buf;
    }
    for (double v : e.layer_weights) {
      std::snprintf(buf, sizeof(buf), "\t%.6f", v);
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace emofuse
