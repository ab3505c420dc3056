#include "emofuse/fusion_classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "emofuse/errors.hpp"
#include "emofuse/metrics.hpp"

namespace emofuse {

char modality_tag(Modality m) {
  switch (m) {
    case Modality::acoustic:
      return 'a';
    case Modality::lexical:
      return 'l';
    case Modality::visual:
      return 'v';
  }
  throw ArgumentError("unknown modality");
}

Modality modality_from_tag(char tag) {
  switch (tag) {
    case 'a':
      return Modality::acoustic;
    case 'l':
      return Modality::lexical;
    case 'v':
      return Modality::visual;
    default:
      throw ArgumentError(std::string("unknown modality tag '") + tag + "' (expected a, l or v)");
  }
}

ModalitySet ModalitySet::parse(std::string_view tags) {
  ModalitySet set;
  for (char c : tags) set.insert(modality_from_tag(c));
  if (set.empty()) throw ArgumentError("modality subset must not be empty");
  return set;
}

std::string ModalitySet::to_string() const {
  std::string out;
  for (Modality m : kAllModalities)
    if (contains(m)) out += modality_tag(m);
  return out;
}

std::string_view missing_policy_name(MissingPolicy policy) {
  switch (policy) {
    case MissingPolicy::restrict_attention:
      return "restrict";
    case MissingPolicy::impute_zero:
      return "impute-zero";
    case MissingPolicy::strict:
      return "strict";
  }
  return "restrict";
}

MissingPolicy missing_policy_from_name(std::string_view name) {
  if (name == "restrict") return MissingPolicy::restrict_attention;
  if (name == "impute-zero") return MissingPolicy::impute_zero;
  if (name == "strict") return MissingPolicy::strict;
  throw ArgumentError("unknown missing-modality policy '" + std::string(name) + "'");
}

std::size_t FusionDims::input_dim(Modality m) const {
  switch (m) {
    case Modality::acoustic:
      return acoustic_dim;
    case Modality::lexical:
      return lexical_dim;
    case Modality::visual:
      return visual_dim;
  }
  throw ArgumentError("unknown modality");
}

const std::optional<std::vector<double>>& ModalityEmbeddings::get(Modality m) const {
  switch (m) {
    case Modality::acoustic:
      return acoustic;
    case Modality::lexical:
      return lexical;
    case Modality::visual:
      return visual;
  }
  throw ArgumentError("unknown modality");
}

std::optional<std::vector<double>>& ModalityEmbeddings::get(Modality m) {
  return const_cast<std::optional<std::vector<double>>&>(std::as_const(*this).get(m));
}

// ---------------------------------------------------------------------------
// FusionModel

std::string FusionModel::projection_param(Modality m, const char* field) {
  return std::string("proj.") + modality_tag(m) + "." + field;
}

FusionModel::FusionModel(FusionDims dims, ModalitySet modalities, MissingPolicy policy)
    : dims_(dims), modalities_(modalities), policy_(policy) {
  if (modalities.empty()) throw ArgumentError("fusion model needs at least one modality");
  if (dims.hidden == 0) throw DimensionError("fusion hidden width must be positive");
  if (dims.num_classes != kNumEmotions) {
    throw DimensionError("fusion classifier width must be " + std::to_string(kNumEmotions));
  }
  const std::size_t h = dims.hidden;
  for (Modality m : kAllModalities) {
    const std::size_t d = dims.input_dim(m);
    if (modalities.contains(m) && d == 0) {
      throw DimensionError(std::string("fusion input dim for modality '") + modality_tag(m) +
                           "' is zero");
    }
    params_.add(projection_param(m, "w1"), Tensor2(d, h));
    params_.add(projection_param(m, "b1"), Tensor2(1, h));
    params_.add(projection_param(m, "w2"), Tensor2(h, h));
    params_.add(projection_param(m, "b2"), Tensor2(1, h));
    if (!modalities.contains(m)) {
      for (const char* f : {"w1", "b1", "w2", "b2"}) params_.set_frozen(projection_param(m, f), true);
    }
  }
  params_.add("att.w", Tensor2(h, 1));
  params_.add("att.b", Tensor2(1, 1));
  params_.add("cls.w", Tensor2(h, dims.num_classes));
  params_.add("cls.b", Tensor2(1, dims.num_classes));
}

FusionModel FusionModel::initialized(FusionDims dims, ModalitySet modalities, MissingPolicy policy,
                                     Rng& rng) {
  FusionModel model(dims, modalities, policy);
  auto fill = [&rng](Tensor2& t, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  };
  ParamSet& p = model.params_;
  for (Modality m : kAllModalities) {
    if (!modalities.contains(m)) continue;
    fill(p.param(projection_param(m, "w1")), dims.input_dim(m));
    fill(p.param(projection_param(m, "w2")), dims.hidden);
  }
  fill(p.param("att.w"), dims.hidden);
  fill(p.param("cls.w"), dims.hidden);
  return model;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct ProjectionCache {
  Tensor2 input, pre, hidden, out;
};

struct FusionForward {
  std::size_t rows = 0;
  std::array<bool, kNumModalities> used{};           // modality in the model subset
  std::array<ProjectionCache, kNumModalities> proj;  // valid where used
  std::vector<std::array<bool, kNumModalities>> attend;
  std::vector<std::array<double, kNumModalities>> alpha;
  Tensor2 fused;
  Tensor2 logits;
};

ProjectionCache project_rows(const Tensor2& input, const FusionModel& model, Modality m) {
  const ParamSet& p = model.params();
  ProjectionCache c;
  c.input = input;
  c.pre = matmul(input, p.param(FusionModel::projection_param(m, "w1")));
  add_row_bias(c.pre, p.param(FusionModel::projection_param(m, "b1")));
  c.hidden = relu(c.pre);
  c.out = matmul(c.hidden, p.param(FusionModel::projection_param(m, "w2")));
  add_row_bias(c.out, p.param(FusionModel::projection_param(m, "b2")));
  return c;
}

FusionForward forward(std::span<const FusionExample> batch, const FusionModel& model) {
  const FusionDims& dims = model.dims();
  const std::size_t n = batch.size();
  FusionForward f;
  f.rows = n;
  f.attend.assign(n, {});
  f.alpha.assign(n, {});

  for (Modality m : kAllModalities) {
    const auto mi = static_cast<std::size_t>(m);
    if (!model.modalities().contains(m)) continue;
    f.used[mi] = true;
    const std::size_t d = dims.input_dim(m);
    Tensor2 input(n, d);
    for (std::size_t b = 0; b < n; ++b) {
      const auto& vec = batch[b].embeddings.get(m);
      if (vec) {
        if (vec->size() != d) {
          throw DimensionError("sample '" + batch[b].id + "' modality '" +
                               std::string(1, modality_tag(m)) + "' has dim " +
                               std::to_string(vec->size()) + ", model expects " +
                               std::to_string(d));
        }
        std::copy(vec->begin(), vec->end(), input.row(b).begin());
        f.attend[b][mi] = true;
      } else {
        switch (model.policy()) {
          case MissingPolicy::restrict_attention:
            break;
          case MissingPolicy::impute_zero:
            f.attend[b][mi] = true;
            break;
          case MissingPolicy::strict:
            throw DataError("sample '" + batch[b].id + "' is missing modality '" +
                            std::string(1, modality_tag(m)) + "' and imputation is off");
        }
      }
    }
    f.proj[mi] = project_rows(input, model, m);
  }

  const ParamSet& p = model.params();
  const Tensor2& att_w = p.param("att.w");
  f.fused = Tensor2(n, dims.hidden);
  for (std::size_t b = 0; b < n; ++b) {
    std::array<double, kNumModalities> score{};
    double peak = -INFINITY;
    bool any = false;
    for (std::size_t mi = 0; mi < kNumModalities; ++mi) {
      if (!f.attend[b][mi]) continue;
      const auto h = f.proj[mi].out.row(b);
      double e = 0.0;
      for (std::size_t j = 0; j < h.size(); ++j) e += h[j] * att_w[j];
      score[mi] = e;
      peak = std::max(peak, e);
      any = true;
    }
    if (!any) throw DataError("sample '" + batch[b].id + "' has none of the fused modalities");
    double total = 0.0;
    for (std::size_t mi = 0; mi < kNumModalities; ++mi) {
      if (!f.attend[b][mi]) continue;
      f.alpha[b][mi] = std::exp(score[mi] - peak);
      total += f.alpha[b][mi];
    }
    auto z = f.fused.row(b);
    for (std::size_t mi = 0; mi < kNumModalities; ++mi) {
      if (!f.attend[b][mi]) continue;
      f.alpha[b][mi] /= total;
      const auto h = f.proj[mi].out.row(b);
      for (std::size_t j = 0; j < z.size(); ++j) z[j] += f.alpha[b][mi] * h[j];
    }
  }

  f.logits = matmul(f.fused, p.param("cls.w"));
  add_row_bias(f.logits, p.param("cls.b"));
  return f;
}

}  // namespace

std::vector<double> project_modality(std::span<const double> features, const FusionModel& model,
                                     Modality m) {
  const auto mi = static_cast<int>(m);
  if (mi < 0 || mi >= static_cast<int>(kNumModalities)) throw ArgumentError("unknown modality");
  if (features.size() != model.dims().input_dim(m)) {
    throw DimensionError(std::string("modality '") + modality_tag(m) + "' expects dim " +
                         std::to_string(model.dims().input_dim(m)) + ", got " +
                         std::to_string(features.size()));
  }
  const auto c = project_rows(Tensor2::row_vector(features), model, m);
  return {c.out.values().begin(), c.out.values().end()};
}

AttentionFusion attention_fuse(std::span<const double> h_acoustic,
                               std::span<const double> h_lexical,
                               std::span<const double> h_visual, const FusionModel& model) {
  const std::size_t d = model.dims().hidden;
  const std::array<std::span<const double>, kNumModalities> hs = {h_acoustic, h_lexical, h_visual};
  for (const auto& h : hs) {
    if (h.size() != d) {
      throw DimensionError("attention_fuse: projected width " + std::to_string(h.size()) +
                           " vs hidden width " + std::to_string(d));
    }
  }
  const Tensor2& att_w = model.params().param("att.w");
  std::vector<double> scores(kNumModalities);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    double e = 0.0;
    for (std::size_t j = 0; j < d; ++j) e += hs[m][j] * att_w[j];
    scores[m] = e;
  }
  const auto alpha = softmax(scores);
  AttentionFusion out;
  out.fused.assign(d, 0.0);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    out.alpha[m] = alpha[m];
    for (std::size_t j = 0; j < d; ++j) out.fused[j] += alpha[m] * hs[m][j];
  }
  return out;
}

double fusion_loss(std::span<const FusionExample> batch, FusionModel& model) {
  if (batch.empty()) throw ArgumentError("fusion_loss: empty batch");
  for (const auto& ex : batch) {
    if (!ex.label) throw DataError("sample '" + ex.id + "' has no label");
  }
  ParamSet& p = model.params();
  p.zero_grad();
  const FusionForward f = forward(batch, model);
  const std::size_t n = batch.size();
  const std::size_t d = model.dims().hidden;
  const double inv_n = 1.0 / static_cast<double>(n);

  double loss = 0.0;
  Tensor2 d_logits(n, model.dims().num_classes);
  for (std::size_t b = 0; b < n; ++b) {
    const LossGrad ce = cross_entropy(f.logits.row(b), emotion_index(*batch[b].label));
    loss += ce.loss * inv_n;
    for (std::size_t c = 0; c < ce.grad.size(); ++c) d_logits(b, c) = ce.grad[c] * inv_n;
  }

  p.grad("cls.w") = matmul_tn(f.fused, d_logits);
  p.grad("cls.b") = column_sums(d_logits);
  const Tensor2 d_fused = matmul_nt(d_logits, p.param("cls.w"));

  const Tensor2& att_w = p.param("att.w");
  Tensor2& g_att_w = p.grad("att.w");
  std::array<Tensor2, kNumModalities> d_h;
  for (std::size_t mi = 0; mi < kNumModalities; ++mi)
    if (f.used[mi]) d_h[mi] = Tensor2(n, d);

  for (std::size_t b = 0; b < n; ++b) {
    const auto dz = d_fused.row(b);
    std::array<double, kNumModalities> s{};
    double s_bar = 0.0;
    for (std::size_t mi = 0; mi < kNumModalities; ++mi) {
      if (!f.attend[b][mi]) continue;
      const auto h = f.proj[mi].out.row(b);
      for (std::size_t j = 0; j < d; ++j) s[mi] += dz[j] * h[j];
      s_bar += f.alpha[b][mi] * s[mi];
    }
    for (std::size_t mi = 0; mi < kNumModalities; ++mi) {
      if (!f.attend[b][mi]) continue;
      const double a = f.alpha[b][mi];
      const double de = a * (s[mi] - s_bar);
      const auto h = f.proj[mi].out.row(b);
      auto dh = d_h[mi].row(b);
      for (std::size_t j = 0; j < d; ++j) {
        dh[j] = a * dz[j] + de * att_w[j];
        g_att_w[j] += de * h[j];
      }
    }
  }

  for (Modality m : kAllModalities) {
    const auto mi = static_cast<std::size_t>(m);
    if (!f.used[mi]) continue;
    const ProjectionCache& c = f.proj[mi];
    p.grad(FusionModel::projection_param(m, "w2")) = matmul_tn(c.hidden, d_h[mi]);
    p.grad(FusionModel::projection_param(m, "b2")) = column_sums(d_h[mi]);
    Tensor2 d_pre = matmul_nt(d_h[mi], p.param(FusionModel::projection_param(m, "w2")));
    hadamard_inplace(d_pre, relu_mask(c.pre));
    p.grad(FusionModel::projection_param(m, "w1")) = matmul_tn(c.input, d_pre);
    p.grad(FusionModel::projection_param(m, "b1")) = column_sums(d_pre);
  }
  return loss;
}

std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

Prediction predict(const ModalityEmbeddings& embeddings, const FusionModel& model) {
  const FusionExample ex{"", embeddings, std::nullopt};
  const FusionForward f = forward(std::span<const FusionExample>(&ex, 1), model);
  Prediction out;
  const auto logits = f.logits.row(0);
  const auto probs = softmax(logits);
  for (std::size_t c = 0; c < kNumEmotions; ++c) {
    out.logits[c] = logits[c];
    out.probabilities[c] = probs[c];
  }
  out.alpha = f.alpha[0];
  out.label = emotion_from_index(argmax_lowest(logits));
  return out;
}

// ---------------------------------------------------------------------------
// Upstream embedding

ModalityEmbeddings embed_sample(const Sample& sample, const FusionUpstream& upstream,
                                const ModalitySet& modalities) {
  ModalityEmbeddings e;
  if (modalities.contains(Modality::acoustic)) {
    if (!upstream.adapter) throw ConfigError("acoustic modality requested without an adapter model");
    const auto& dims = upstream.adapter->dims();
    if (sample.acoustic.rows() != dims.layers || sample.acoustic.cols() != dims.feature_dim) {
      throw CheckpointError("adapter checkpoint expects a " + std::to_string(dims.layers) + "x" +
                            std::to_string(dims.feature_dim) + " acoustic stack, sample '" +
                            sample.id + "' has " + sample.acoustic.shape_string());
    }
    e.acoustic = extract_acoustic(sample.acoustic, *upstream.adapter);
  }
  if (modalities.contains(Modality::lexical)) e.lexical = sample.lexical;
  if (modalities.contains(Modality::visual)) {
    if (upstream.vision) {
      if (sample.visual.size() != upstream.vision->visual_dim()) {
        throw CheckpointError("vision checkpoint expects visual dim " +
                              std::to_string(upstream.vision->visual_dim()) + ", sample '" +
                              sample.id + "' has " + std::to_string(sample.visual.size()));
      }
      e.visual = vision_forward(sample.visual, *upstream.vision);
    } else {
      e.visual = sample.visual;
    }
  }
  return e;
}

std::vector<FusionExample> build_fusion_examples(SampleBatch samples,
                                                 const FusionUpstream& upstream,
                                                 const ModalitySet& modalities) {
  std::vector<FusionExample> out;
  out.reserve(samples.size());
  for (const Sample* s : samples) {
    out.push_back({s->id, embed_sample(*s, upstream, modalities), s->label});
  }
  return out;
}

void check_fusion_compatibility(const FusionModel& model, const FusionUpstream& upstream,
                                std::size_t raw_visual_dim, std::size_t raw_lexical_dim) {
  const FusionDims& dims = model.dims();
  auto fail = [](const std::string& what, std::size_t expected, std::size_t got) {
    throw CheckpointError("incompatible checkpoints: fusion model expects " + what + " dim " +
                          std::to_string(expected) + ", upstream provides " + std::to_string(got));
  };
  if (model.modalities().contains(Modality::acoustic)) {
    if (!upstream.adapter) throw CheckpointError("fusion model uses acoustic input but no adapter checkpoint is loaded");
    if (upstream.adapter->dims().feature_dim != dims.acoustic_dim)
      fail("acoustic", dims.acoustic_dim, upstream.adapter->dims().feature_dim);
  }
  if (model.modalities().contains(Modality::lexical) && raw_lexical_dim != dims.lexical_dim)
    fail("lexical", dims.lexical_dim, raw_lexical_dim);
  if (model.modalities().contains(Modality::visual)) {
    const std::size_t got = upstream.vision ? upstream.vision->acoustic_dim() : raw_visual_dim;
    if (upstream.vision && upstream.vision->visual_dim() != raw_visual_dim)
      fail("raw visual (vision MLP input)", upstream.vision->visual_dim(), raw_visual_dim);
    if (got != dims.visual_dim) fail("visual", dims.visual_dim, got);
  }
}

// ---------------------------------------------------------------------------
// Training

double fusion_weighted_f1(std::span<const FusionExample> examples, const FusionModel& model) {
  std::vector<std::size_t> preds, labels;
  for (std::size_t start = 0; start < examples.size(); start += 256) {
    const std::size_t len = std::min<std::size_t>(256, examples.size() - start);
    const auto chunk = examples.subspan(start, len);
    const FusionForward f = forward(chunk, model);
    for (std::size_t b = 0; b < len; ++b) {
      if (!chunk[b].label) throw DataError("sample '" + chunk[b].id + "' has no label");
      preds.push_back(argmax_lowest(f.logits.row(b)));
      labels.push_back(emotion_index(*chunk[b].label));
    }
  }
  return weighted_f1(preds, labels);
}

FusionTrainResult train_fusion_stage(std::span<const FusionExample> train,
                                     std::span<const FusionExample> validation,
                                     const FusionDims& dims, const FusionTrainConfig& config) {
  if (train.empty()) throw ConfigError("fusion stage: empty labeled training set");
  if (config.batch_size == 0) throw ConfigError("fusion stage: batch size must be positive");
  FusionDims d = dims;
  d.hidden = config.hidden;

  Rng init_rng(derive_seed(config.seed, 21));
  Rng order_rng(derive_seed(config.seed, 22));
  FusionModel model = FusionModel::initialized(d, config.modalities, config.policy, init_rng);
  AdamState adam(config.adam);

  FusionTrainResult result{model, {}, 0};
  double best_f1 = -1.0;
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<FusionExample> batch;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    FusionEpochLog entry;
    entry.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      batch.clear();
      for (std::size_t r = 0; r < len; ++r) batch.push_back(train[order[start + r]]);
      const double l = fusion_loss(batch, model);
      if (!std::isfinite(l)) {
        throw NumericError("fusion stage: non-finite loss at epoch " + std::to_string(epoch));
      }
      entry.ce += l * static_cast<double>(len);
      adam_step(model.params(), adam);
    }
    entry.ce /= static_cast<double>(train.size());

    if (validation.empty()) {
      result.model = model;
      result.best_epoch = epoch;
    } else {
      entry.val_wf1 = fusion_weighted_f1(validation, model);
      if (entry.val_wf1 > best_f1) {
        best_f1 = entry.val_wf1;
        result.model = model;
        result.best_epoch = epoch;
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    result.log.push_back(entry);
    if (config.patience > 0 && !validation.empty() && since_best >= config.patience) break;
  }
  if (config.epochs == 0) result.model = model;
  return result;
}

std::string format_fusion_log(const std::vector<FusionEpochLog>& log) {
  std::ostringstream out;
  out << "epoch\tL_ce\tval_wF1\n";
  char buf[96];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.6f\t%.6f\n", e.epoch, e.ce, e.val_wf1);
    out << buf;
  }
  return out.str();
}

}  // namespace emofuse
