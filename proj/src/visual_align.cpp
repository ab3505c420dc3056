#include "emofuse/visual_align.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "emofuse/errors.hpp"

namespace emofuse {

VisionMLP::VisionMLP(std::size_t visual_dim, std::size_t acoustic_dim, double tau)
    : visual_dim_(visual_dim), acoustic_dim_(acoustic_dim) {
  if (visual_dim == 0 || acoustic_dim == 0) throw DimensionError("vision MLP needs nonzero dims");
  if (!(tau > 0.0)) throw ArgumentError("temperature must be positive");
  params_.add("w1", Tensor2(visual_dim, acoustic_dim));
  params_.add("b1", Tensor2(1, acoustic_dim));
  params_.add("w2", Tensor2(acoustic_dim, acoustic_dim));
  params_.add("b2", Tensor2(1, acoustic_dim));
  params_.add("log_tau", Tensor2(1, 1, std::log(tau)));
}

VisionMLP VisionMLP::initialized(std::size_t visual_dim, std::size_t acoustic_dim, double tau,
                                 Rng& rng) {
  VisionMLP mlp(visual_dim, acoustic_dim, tau);
  const double b1 = 1.0 / std::sqrt(static_cast<double>(visual_dim));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(acoustic_dim));
  for (auto& v : mlp.params_.param("w1").values()) v = rng.uniform(-b1, b1);
  for (auto& v : mlp.params_.param("w2").values()) v = rng.uniform(-b2, b2);
  mlp.clamp_tau();
  return mlp;
}

double VisionMLP::tau() const { return std::exp(params_.param("log_tau")[0]); }

void VisionMLP::clamp_tau() {
  double& log_tau = params_.param("log_tau")[0];
  log_tau = std::clamp(log_tau, std::log(kMinTemperature), std::log(kMaxTemperature));
}

namespace {

struct VisionCache {
  Tensor2 pre1, hidden, pre2, out;
};

VisionCache vision_forward_cached(const Tensor2& visual, const VisionMLP& mlp) {
  if (visual.cols() != mlp.visual_dim()) {
    throw DimensionError("vision MLP expects visual dim " + std::to_string(mlp.visual_dim()) +
                         ", got " + std::to_string(visual.cols()));
  }
  const ParamSet& p = mlp.params();
  VisionCache c;
  c.pre1 = matmul(visual, p.param("w1"));
  add_row_bias(c.pre1, p.param("b1"));
  c.hidden = relu(c.pre1);
  c.pre2 = matmul(c.hidden, p.param("w2"));
  add_row_bias(c.pre2, p.param("b2"));
  c.out = relu(c.pre2);
  return c;
}

std::vector<double> row_norms(const Tensor2& x, const char* role) {
  std::vector<double> norms(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double ss = 0.0;
    for (double v : x.row(i)) ss += v * v;
    norms[i] = std::sqrt(ss);
    if (!(norms[i] > 0.0)) {
      throw DegenerateEmbeddingError(std::string("zero-norm ") + role + " embedding at batch row " +
                                     std::to_string(i));
    }
  }
  return norms;
}

Tensor2 normalized_rows(const Tensor2& x, const std::vector<double>& norms) {
  Tensor2 u = x;
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (auto& v : u.row(i)) v /= norms[i];
  return u;
}

}  // namespace

std::vector<double> vision_forward(std::span<const double> visual, const VisionMLP& mlp) {
  const auto out = vision_forward_batch(Tensor2::row_vector(visual), mlp);
  return {out.values().begin(), out.values().end()};
}

Tensor2 vision_forward_batch(const Tensor2& visual, const VisionMLP& mlp) {
  return vision_forward_cached(visual, mlp).out;
}

Tensor2 cosine_similarity_matrix(const Tensor2& visual, const Tensor2& acoustic) {
  if (visual.cols() != acoustic.cols()) {
    throw DimensionError("cosine similarity: embedding widths " + visual.shape_string() + " vs " +
                         acoustic.shape_string());
  }
  const Tensor2 u = normalized_rows(visual, row_norms(visual, "visual"));
  const Tensor2 w = normalized_rows(acoustic, row_norms(acoustic, "acoustic"));
  Tensor2 s = matmul_nt(u, w);
  for (auto& v : s.values()) v = std::clamp(v, -1.0, 1.0);
  return s;
}

ContrastiveLoss contrastive_loss(const Tensor2& similarity, double tau) {
  if (!(tau > 0.0)) throw ArgumentError("contrastive loss needs tau > 0, got " + std::to_string(tau));
  const std::size_t j = similarity.rows();
  if (j < 2 || similarity.cols() != j) {
    throw DimensionError("contrastive loss needs a square similarity matrix with J >= 2, got " +
                         similarity.shape_string());
  }
  const double inv_j = 1.0 / static_cast<double>(j);
  ContrastiveLoss out;
  Tensor2 d_logits(j, j);
  std::vector<double> line(j);

  // Visual→acoustic (rows) then acoustic→visual (columns).
  for (int direction = 0; direction < 2; ++direction) {
    for (std::size_t i = 0; i < j; ++i) {
      for (std::size_t c = 0; c < j; ++c)
        line[c] = (direction == 0 ? similarity(i, c) : similarity(c, i)) / tau;
      const LossGrad ce = cross_entropy(line, i);
      out.loss += 0.5 * inv_j * ce.loss;
      for (std::size_t c = 0; c < j; ++c) {
        double& slot = direction == 0 ? d_logits(i, c) : d_logits(c, i);
        slot += 0.5 * inv_j * ce.grad[c];
      }
    }
  }

  out.grad_similarity = Tensor2(j, j);
  for (std::size_t idx = 0; idx < d_logits.size(); ++idx) {
    out.grad_similarity[idx] = d_logits[idx] / tau;
    out.grad_tau -= d_logits[idx] * similarity[idx] / (tau * tau);
  }
  return out;
}

double retrieval_recall_at_1(const Tensor2& similarity) {
  if (similarity.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < similarity.rows(); ++i) {
    const auto row = similarity.row(i);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == i) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(similarity.rows());
}

double retrieval_recall_at_1(const Tensor2& visual, const Tensor2& acoustic) {
  return retrieval_recall_at_1(cosine_similarity_matrix(visual, acoustic));
}

double alignment_gap(const Tensor2& visual, const Tensor2& acoustic) {
  const Tensor2 s = cosine_similarity_matrix(visual, acoustic);
  const std::size_t j = s.rows();
  if (j < 2) throw ArgumentError("alignment gap needs at least two pairs");
  double matched = 0.0, mismatched = 0.0;
  for (std::size_t r = 0; r < j; ++r)
    for (std::size_t c = 0; c < j; ++c) (r == c ? matched : mismatched) += s(r, c);
  const double jd = static_cast<double>(j);
  return matched / jd - mismatched / (jd * (jd - 1.0));
}

AlignmentLoss alignment_loss(const Tensor2& visual, const Tensor2& acoustic, VisionMLP& mlp) {
  if (visual.rows() != acoustic.rows()) {
    throw DimensionError("alignment batch: " + std::to_string(visual.rows()) + " visual rows vs " +
                         std::to_string(acoustic.rows()) + " acoustic rows");
  }
  ParamSet& p = mlp.params();
  p.zero_grad();
  const VisionCache c = vision_forward_cached(visual, mlp);
  if (c.out.cols() != acoustic.cols()) {
    throw DimensionError("vision MLP output width " + std::to_string(c.out.cols()) +
                         " vs acoustic width " + std::to_string(acoustic.cols()));
  }

  const auto v_norm = row_norms(c.out, "visual");
  const Tensor2 u = normalized_rows(c.out, v_norm);
  const Tensor2 w = normalized_rows(acoustic, row_norms(acoustic, "acoustic"));
  const Tensor2 s = matmul_nt(u, w);
  const double tau = mlp.tau();
  const ContrastiveLoss cl = contrastive_loss(s, tau);

  AlignmentLoss out;
  out.loss = cl.loss;
  out.recall_at_1 = retrieval_recall_at_1(s);

  p.grad("log_tau")[0] = cl.grad_tau * tau;

  // Through the row normalization: ∂u/∂v = (I − u uᵀ)/‖v‖.
  Tensor2 d_u = matmul(cl.grad_similarity, w);
  Tensor2 d_out(d_u.rows(), d_u.cols());
  for (std::size_t i = 0; i < d_u.rows(); ++i) {
    const auto gu = d_u.row(i);
    const auto ui = u.row(i);
    double proj = 0.0;
    for (std::size_t k = 0; k < gu.size(); ++k) proj += gu[k] * ui[k];
    auto dv = d_out.row(i);
    for (std::size_t k = 0; k < gu.size(); ++k) dv[k] = (gu[k] - proj * ui[k]) / v_norm[i];
  }

  hadamard_inplace(d_out, relu_mask(c.pre2));
  p.grad("w2") = matmul_tn(c.hidden, d_out);
  p.grad("b2") = column_sums(d_out);
  Tensor2 d_pre1 = matmul_nt(d_out, p.param("w2"));
  hadamard_inplace(d_pre1, relu_mask(c.pre1));
  p.grad("w1") = matmul_tn(visual, d_pre1);
  p.grad("b1") = column_sums(d_pre1);
  return out;
}

Tensor2 acoustic_embeddings(SampleBatch samples, const AdapterModel& adapter) {
  Tensor2 out(samples.size(), adapter.dims().feature_dim);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto f = extract_acoustic(samples[i]->acoustic, adapter);
    std::copy(f.begin(), f.end(), out.row(i).begin());
  }
  return out;
}

Tensor2 visual_matrix(SampleBatch samples) {
  const std::size_t d = samples.empty() ? 0 : samples.front()->visual.size();
  Tensor2 out(samples.size(), d);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->visual.size() != d) {
      throw DimensionError("sample '" + samples[i]->id + "' has visual dim " +
                           std::to_string(samples[i]->visual.size()) + ", expected " +
                           std::to_string(d));
    }
    std::copy(samples[i]->visual.begin(), samples[i]->visual.end(), out.row(i).begin());
  }
  return out;
}

VisionMLP initial_vision_mlp(std::size_t visual_dim, std::size_t acoustic_dim,
                             const AlignTrainConfig& config) {
  Rng init_rng(derive_seed(config.seed, 11));
  return VisionMLP::initialized(visual_dim, acoustic_dim, config.tau_init, init_rng);
}

AlignTrainResult train_alignment_stage(SampleBatch pairs, const AdapterModel& frozen_acoustic,
                                       const AlignTrainConfig& config) {
  if (pairs.size() < 2) throw ConfigError("alignment stage needs at least two paired samples");
  if (config.batch_size < 2) throw ConfigError("alignment batch size must be at least 2");
  if (config.batch_size > pairs.size()) {
    throw ConfigError("alignment batch size " + std::to_string(config.batch_size) +
                      " exceeds the " + std::to_string(pairs.size()) +
                      " available pairs; reduce --align-batch");
  }
  std::set<std::string> ids;
  for (const Sample* s : pairs) {
    if (!ids.insert(s->id).second) throw DataError("duplicate sample id '" + s->id + "' in alignment set");
  }

  const Tensor2 acoustic = acoustic_embeddings(pairs, frozen_acoustic);
  const Tensor2 visual = visual_matrix(pairs);

  Rng order_rng(derive_seed(config.seed, 12));
  VisionMLP mlp = initial_vision_mlp(visual.cols(), acoustic.cols(), config);
  AdamState adam(config.adam);

  AlignTrainResult result{mlp, {}};
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(std::span<std::size_t>(order));
    AlignEpochLog entry;
    entry.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, order.size() - start);
      if (len < 2) break;
      Tensor2 vb(len, visual.cols());
      Tensor2 ab(len, acoustic.cols());
      for (std::size_t r = 0; r < len; ++r) {
        const auto vs = visual.row(order[start + r]);
        const auto as = acoustic.row(order[start + r]);
        std::copy(vs.begin(), vs.end(), vb.row(r).begin());
        std::copy(as.begin(), as.end(), ab.row(r).begin());
      }
      const AlignmentLoss l = alignment_loss(vb, ab, mlp);
      if (!std::isfinite(l.loss)) {
        throw NumericError("alignment stage: non-finite loss at epoch " + std::to_string(epoch));
      }
      entry.loss += l.loss;
      entry.recall_at_1 += l.recall_at_1;
      ++batches;
      adam_step(mlp.params(), adam);
      mlp.clamp_tau();
    }
    entry.loss /= static_cast<double>(batches);
    entry.recall_at_1 /= static_cast<double>(batches);
    entry.tau = mlp.tau();
    result.log.push_back(entry);
  }
  result.mlp = mlp;
  return result;
}

std::string format_align_log(const std::vector<AlignEpochLog>& log) {
  std::ostringstream out;
  out << "epoch\tL_ita\ttau\trecall@1\n";
  char buf[128];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.6f\t%.6f\t%.6f\n", e.epoch, e.loss, e.tau, e.recall_at_1);
    out << buf;
  }
  return out.str();
}

}  // namespace emofuse
