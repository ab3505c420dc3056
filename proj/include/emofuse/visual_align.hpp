#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emofuse/acoustic_adapter.hpp"
#include "emofuse/numcore.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/sample.hpp"

namespace emofuse {

inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 1.0;

/// Maps pooled visual features (d_v) into the acoustic embedding space (d_a):
/// f_v = ReLU(ReLU(x·W1 + b1)·W2 + b2), with a learnable temperature τ = exp(log_tau).
///
/// Parameter names: w1 (d_v×d_a), b1, w2 (d_a×d_a), b2, log_tau (1×1).
class VisionMLP {
 public:
  VisionMLP(std::size_t visual_dim, std::size_t acoustic_dim, double tau = 0.07);

  static VisionMLP initialized(std::size_t visual_dim, std::size_t acoustic_dim, double tau,
                               Rng& rng);

  std::size_t visual_dim() const noexcept { return visual_dim_; }
  std::size_t acoustic_dim() const noexcept { return acoustic_dim_; }
  double tau() const;
  /// Clamps τ into [0.01, 1] through log_tau.
  void clamp_tau();

  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

 private:
  std::size_t visual_dim_;
  std::size_t acoustic_dim_;
  ParamSet params_;
};

std::vector<double> vision_forward(std::span<const double> visual, const VisionMLP& mlp);

/// Row-wise vision_forward over a J×d_v matrix.
Tensor2 vision_forward_batch(const Tensor2& visual, const VisionMLP& mlp);

/// S[i][j] = cos(F_v[i], F_a[j]). Throws DegenerateEmbeddingError on a zero-norm row.
Tensor2 cosine_similarity_matrix(const Tensor2& visual, const Tensor2& acoustic);

struct ContrastiveLoss {
  double loss = 0.0;
  Tensor2 grad_similarity;  // ∂L/∂S
  double grad_tau = 0.0;    // ∂L/∂τ
};

/// Symmetric in-batch InfoNCE on a J×J similarity matrix with matched pairs on the diagonal:
/// L = ½·mean_i[CE_row_i(S/τ) + CE_col_i(S/τ)].
ContrastiveLoss contrastive_loss(const Tensor2& similarity, double tau);

struct AlignmentLoss {
  double loss = 0.0;
  double recall_at_1 = 0.0;
};

/// Full alignment objective for one batch: vision_forward → cosine → contrastive.
/// Overwrites the MLP gradients (including log_tau).
AlignmentLoss alignment_loss(const Tensor2& visual, const Tensor2& acoustic, VisionMLP& mlp);

/// Fraction of rows whose most similar column is the matched one (lowest index wins ties).
double retrieval_recall_at_1(const Tensor2& visual, const Tensor2& acoustic);
double retrieval_recall_at_1(const Tensor2& similarity);

/// Mean matched-pair cosine minus mean mismatched-pair cosine.
double alignment_gap(const Tensor2& visual, const Tensor2& acoustic);

struct AlignTrainConfig {
  AdamConfig adam{1e-4, 0.9, 0.999, 1e-8, 0.0, false};
  std::size_t batch_size = 1024;
  std::size_t epochs = 100;
  double tau_init = 0.07;
  std::uint64_t seed = 0;
};

struct AlignEpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double tau = 0.0;
  double recall_at_1 = 0.0;
};

struct AlignTrainResult {
  VisionMLP mlp;
  std::vector<AlignEpochLog> log;
};

/// Acoustic embeddings of every sample through a frozen stage-1 model (N×d_a).
Tensor2 acoustic_embeddings(SampleBatch samples, const AdapterModel& adapter);
Tensor2 visual_matrix(SampleBatch samples);

/// The untrained starting point of train_alignment_stage for the same config.
VisionMLP initial_vision_mlp(std::size_t visual_dim, std::size_t acoustic_dim,
                             const AlignTrainConfig& config);

/// Trains only the vision MLP on shuffled minibatches of paired samples; labels are ignored.
/// A trailing partial batch with fewer than two pairs is dropped.
AlignTrainResult train_alignment_stage(SampleBatch pairs, const AdapterModel& frozen_acoustic,
                                       const AlignTrainConfig& config);

/// TSV rows: epoch, L_ita, tau, recall@1.
std::string format_align_log(const std::vector<AlignEpochLog>& log);

}  // namespace emofuse
