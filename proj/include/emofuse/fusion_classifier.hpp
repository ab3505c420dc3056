#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emofuse/acoustic_adapter.hpp"
#include "emofuse/numcore.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/sample.hpp"
#include "emofuse/visual_align.hpp"

namespace emofuse {

/// Stacking order of the attention input: acoustic, lexical, visual.
enum class Modality : int { acoustic = 0, lexical = 1, visual = 2 };
inline constexpr std::size_t kNumModalities = 3;
inline constexpr std::array<Modality, kNumModalities> kAllModalities = {
    Modality::acoustic, Modality::lexical, Modality::visual};

char modality_tag(Modality m);
/// Accepts 'a', 'l', 'v'; anything else is an ArgumentError.
Modality modality_from_tag(char tag);

class ModalitySet {
 public:
  constexpr ModalitySet() = default;
  static ModalitySet all() { return parse("alv"); }
  /// Letters from {a,l,v} in any order, e.g. "av". Empty or unknown letters are rejected.
  static ModalitySet parse(std::string_view tags);

  bool contains(Modality m) const { return bits_[static_cast<std::size_t>(m)]; }
  void insert(Modality m) { bits_[static_cast<std::size_t>(m)] = true; }
  bool empty() const { return !bits_[0] && !bits_[1] && !bits_[2]; }
  std::size_t size() const { return std::size_t{bits_[0]} + bits_[1] + bits_[2]; }
  /// Canonical tag string in a, l, v order.
  std::string to_string() const;

  friend bool operator==(const ModalitySet&, const ModalitySet&) = default;

 private:
  std::array<bool, kNumModalities> bits_{};
};

enum class MissingPolicy {
  restrict_attention,  // softmax over the modalities present in the sample
  impute_zero,         // absent modalities enter as zero vectors
  strict,              // an absent modality is a data error
};

std::string_view missing_policy_name(MissingPolicy policy);
MissingPolicy missing_policy_from_name(std::string_view name);

struct FusionDims {
  std::size_t acoustic_dim = 0;
  std::size_t lexical_dim = 0;
  std::size_t visual_dim = 0;
  std::size_t hidden = 256;
  std::size_t num_classes = kNumEmotions;

  std::size_t input_dim(Modality m) const;
  friend bool operator==(const FusionDims&, const FusionDims&) = default;
};

/// Stage-3 model: per-modality two-layer projections to width d_h, a shared attention
/// scorer (W_α: d_h×1, b_α: scalar) and a d_h→6 classifier.
///
/// Parameter names: proj.<m>.{w1,b1,w2,b2} for m ∈ {a,l,v}, att.w, att.b, cls.w, cls.b.
/// Projections of modalities outside the configured subset are frozen.
class FusionModel {
 public:
  FusionModel(FusionDims dims, ModalitySet modalities,
              MissingPolicy policy = MissingPolicy::restrict_attention);

  static FusionModel initialized(FusionDims dims, ModalitySet modalities, MissingPolicy policy,
                                 Rng& rng);

  const FusionDims& dims() const noexcept { return dims_; }
  const ModalitySet& modalities() const noexcept { return modalities_; }
  MissingPolicy policy() const noexcept { return policy_; }

  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  static std::string projection_param(Modality m, const char* field);

 private:
  FusionDims dims_;
  ModalitySet modalities_;
  MissingPolicy policy_;
  ParamSet params_;
};

/// Per-sample modality vectors; an empty optional marks an absent modality.
struct ModalityEmbeddings {
  std::optional<std::vector<double>> acoustic;
  std::optional<std::vector<double>> lexical;
  std::optional<std::vector<double>> visual;

  const std::optional<std::vector<double>>& get(Modality m) const;
  std::optional<std::vector<double>>& get(Modality m);
};

/// h_m = ReLU(f_m·W1 + b1)·W2 + b2.
std::vector<double> project_modality(std::span<const double> features, const FusionModel& model,
                                     Modality m);

struct AttentionFusion {
  std::vector<double> fused;           // z = Σ α_m h_m
  std::array<double, kNumModalities> alpha{};  // zero for modalities not attended
};

/// α = softmax over m of (h_m·W_α + b_α); z = Σ α_m h_m. Uses all three inputs.
/// b_α cancels inside the softmax, so its gradient is identically zero.
AttentionFusion attention_fuse(std::span<const double> h_acoustic,
                               std::span<const double> h_lexical,
                               std::span<const double> h_visual, const FusionModel& model);

struct FusionExample {
  std::string id;
  ModalityEmbeddings embeddings;
  std::optional<EmotionLabel> label;
};

/// Batch-mean cross-entropy of classifier(z); overwrites the model gradients.
double fusion_loss(std::span<const FusionExample> batch, FusionModel& model);

struct Prediction {
  EmotionLabel label = EmotionLabel::neutral;
  std::array<double, kNumModalities> alpha{};
  std::array<double, kNumEmotions> probabilities{};
  std::array<double, kNumEmotions> logits{};
};

/// Argmax of softmax(classifier(z)); ties go to the lowest class index.
Prediction predict(const ModalityEmbeddings& embeddings, const FusionModel& model);

/// Lowest index among the maxima.
std::size_t argmax_lowest(std::span<const double> values);

/// Frozen upstream extractors for stage 3. A null `vision` means raw (unaligned) visual features.
struct FusionUpstream {
  const AdapterModel* adapter = nullptr;
  const VisionMLP* vision = nullptr;
};

/// Builds the stage-3 inputs of one sample for the model's modality subset.
/// Throws CheckpointError if sample, upstream and fusion dimensions disagree.
ModalityEmbeddings embed_sample(const Sample& sample, const FusionUpstream& upstream,
                                const ModalitySet& modalities);

std::vector<FusionExample> build_fusion_examples(SampleBatch samples,
                                                 const FusionUpstream& upstream,
                                                 const ModalitySet& modalities);

/// Checks that the upstream models produce what the fusion model consumes.
void check_fusion_compatibility(const FusionModel& model, const FusionUpstream& upstream,
                                std::size_t raw_visual_dim, std::size_t raw_lexical_dim);

struct FusionTrainConfig {
  std::size_t hidden = 256;
  ModalitySet modalities = ModalitySet::all();
  MissingPolicy policy = MissingPolicy::restrict_attention;
  AdamConfig adam{};
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
};

struct FusionEpochLog {
  std::size_t epoch = 0;
  double ce = 0.0;
  double val_wf1 = 0.0;
};

struct FusionTrainResult {
  FusionModel model;
  std::vector<FusionEpochLog> log;
  std::size_t best_epoch = 0;
};

/// Adam on fusion_loss over precomputed embeddings; best validation weighted F1 is kept.
FusionTrainResult train_fusion_stage(std::span<const FusionExample> train,
                                     std::span<const FusionExample> validation,
                                     const FusionDims& dims, const FusionTrainConfig& config);

double fusion_weighted_f1(std::span<const FusionExample> examples, const FusionModel& model);

std::string format_fusion_log(const std::vector<FusionEpochLog>& log);

}  // namespace emofuse
