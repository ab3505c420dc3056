#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emofuse/metrics.hpp"
#include "emofuse/numcore.hpp"
#include "emofuse/sample.hpp"

namespace emofuse {

struct LinearProbeConfig {
  AdamConfig adam{5e-3, 0.9, 0.999, 1e-8, 0.0, false};
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

/// Single fully connected softmax classifier.
struct LinearProbe {
  Tensor2 weight;  // d×6
  Tensor2 bias;    // 1×6

  std::size_t predict(std::span<const double> features) const;
};

LinearProbe train_linear_probe(const Tensor2& features, std::span<const std::size_t> labels,
                               const LinearProbeConfig& config);

/// Per-fold weighted F1 of a linear probe on `features` (one row per labeled sample).
std::vector<double> linear_probe_cv(const Tensor2& features, std::span<const std::size_t> labels,
                                    const FoldPlan& plan, const LinearProbeConfig& config);

struct LayerProbeRow {
  std::size_t index = 0;
  std::uint32_t layer_id = 0;
  std::vector<double> fold_scores;
  double mean = 0.0;
  double std = 0.0;
  bool best = false;
};

/// Probes every layer of the acoustic stack under k-fold CV. Exactly one row is marked best
/// (highest mean; lowest index on ties).
std::vector<LayerProbeRow> probe_layers(std::span<const Sample> labeled,
                                        std::span<const std::uint32_t> layer_ids,
                                        std::size_t folds, std::uint64_t seed,
                                        const LinearProbeConfig& config = {});

std::size_t best_layer_index(const std::vector<LayerProbeRow>& rows);

/// Tolerates at most `allowed_inversions` direction changes beyond the single peak.
bool is_unimodal(std::span<const double> curve, std::size_t allowed_inversions);

std::string format_probe_report(const std::vector<LayerProbeRow>& rows, std::size_t folds,
                                std::uint64_t seed);

}  // namespace emofuse
