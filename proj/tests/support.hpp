#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "emofuse/acoustic_adapter.hpp"
#include "emofuse/numcore.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/sample.hpp"

namespace testing {

inline emofuse::Tensor2 random_tensor(std::size_t rows, std::size_t cols, emofuse::Rng& rng,
                                      double scale = 1.0) {
  emofuse::Tensor2 t(rows, cols);
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

inline std::vector<double> random_vector(std::size_t n, emofuse::Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

inline emofuse::Sample toy_sample(const std::string& id, std::size_t layers, std::size_t da,
                                  std::size_t dv, std::size_t dl, std::size_t label,
                                  emofuse::Rng& rng) {
  emofuse::Sample s;
  s.id = id;
  s.acoustic = random_tensor(layers, da, rng);
  s.visual = random_vector(dv, rng);
  s.lexical = random_vector(dl, rng);
  s.label = emofuse::emotion_from_index(label);
  return s;
}

/// Triple-loop product, kept independent of the library kernels.
inline emofuse::Tensor2 naive_matmul(const emofuse::Tensor2& a, const emofuse::Tensor2& b) {
  emofuse::Tensor2 c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  return c;
}

/// Weighted F1 from an explicit 6×6 confusion matrix.
inline double oracle_weighted_f1(const std::vector<std::size_t>& preds,
                                 const std::vector<std::size_t>& labels) {
  std::array<std::array<double, 6>, 6> cm{};
  for (std::size_t i = 0; i < preds.size(); ++i) cm[labels[i]][preds[i]] += 1.0;
  double weighted = 0.0, total = 0.0;
  for (std::size_t c = 0; c < 6; ++c) {
    double tp = cm[c][c], row = 0.0, col = 0.0;
    for (std::size_t k = 0; k < 6; ++k) {
      row += cm[c][k];
      col += cm[k][c];
    }
    const double precision = col > 0 ? tp / col : 0.0;
    const double recall = row > 0 ? tp / row : 0.0;
    const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    weighted += row * f1;
    total += row;
  }
  return weighted / total;
}

/// Joint adapter loss recomputed from the public forward pieces with the reconstruction
/// target pinned to `targets`; masks replay Rng(seed) in batch order.
inline double frozen_target_loss(emofuse::SampleBatch batch, const emofuse::AdapterModel& model,
                                 const std::vector<std::vector<double>>& targets,
                                 std::uint64_t seed) {
  emofuse::Rng rng(seed);
  const emofuse::ParamSet& p = model.params();
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto fused = emofuse::extract_acoustic(batch[b]->acoustic, model);
    const auto masked = emofuse::mask_features(fused, model.mask_ratio(), rng).masked;
    const auto recon = emofuse::recon_forward(masked, model);
    auto logits = std::vector<double>(p.param("classifier.b").values().begin(),
                                      p.param("classifier.b").values().end());
    for (std::size_t j = 0; j < recon.size(); ++j)
      for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += recon[j] * p.param("classifier.w")(j, c);
    total += emofuse::cross_entropy(logits, emofuse::emotion_index(*batch[b]->label)).loss;
    total += emofuse::mse(recon, targets[b]).loss;
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace testing
