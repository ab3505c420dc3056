#include "emofuse/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "emofuse/errors.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/sample.hpp"

namespace emofuse {

double weighted_f1(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.size() != labels.size()) {
    throw ArgumentError("weighted_f1: " + std::to_string(predictions.size()) +
                        " predictions vs " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ArgumentError("weighted_f1: empty input");

  std::array<double, kNumEmotions> tp{}, predicted{}, support{};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i] >= kNumEmotions || labels[i] >= kNumEmotions) {
      throw ArgumentError("weighted_f1: class index out of range 0..5 at position " +
                          std::to_string(i));
    }
    predicted[predictions[i]] += 1.0;
    support[labels[i]] += 1.0;
    if (predictions[i] == labels[i]) tp[labels[i]] += 1.0;
  }

  double weighted = 0.0;
  for (std::size_t c = 0; c < kNumEmotions; ++c) {
    if (support[c] == 0.0) continue;
    const double precision = predicted[c] > 0.0 ? tp[c] / predicted[c] : 0.0;
    const double recall = tp[c] / support[c];
    const double f1 =
        precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    weighted += support[c] * f1;
  }
  return weighted / static_cast<double>(labels.size());
}

std::vector<std::size_t> FoldPlan::training_positions(std::size_t f) const {
  std::vector<std::size_t> out;
  for (std::size_t g = 0; g < folds.size(); ++g) {
    if (g == f) continue;
    out.insert(out.end(), folds[g].begin(), folds[g].end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

FoldPlan kfold_split(std::span<const std::string> labeled_ids, std::size_t k_folds,
                     std::uint64_t seed) {
  const std::size_t n = labeled_ids.size();
  if (k_folds == 0 || k_folds > n) {
    throw ArgumentError("cannot split " + std::to_string(n) + " labeled samples into " +
                        std::to_string(k_folds) + " folds");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x666f6c64));
  rng.shuffle(std::span<std::size_t>(order));

  FoldPlan plan;
  plan.folds.resize(k_folds);
  const std::size_t base = n / k_folds;
  const std::size_t extra = n % k_folds;
  std::size_t cursor = 0;
  for (std::size_t f = 0; f < k_folds; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    plan.folds[f].assign(order.begin() + cursor, order.begin() + cursor + len);
    std::sort(plan.folds[f].begin(), plan.folds[f].end());
    cursor += len;
  }
  return plan;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / n);
  return out;
}

std::string format_mean_std_percent(std::span<const double> scores) {
  const MeanStd ms = mean_std(scores);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f±%.2f", 100.0 * ms.mean, 100.0 * ms.std);
  return buf;
}

}  // namespace emofuse
