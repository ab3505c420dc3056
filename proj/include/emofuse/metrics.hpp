#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace emofuse {

/// Support-weighted mean of per-class F1 over the six emotion classes.
/// F1 is 0 when precision + recall is 0; classes absent from `labels` carry no weight.
double weighted_f1(std::span<const std::size_t> predictions, std::span<const std::size_t> labels);

/// Disjoint folds over positions 0..n-1 of a labeled id list.
struct FoldPlan {
  std::vector<std::vector<std::size_t>> folds;

  std::size_t fold_count() const noexcept { return folds.size(); }
  /// Every position not in fold `f`, in ascending order.
  std::vector<std::size_t> training_positions(std::size_t f) const;
};

/// Seeded shuffle then contiguous chunking; the first n % k folds get one extra item.
FoldPlan kfold_split(std::span<const std::string> labeled_ids, std::size_t k_folds,
                     std::uint64_t seed);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

MeanStd mean_std(std::span<const double> values);

/// Scores in [0,1] rendered in percent as "NN.NN±N.NN".
std::string format_mean_std_percent(std::span<const double> scores);

}  // namespace emofuse
