#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "emofuse/feature_store.hpp"

namespace emofuse {

/// Planted-structure surrogate for pre-extracted multimodal features.
///
/// Each sample draws a latent z = e_c + j, where e_c is its class center and j is
/// per-sample jitter orthogonal to the span of the (centered) class centers, so jitter
/// identifies individual pairs without blurring class boundaries. Observed features are
///   acoustic layer i = snr_i · P_a z + σ·noise      (snr peaked at peak_layer)
///   visual           = ρ_xm · P_v z + σ·noise
///   lexical          = lexical_scale · P_l z + σ·noise
/// with fixed orthonormal-column maps P drawn from the seed. The acoustic map is shared
/// across layers, so layers differ only in signal scale.
struct SyntheticConfig {
  std::size_t n_samples = 600;    // labeled split
  std::size_t n_unlabeled = 600;  // unlabeled split (labels withheld)
  std::size_t n_test = 120;       // test split (labels kept for scoring)
  std::size_t n_classes = 6;
  std::size_t layers = 6;
  std::size_t acoustic_dim = 64;
  std::size_t visual_dim = 48;
  std::size_t lexical_dim = 96;
  std::size_t latent_dim = 16;
  std::size_t peak_layer = 2;
  std::uint32_t first_layer_id = 16;
  std::vector<double> layer_snr;  // empty: default profile peaked at peak_layer
  double rho_xm = 0.8;
  double sigma = 0.6;
  double class_sep = 2.0;
  double jitter = 2.5;
  double lexical_scale = 1.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::vector<double> snr_profile() const;
};

FeatureStore generate_synthetic(const SyntheticConfig& config);

}  // namespace emofuse
