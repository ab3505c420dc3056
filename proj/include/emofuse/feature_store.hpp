#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emofuse/sample.hpp"

namespace emofuse {

inline constexpr std::uint32_t kStoreFormatVersion = 1;

struct StoreHeader {
  std::uint32_t layers = 0;
  std::uint32_t acoustic_dim = 0;
  std::uint32_t visual_dim = 0;
  std::uint32_t lexical_dim = 0;
  std::vector<std::uint32_t> layer_ids;

  friend bool operator==(const StoreHeader&, const StoreHeader&) = default;
};

struct ManifestRow {
  std::string sample_id;
  std::optional<EmotionLabel> label;
  Split split = Split::labeled;

  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

/// Packed float32 feature blocks plus the manifest binding ids, labels and splits.
///
/// On-disk ("EMOF") layout, all integers little-endian:
///   "EMOF" | u32 version | u32 n, k, d_a, d_v, d_l | k × u32 layer_ids |
///   u32 manifest byte count | manifest TSV (UTF-8) |
///   f32 acoustic[n][k][d_a] | f32 visual[n][d_v] | f32 lexical[n][d_l]
/// The manifest starts with the header line "sample_id\tlabel\tsplit"; unlabeled rows carry "-".
struct FeatureStore {
  StoreHeader header;
  std::vector<ManifestRow> manifest;
  std::vector<float> acoustic;
  std::vector<float> visual;
  std::vector<float> lexical;

  std::size_t size() const noexcept { return manifest.size(); }

  /// Throws DataError on any broken invariant (block sizes, duplicate ids, labels, ids with tabs).
  void validate() const;

  Sample sample(std::size_t i) const;
  std::vector<Sample> samples() const;
  std::vector<Sample> samples(Split split) const;

  friend bool operator==(const FeatureStore&, const FeatureStore&) = default;
};

std::vector<std::uint8_t> encode_store(const FeatureStore& store);
/// FormatError on bad magic/version/manifest, CorruptionError (with offset) on truncation.
FeatureStore decode_store(std::span<const std::uint8_t> bytes);

void write_store(const FeatureStore& store, const std::filesystem::path& path);
FeatureStore read_store(const std::filesystem::path& path);

}  // namespace emofuse
