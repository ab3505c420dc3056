#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emofuse/acoustic_adapter.hpp"
#include "emofuse/fusion_classifier.hpp"
#include "emofuse/numcore.hpp"
#include "emofuse/visual_align.hpp"

namespace emofuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Versioned model container ("EMCK"), little-endian:
///   "EMCK" | u32 version | str kind | u32 count, (str name, u64 value)* dims |
///   u32 count, (str name, f64 value)* scalars | u32 count, (str name, u32 rows, u32 cols, f64 data)*
/// where str is a u32 byte length followed by UTF-8 bytes.
struct CheckpointData {
  std::string kind;
  std::map<std::string, std::uint64_t> dims;
  std::map<std::string, double> scalars;
  std::map<std::string, Tensor2> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data);
CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const AdapterModel& model, const std::filesystem::path& path);
void save_checkpoint(const VisionMLP& model, const std::filesystem::path& path);
void save_checkpoint(const FusionModel& model, const std::filesystem::path& path);

/// Each loader rejects the wrong kind and, when `expected` is given, mismatched dims.
AdapterModel load_adapter_checkpoint(const std::filesystem::path& path,
                                     const std::optional<AdapterDims>& expected = std::nullopt);
VisionMLP load_vision_checkpoint(const std::filesystem::path& path,
                                 std::optional<std::size_t> expected_visual_dim = std::nullopt,
                                 std::optional<std::size_t> expected_acoustic_dim = std::nullopt);
FusionModel load_fusion_checkpoint(const std::filesystem::path& path,
                                   const std::optional<FusionDims>& expected = std::nullopt);

}  // namespace emofuse
