#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emofuse/numcore.hpp"

namespace emofuse {

/// Ordinals are part of the on-disk contract and must never be reordered.
enum class EmotionLabel : int {
  neutral = 0,
  anger = 1,
  happiness = 2,
  sadness = 3,
  worry = 4,
  surprise = 5,
};

inline constexpr std::size_t kNumEmotions = 6;

inline constexpr std::array<std::string_view, kNumEmotions> kEmotionNames = {
    "neutral", "anger", "happiness", "sadness", "worry", "surprise"};

std::string_view emotion_name(EmotionLabel label);
std::optional<EmotionLabel> emotion_from_name(std::string_view name);
EmotionLabel emotion_from_index(std::size_t index);
inline std::size_t emotion_index(EmotionLabel label) { return static_cast<std::size_t>(label); }

enum class Split { labeled, unlabeled, test };

std::string_view split_name(Split split);
std::optional<Split> split_from_name(std::string_view name);

/// One sample in training precision. `acoustic` is the k×d_a pooled layer stack.
struct Sample {
  std::string id;
  Tensor2 acoustic;
  std::vector<double> visual;
  std::vector<double> lexical;
  std::optional<EmotionLabel> label;
  Split split = Split::labeled;
};

using SampleBatch = std::span<const Sample* const>;

std::vector<const Sample*> pointers_to(std::span<const Sample> samples);

}  // namespace emofuse
