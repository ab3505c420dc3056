#include "emofuse/sample.hpp"

#include "emofuse/errors.hpp"

namespace emofuse {

std::string_view emotion_name(EmotionLabel label) { return kEmotionNames.at(emotion_index(label)); }

std::optional<EmotionLabel> emotion_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kEmotionNames.size(); ++i) {
    if (kEmotionNames[i] == name) return static_cast<EmotionLabel>(i);
  }
  return std::nullopt;
}

EmotionLabel emotion_from_index(std::size_t index) {
  if (index >= kNumEmotions) {
    throw ArgumentError("emotion class index " + std::to_string(index) + " out of range 0..5");
  }
  return static_cast<EmotionLabel>(index);
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::labeled:
      return "labeled";
    case Split::unlabeled:
      return "unlabeled";
    case Split::test:
      return "test";
  }
  return "labeled";
}

std::optional<Split> split_from_name(std::string_view name) {
  if (name == "labeled") return Split::labeled;
  if (name == "unlabeled") return Split::unlabeled;
  if (name == "test") return Split::test;
  return std::nullopt;
}

std::vector<const Sample*> pointers_to(std::span<const Sample> samples) {
  std::vector<const Sample*> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(&s);
  return out;
}

}  // namespace emofuse
