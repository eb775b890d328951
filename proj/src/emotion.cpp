#include "emosup/emotion.hpp"

#include "emosup/errors.hpp"

namespace emosup {
namespace {

constexpr std::array<std::string_view, kNumEmotions> kNames = {
    "neutral", "angry", "disgusted", "fear", "happy", "sad", "surprised"};

}  // namespace

Emotion emotion_from_code(int c) {
  if (c < 0 || c >= kNumEmotions) {
    throw ContractError("unknown emotion code " + std::to_string(c));
  }
  return static_cast<Emotion>(c);
}

std::string_view emotion_name(Emotion e) { return kNames.at(code(e)); }

std::optional<Emotion> parse_emotion(std::string_view name) {
  for (int i = 0; i < kNumEmotions; ++i) {
    if (kNames[i] == name) return static_cast<Emotion>(i);
  }
  return std::nullopt;
}

std::string emotion_prompt(Emotion e) {
  return "a photo of a " + std::string(emotion_name(e)) + " face";
}

}  // namespace emosup
