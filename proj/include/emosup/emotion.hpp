#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace emosup {

// Stable integer codes; serialized files rely on this order.
enum class Emotion : int {
  kNeutral = 0,
  kAngry = 1,
  kDisgusted = 2,
  kFear = 3,
  kHappy = 4,
  kSad = 5,
  kSurprised = 6,
};

inline constexpr int kNumEmotions = 7;

inline constexpr std::array<Emotion, kNumEmotions> kAllEmotions = {
    Emotion::kNeutral, Emotion::kAngry, Emotion::kDisgusted, Emotion::kFear,
    Emotion::kHappy,   Emotion::kSad,   Emotion::kSurprised};

constexpr int code(Emotion e) { return static_cast<int>(e); }

// Throws ContractError outside [0, 7).
Emotion emotion_from_code(int code);

std::string_view emotion_name(Emotion e);

// Accepts lower-case names as produced by emotion_name().
std::optional<Emotion> parse_emotion(std::string_view name);

// "a photo of a {emotion} face"
std::string emotion_prompt(Emotion e);

// Position of the emotion word inside emotion_prompt() under whitespace
// tokenization.
inline constexpr int kPromptEmotionPosition = 4;

}  // namespace emosup
