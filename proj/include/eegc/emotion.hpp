#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace eegc {

// Nine-class label set; order is the canonical class index.
enum class Emotion {
  anger,
  disgust,
  fear,
  sadness,
  neutral,
  amusement,
  inspiration,
  joy,
  tenderness,
};

enum class Valence { negative, neutral, positive };

inline constexpr int kNumEmotions = 9;
inline constexpr int kNumValences = 3;

inline constexpr std::array<Emotion, kNumEmotions> kAllEmotions = {
    Emotion::anger,     Emotion::disgust,     Emotion::fear,
    Emotion::sadness,   Emotion::neutral,     Emotion::amusement,
    Emotion::inspiration, Emotion::joy,       Emotion::tenderness,
};

inline constexpr std::array<Valence, kNumValences> kAllValences = {
    Valence::negative, Valence::neutral, Valence::positive};

std::string_view to_string(Emotion e);
std::string_view to_string(Valence v);

// Exact (case-sensitive) name lookup.
std::optional<Emotion> emotion_from_string(std::string_view name);
std::optional<Valence> valence_from_string(std::string_view name);

// Total mapping: 4 negative, 4 positive, 1 neutral.
Valence coarse_label(Emotion e);

}  // namespace eegc
