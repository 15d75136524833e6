#include "eegc/emotion.hpp"

namespace eegc {

std::string_view to_string(Emotion e) {
  switch (e) {
    case Emotion::anger: return "anger";
    case Emotion::disgust: return "disgust";
    case Emotion::fear: return "fear";
    case Emotion::sadness: return "sadness";
    case Emotion::neutral: return "neutral";
    case Emotion::amusement: return "amusement";
    case Emotion::inspiration: return "inspiration";
    case Emotion::joy: return "joy";
    case Emotion::tenderness: return "tenderness";
  }
  return "unknown";
}

std::string_view to_string(Valence v) {
  switch (v) {
    case Valence::negative: return "negative";
    case Valence::neutral: return "neutral";
    case Valence::positive: return "positive";
  }
  return "unknown";
}

std::optional<Emotion> emotion_from_string(std::string_view name) {
  for (Emotion e : kAllEmotions) {
    if (to_string(e) == name) return e;
  }
  return std::nullopt;
}

std::optional<Valence> valence_from_string(std::string_view name) {
  for (Valence v : kAllValences) {
    if (to_string(v) == name) return v;
  }
  return std::nullopt;
}

Valence coarse_label(Emotion e) {
  switch (e) {
    case Emotion::anger:
    case Emotion::disgust:
    case Emotion::fear:
    case Emotion::sadness:
      return Valence::negative;
    case Emotion::neutral:
      return Valence::neutral;
    case Emotion::amusement:
    case Emotion::inspiration:
    case Emotion::joy:
    case Emotion::tenderness:
      return Valence::positive;
  }
  return Valence::neutral;
}

}  // namespace eegc
