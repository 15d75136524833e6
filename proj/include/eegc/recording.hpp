#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "eegc/emotion.hpp"

namespace eegc {

enum class Gender { female, male, unspecified };

std::string_view to_string(Gender g);
std::optional<Gender> gender_from_string(std::string_view s);

struct Channel {
  std::string name;
  std::vector<double> samples;  // microvolts
};

// One labeled (or unlabeled) multichannel segment plus the demographics that
// go into the prompt header.
struct RawRecording {
  std::string subject_id;
  Gender gender{Gender::unspecified};
  int age{0};
  std::optional<std::string> facial_features;
  double sampling_rate_hz{0.0};
  std::vector<Channel> channels;
  std::optional<Emotion> label;

  std::size_t n_channels() const { return channels.size(); }
  std::size_t n_samples() const {
    return channels.empty() ? 0 : channels.front().samples.size();
  }
};

// Throws std::invalid_argument naming the first violated invariant.
void validate(const RawRecording& rec);

// JSON schema: {"subject_id": str, "gender": "female"|"male"|"unspecified",
// "age": int, "facial_features": str|null, "sampling_rate_hz": number,
// "channels": [{"name": str, "samples": [number...]}], "label": str|null}
void to_json(nlohmann::json& j, const RawRecording& rec);
void from_json(const nlohmann::json& j, RawRecording& rec);

RawRecording load_recording(const std::string& path);
void save_recording(const RawRecording& rec, const std::string& path);

}  // namespace eegc
