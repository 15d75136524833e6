#include "eegc/recording.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

namespace eegc {

std::string_view to_string(Gender g) {
  switch (g) {
    case Gender::female: return "female";
    case Gender::male: return "male";
    case Gender::unspecified: return "unspecified";
  }
  return "unspecified";
}

std::optional<Gender> gender_from_string(std::string_view s) {
  if (s == "female") return Gender::female;
  if (s == "male") return Gender::male;
  if (s == "unspecified") return Gender::unspecified;
  return std::nullopt;
}

void validate(const RawRecording& rec) {
  if (!(rec.sampling_rate_hz > 0.0) || !std::isfinite(rec.sampling_rate_hz)) {
    throw std::invalid_argument("sampling_rate_hz must be positive");
  }
  if (rec.age < 0) throw std::invalid_argument("age must be non-negative");
  if (rec.channels.empty()) {
    throw std::invalid_argument("recording has no channels");
  }
  std::set<std::string> names;
  const std::size_t n = rec.channels.front().samples.size();
  for (const auto& ch : rec.channels) {
    if (ch.name.empty()) throw std::invalid_argument("empty channel name");
    if (!names.insert(ch.name).second) {
      throw std::invalid_argument("duplicate channel name: " + ch.name);
    }
    if (ch.samples.size() != n) {
      throw std::invalid_argument("channel " + ch.name +
                                  " has a different sample count");
    }
    for (double v : ch.samples) {
      if (!std::isfinite(v)) {
        throw std::invalid_argument("channel " + ch.name +
                                    " contains a non-finite sample");
      }
    }
  }
  if (n < 2) throw std::invalid_argument("channels need at least 2 samples");
}

void to_json(nlohmann::json& j, const RawRecording& rec) {
  j = nlohmann::json::object();
  j["subject_id"] = rec.subject_id;
  j["gender"] = std::string(to_string(rec.gender));
  j["age"] = rec.age;
  j["facial_features"] = rec.facial_features
                             ? nlohmann::json(*rec.facial_features)
                             : nlohmann::json(nullptr);
  j["sampling_rate_hz"] = rec.sampling_rate_hz;
  auto chans = nlohmann::json::array();
  for (const auto& ch : rec.channels) {
    chans.push_back({{"name", ch.name}, {"samples", ch.samples}});
  }
  j["channels"] = std::move(chans);
  j["label"] = rec.label ? nlohmann::json(std::string(to_string(*rec.label)))
                         : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, RawRecording& rec) {
  if (!j.is_object()) throw std::invalid_argument("recording must be an object");
  rec = RawRecording{};
  rec.subject_id = j.value("subject_id", std::string{});
  const auto gender = j.at("gender").get<std::string>();
  auto g = gender_from_string(gender);
  if (!g) throw std::invalid_argument("gender: unknown value '" + gender + "'");
  rec.gender = *g;
  rec.age = j.at("age").get<int>();
  if (j.contains("facial_features") && !j["facial_features"].is_null()) {
    rec.facial_features = j["facial_features"].get<std::string>();
  }
  rec.sampling_rate_hz = j.at("sampling_rate_hz").get<double>();
  for (const auto& c : j.at("channels")) {
    rec.channels.push_back(
        {c.at("name").get<std::string>(), c.at("samples").get<std::vector<double>>()});
  }
  if (j.contains("label") && !j["label"].is_null()) {
    const auto name = j["label"].get<std::string>();
    auto e = emotion_from_string(name);
    if (!e) throw std::invalid_argument("label: unknown emotion '" + name + "'");
    rec.label = *e;
  }
}

RawRecording load_recording(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  RawRecording rec = nlohmann::json::parse(in).get<RawRecording>();
  validate(rec);
  return rec;
}

void save_recording(const RawRecording& rec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << nlohmann::json(rec).dump() << "\n";
}

}  // namespace eegc
