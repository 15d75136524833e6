#include "eegc/dataset.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace eegc {

const std::string_view kSystemPreamble =
    "You are an EEG emotion analyzer. I will input the patient's personal "
    "information and EEG signals from specific electrode positions. Please "
    "infer the patient's current emotional state and provide a detailed "
    "diagnosis along with personalized treatments based on your knowledge "
    "base.";

Demographics demographics_of(const RawRecording& rec) {
  return {rec.gender, rec.age, rec.facial_features};
}

std::string build_prompt(const Demographics& demo,
                         std::span<const std::string> channel_lines) {
  if (channel_lines.empty()) {
    throw std::invalid_argument("build_prompt: at least one channel line required");
  }
  if (demo.age < 0 || demo.age > 150) {
    throw std::invalid_argument("build_prompt: age out of range [0, 150]");
  }
  std::string out(kSystemPreamble);
  out += "\n\nPatient: ";
  out += to_string(demo.gender);
  out += ", ";
  out += std::to_string(demo.age);
  out += " years old";
  if (demo.facial_features && !demo.facial_features->empty()) {
    out += ", ";
    out += *demo.facial_features;
  }
  out += "\n\n";
  for (std::size_t i = 0; i < channel_lines.size(); ++i) {
    if (i > 0) out += '\n';
    out += channel_lines[i];
  }
  return out;
}

std::string_view treatment_template(Emotion e) {
  switch (e) {
    case Emotion::anger:
      return "Recommend temper control counseling, slow breathing exercises, "
             "regular physical activity and a follow-up visit in two weeks.";
    case Emotion::disgust:
      return "Recommend cognitive reappraisal sessions, gradual exposure "
             "exercises, calm breathing practice and a follow-up visit in two "
             "weeks.";
    case Emotion::fear:
      return "Recommend anxiety counseling, relaxation training, slow "
             "breathing exercises, good sleep habits and a follow-up visit in "
             "one week.";
    case Emotion::sadness:
      return "Recommend supportive psychotherapy, daily physical activity, "
             "social contact, good sleep habits and a follow-up visit in one "
             "week.";
    case Emotion::neutral:
      return "No intervention is needed. Recommend routine emotional health "
             "monitoring and a follow-up visit in one month.";
    case Emotion::amusement:
      return "Positive state. Recommend maintaining social activities, "
             "regular rest and routine monitoring with a follow-up visit in "
             "one month.";
    case Emotion::inspiration:
      return "Positive state. Recommend goal setting, creative activities, "
             "regular rest and routine monitoring with a follow-up visit in "
             "one month.";
    case Emotion::joy:
      return "Positive state. Recommend maintaining current habits, physical "
             "activity, regular rest and a follow-up visit in one month.";
    case Emotion::tenderness:
      return "Positive state. Recommend family and social contact, relaxation "
             "practice, regular rest and a follow-up visit in one month.";
  }
  return "";
}

std::string format_response(Emotion e, std::string_view treatment) {
  std::string out = "Emotion: ";
  out += to_string(e);
  out += "\nTreatment: ";
  out += treatment;
  return out;
}

PromptRecord build_record(std::string prompt, Emotion label,
                          std::string treatment, RecordMeta meta) {
  if (!prompt.starts_with(kSystemPreamble)) {
    throw std::invalid_argument("prompt must begin with the system preamble");
  }
  if (treatment.empty()) throw std::invalid_argument("treatment is empty");
  return {std::move(prompt), label, std::move(treatment), std::move(meta)};
}

std::string record_to_json_line(const PromptRecord& r) {
  nlohmann::json j;
  j["prompt"] = r.prompt;
  j["emotion"] = std::string(to_string(r.emotion));
  j["treatment"] = r.treatment;
  j["meta"] = {{"subject_id", r.meta.subject_id},
               {"method", std::string(to_string(r.meta.method))},
               {"target_len", r.meta.target_len}};
  try {
    return j.dump();
  } catch (const nlohmann::json::type_error& e) {
    throw std::invalid_argument(std::string("invalid UTF-8 in record: ") + e.what());
  }
}

PromptRecord record_from_json_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  const auto name = j.at("emotion").get<std::string>();
  const auto e = emotion_from_string(name);
  if (!e) throw std::invalid_argument("unknown emotion '" + name + "'");
  RecordMeta meta;
  if (j.contains("meta")) {
    const auto& m = j["meta"];
    meta.subject_id = m.value("subject_id", std::string{});
    const auto method = method_from_string(m.value("method", std::string("W")));
    if (!method) throw std::invalid_argument("unknown compression method");
    meta.method = *method;
    meta.target_len = m.value("target_len", 50);
  }
  return {j.at("prompt").get<std::string>(), *e,
          j.at("treatment").get<std::string>(), std::move(meta)};
}

void emit_jsonl(std::span<const PromptRecord> records, const std::string& path) {
  // Serialize first so an encoding error never leaves a partial file.
  std::string body;
  for (const auto& r : records) {
    body += record_to_json_line(r);
    body += '\n';
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << body;
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<PromptRecord> load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<PromptRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(record_from_json_line(line));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::map<Emotion, ClassSignature> SynthConfig::default_signatures() {
  // Positive classes low, neutral in the middle, negative classes high; 2 Hz
  // spacing keeps every class below the Nyquist rate of the 50-point
  // compressed view of a 1 s window.
  return {
      {Emotion::tenderness, {3.0, 20.0, 3.0}},
      {Emotion::amusement, {5.0, 20.0, 3.0}},
      {Emotion::inspiration, {7.0, 20.0, 3.0}},
      {Emotion::joy, {9.0, 20.0, 3.0}},
      {Emotion::neutral, {11.0, 20.0, 3.0}},
      {Emotion::sadness, {13.0, 20.0, 3.0}},
      {Emotion::fear, {15.0, 20.0, 3.0}},
      {Emotion::disgust, {17.0, 20.0, 3.0}},
      {Emotion::anger, {19.0, 20.0, 3.0}},
  };
}

void SynthConfig::validate() const {
  if (n_subjects < 1) throw std::invalid_argument("n_subjects must be positive");
  if (channels.empty()) throw std::invalid_argument("no channels configured");
  if (!(sampling_rate_hz > 0.0)) {
    throw std::invalid_argument("sampling_rate_hz must be positive");
  }
  if (sampling_rate_hz * duration_s < 2.0) {
    throw std::invalid_argument("duration too short for 2 samples");
  }
  std::set<double> freqs;
  for (Emotion e : kAllEmotions) {
    const auto it = class_signature.find(e);
    if (it == class_signature.end()) {
      throw std::invalid_argument("missing class signature for " +
                                  std::string(to_string(e)));
    }
    if (!freqs.insert(it->second.dominant_freq_hz).second) {
      throw std::invalid_argument("duplicate dominant frequency " +
                                  std::to_string(it->second.dominant_freq_hz));
    }
  }
}

namespace {

const std::vector<std::string>& facial_feature_pool() {
  static const std::vector<std::string> pool = {
      "calm", "tense", "smiling", "frowning", "tired", "relaxed"};
  return pool;
}

}  // namespace

RawRecording synth_subject(const SynthConfig& cfg, int index) {
  std::mt19937_64 rng(cfg.seed + static_cast<std::uint64_t>(index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Emotion label = kAllEmotions[static_cast<std::size_t>(index) % kNumEmotions];
  const ClassSignature sig = cfg.class_signature.at(label);

  RawRecording rec;
  rec.subject_id = "synth-" + std::to_string(index);
  rec.gender = unit(rng) < 0.5 ? Gender::female : Gender::male;
  rec.age = 18 + static_cast<int>(unit(rng) * 43.0);
  const auto& pool = facial_feature_pool();
  rec.facial_features = pool[static_cast<std::size_t>(unit(rng) * pool.size()) % pool.size()];
  rec.sampling_rate_hz = cfg.sampling_rate_hz;
  rec.label = label;

  const auto n = static_cast<std::size_t>(
      std::llround(cfg.sampling_rate_hz * cfg.duration_s));
  std::normal_distribution<double> noise(0.0, sig.noise_sigma);
  for (const auto& name : cfg.channels) {
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    const double gain = 0.8 + 0.4 * unit(rng);
    Channel ch{name, std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / cfg.sampling_rate_hz;
      ch.samples[i] =
          gain * sig.amplitude *
              std::sin(2.0 * std::numbers::pi * sig.dominant_freq_hz * t + phase) +
          noise(rng);
    }
    rec.channels.push_back(std::move(ch));
  }
  return rec;
}

std::vector<RawRecording> synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<RawRecording> out;
  out.reserve(static_cast<std::size_t>(cfg.n_subjects));
  for (int i = 0; i < cfg.n_subjects; ++i) out.push_back(synth_subject(cfg, i));
  return out;
}

PromptRecord record_from_recording(const RawRecording& rec,
                                   const CompressionConfig& cfg) {
  if (!rec.label) throw std::invalid_argument("recording has no label");
  const auto lines = compress_recording(rec, cfg);
  auto prompt = build_prompt(demographics_of(rec), lines);
  return build_record(std::move(prompt), *rec.label,
                      std::string(treatment_template(*rec.label)),
                      {rec.subject_id, cfg.method, cfg.target_len});
}

std::vector<PromptRecord> build_corpus(std::span<const RawRecording> recs,
                                       const CompressionConfig& cfg) {
  std::vector<PromptRecord> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(record_from_recording(r, cfg));
  return out;
}

}  // namespace eegc
