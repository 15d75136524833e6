#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eegc/compression.hpp"
#include "eegc/emotion.hpp"
#include "eegc/recording.hpp"

namespace eegc {

// Fixed system instruction that opens every prompt.
extern const std::string_view kSystemPreamble;

struct Demographics {
  Gender gender{Gender::unspecified};
  int age{0};
  std::optional<std::string> facial_features;
};

Demographics demographics_of(const RawRecording& rec);

// preamble, blank line, "Patient: <gender>, <age> years old[, <facial>]",
// blank line, then the channel lines in order.
std::string build_prompt(const Demographics& demo,
                         std::span<const std::string> channel_lines);

// Canonical treatment paragraph per emotion (synthetic training targets).
std::string_view treatment_template(Emotion e);

// Model response text: "Emotion: <label>\nTreatment: <treatment>".
std::string format_response(Emotion e, std::string_view treatment);

struct RecordMeta {
  std::string subject_id;
  Method method{Method::W};
  int target_len{50};
  bool operator==(const RecordMeta&) const = default;
};

struct PromptRecord {
  std::string prompt;
  Emotion emotion{Emotion::neutral};
  std::string treatment;
  RecordMeta meta;

  std::string response() const { return format_response(emotion, treatment); }
  bool operator==(const PromptRecord&) const = default;
};

// Throws if the prompt does not start with the preamble or treatment is empty.
PromptRecord build_record(std::string prompt, Emotion label,
                          std::string treatment, RecordMeta meta = {});

// One JSON object per line: {"prompt", "emotion", "treatment", "meta"}.
void emit_jsonl(std::span<const PromptRecord> records, const std::string& path);
std::vector<PromptRecord> load_jsonl(const std::string& path);

std::string record_to_json_line(const PromptRecord& r);
PromptRecord record_from_json_line(std::string_view line);

// ---------------------------------------------------------------------------
// Synthetic EEG
// ---------------------------------------------------------------------------

struct ClassSignature {
  double dominant_freq_hz{10.0};
  double amplitude{20.0};
  double noise_sigma{3.0};
};

struct SynthConfig {
  int n_subjects{9};
  std::vector<std::string> channels{"Fp1", "Fp2", "Cz", "Oz"};
  double sampling_rate_hz{250.0};
  double duration_s{1.0};
  std::uint64_t seed{42};
  std::map<Emotion, ClassSignature> class_signature = default_signatures();

  static std::map<Emotion, ClassSignature> default_signatures();
  void validate() const;
};

// Subject i gets emotion i mod 9 and is generated from its own stream seeded
// with seed + i, so any subset can be produced independently.
RawRecording synth_subject(const SynthConfig& cfg, int index);
std::vector<RawRecording> synth_generate(const SynthConfig& cfg);

// Labeled recordings -> prompt records with template treatments.
PromptRecord record_from_recording(const RawRecording& rec,
                                   const CompressionConfig& cfg);
std::vector<PromptRecord> build_corpus(std::span<const RawRecording> recs,
                                       const CompressionConfig& cfg);

}  // namespace eegc
