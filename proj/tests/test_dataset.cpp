#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "eegc/dataset.hpp"

using namespace eegc;
namespace fs = std::filesystem;

namespace {

fs::path tmp_file(const std::string& name) {
  return fs::temp_directory_path() / ("eegc_test_" + name);
}

std::vector<std::string> one_line() { return {"Fp1: 7 7"}; }

// Power in [lo, hi) Hz by direct DFT (no FFT library; O(n·bins) is fine here).
double band_power(const std::vector<double>& x, double fs_hz, double lo, double hi) {
  const std::size_t n = x.size();
  double p = 0.0;
  for (std::size_t k = 1; k < n / 2; ++k) {
    const double f = k * fs_hz / n;
    if (f < lo || f >= hi) continue;
    std::complex<double> acc = 0.0;
    for (std::size_t t = 0; t < n; ++t)
      acc += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * k * t / n);
    p += std::norm(acc);
  }
  return p;
}

}  // namespace

TEST(Emotion, CoarseMappingPartitions) {
  EXPECT_EQ(coarse_label(Emotion::anger), Valence::negative);
  EXPECT_EQ(coarse_label(Emotion::neutral), Valence::neutral);
  EXPECT_EQ(coarse_label(Emotion::joy), Valence::positive);
  int counts[3] = {0, 0, 0};
  for (Emotion e : kAllEmotions) counts[static_cast<int>(coarse_label(e))]++;
  EXPECT_EQ(counts[static_cast<int>(Valence::negative)], 4);
  EXPECT_EQ(counts[static_cast<int>(Valence::positive)], 4);
  EXPECT_EQ(counts[static_cast<int>(Valence::neutral)], 1);
}

TEST(Emotion, NameRoundTrip) {
  for (Emotion e : kAllEmotions) EXPECT_EQ(emotion_from_string(to_string(e)), e);
  EXPECT_FALSE(emotion_from_string("happiness"));
}

TEST(BuildPrompt, ContainsDemographicLine) {
  const auto p = build_prompt({Gender::female, 23, "negative"}, one_line());
  EXPECT_NE(p.find("female, 23 years old, negative"), std::string::npos);
  EXPECT_EQ(p.rfind(std::string(kSystemPreamble), 0), 0u);
  EXPECT_EQ(p.substr(p.size() - 8), "Fp1: 7 7");
}

TEST(BuildPrompt, ExactLayout) {
  const std::vector<std::string> lines = {"Fp1: 1 2", "Cz: 3 4"};
  const auto p = build_prompt({Gender::male, 40, std::nullopt}, lines);
  EXPECT_EQ(p, std::string(kSystemPreamble) +
                   "\n\nPatient: male, 40 years old\n\nFp1: 1 2\nCz: 3 4");
}

TEST(BuildPrompt, Rejections) {
  EXPECT_THROW(build_prompt({Gender::female, 23, {}}, {}), std::invalid_argument);
  EXPECT_THROW(build_prompt({Gender::female, 151, {}}, one_line()), std::invalid_argument);
  EXPECT_NO_THROW(build_prompt({Gender::female, 150, {}}, one_line()));
}

TEST(BuildPrompt, DeterministicAndInjective) {
  const auto a = build_prompt({Gender::female, 23, "calm"}, one_line());
  EXPECT_EQ(a, build_prompt({Gender::female, 23, "calm"}, one_line()));
  std::set<std::string> seen;
  for (Gender g : {Gender::female, Gender::male, Gender::unspecified})
    for (int age : {0, 9, 23, 90, 150})
      for (std::optional<std::string> f : {std::optional<std::string>{},
                                          std::optional<std::string>{"calm"},
                                          std::optional<std::string>{"tense"}})
        EXPECT_TRUE(seen.insert(build_prompt({g, age, f}, one_line())).second);
}

TEST(Record, BuildValidates) {
  const auto p = build_prompt({Gender::male, 30, {}}, one_line());
  EXPECT_THROW(build_record(p, Emotion::joy, ""), std::invalid_argument);
  EXPECT_THROW(build_record("hello", Emotion::joy, "rest"), std::invalid_argument);
  const auto r = build_record(p, Emotion::joy, "rest");
  EXPECT_EQ(r.response(), "Emotion: joy\nTreatment: rest");
}

TEST(Jsonl, SingleRecordRoundTrip) {
  const auto path = tmp_file("one.jsonl");
  std::vector<PromptRecord> recs = {build_record(
      build_prompt({Gender::female, 23, "negative"}, one_line()), Emotion::sadness,
      std::string(treatment_template(Emotion::sadness)), {"s1", Method::W, 50})};
  emit_jsonl(recs, path.string());
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 1);
  EXPECT_EQ(load_jsonl(path.string()), recs);
  fs::remove(path);
}

TEST(Jsonl, ThousandRecordsOrderPreservedAndMultilineEscaped) {
  const auto path = tmp_file("many.jsonl");
  std::vector<PromptRecord> recs;
  for (int i = 0; i < 1000; ++i) {
    const Emotion e = kAllEmotions[i % kNumEmotions];
    recs.push_back(build_record(
        build_prompt({Gender::male, i % 100, {}}, one_line()), e,
        "line one " + std::to_string(i) + "\nline two", {"s" + std::to_string(i)}));
  }
  emit_jsonl(recs, path.string());
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 1000);
  EXPECT_EQ(load_jsonl(path.string()), recs);
  fs::remove(path);
}

TEST(Jsonl, InvalidUtf8AndBadPathRejected) {
  auto r = build_record(build_prompt({Gender::male, 30, {}}, one_line()),
                        Emotion::fear, "bad \xff\xfe bytes");
  std::vector<PromptRecord> recs = {r};
  const auto path = tmp_file("bad.jsonl");
  EXPECT_THROW(emit_jsonl(recs, path.string()), std::invalid_argument);
  EXPECT_FALSE(fs::exists(path));
  recs[0].treatment = "fine";
  EXPECT_THROW(emit_jsonl(recs, "/nonexistent-dir/x.jsonl"), std::runtime_error);
}

TEST(Synth, DeterministicAndBalanced) {
  SynthConfig cfg;
  const auto a = synth_generate(cfg);
  const auto b = synth_generate(cfg);
  ASSERT_EQ(a.size(), 9u);
  std::set<Emotion> labels;
  for (std::size_t i = 0; i < a.size(); ++i) {
    labels.insert(*a[i].label);
    ASSERT_EQ(a[i].channels.size(), b[i].channels.size());
    for (std::size_t c = 0; c < a[i].channels.size(); ++c)
      EXPECT_EQ(a[i].channels[c].samples, b[i].channels[c].samples);
  }
  EXPECT_EQ(labels.size(), 9u);

  cfg.n_subjects = 40;
  int counts[kNumEmotions] = {};
  for (const auto& r : synth_generate(cfg)) counts[static_cast<int>(*r.label)]++;
  for (int c : counts) {
    EXPECT_GE(c, 4);
    EXPECT_LE(c, 5);
  }
}

TEST(Synth, SubjectIndependentOfRunSize) {
  SynthConfig small, big;
  big.n_subjects = 30;
  const auto a = synth_generate(small);
  const auto b = synth_generate(big);
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_EQ(a[i].channels[0].samples, b[i].channels[0].samples);
}

TEST(Synth, DuplicateFrequencyRejected) {
  SynthConfig cfg;
  cfg.class_signature[Emotion::joy].dominant_freq_hz =
      cfg.class_signature[Emotion::anger].dominant_freq_hz;
  EXPECT_THROW(synth_generate(cfg), std::invalid_argument);
}

TEST(Synth, PeriodogramPeaksAtConfiguredFrequency) {
  SynthConfig cfg;
  cfg.class_signature[Emotion::joy].dominant_freq_hz = 12.0;
  cfg.duration_s = 4.0;
  const auto recs = synth_generate(cfg);
  const RawRecording* joy = nullptr;
  for (const auto& r : recs)
    if (*r.label == Emotion::joy) joy = &r;
  ASSERT_NE(joy, nullptr);
  const auto& x = joy->channels[0].samples;
  const std::size_t n = x.size();
  double best = -1.0, best_f = 0.0;
  for (std::size_t k = 1; k < n / 2; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t t = 0; t < n; ++t)
      acc += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * k * t / n);
    if (std::norm(acc) > best) {
      best = std::norm(acc);
      best_f = k * cfg.sampling_rate_hz / n;
    }
  }
  EXPECT_NEAR(best_f, 12.0, 1.0);
}

TEST(Synth, NearestCentroidBandPowerSeparates) {
  // 1 Hz-wide bands around each class frequency; train on the first 90
  // subjects, test on the next 90.
  SynthConfig cfg;
  cfg.n_subjects = 180;
  const auto recs = synth_generate(cfg);
  const auto sigs = SynthConfig::default_signatures();
  auto features = [&](const RawRecording& r) {
    std::vector<double> f;
    for (Emotion e : kAllEmotions) {
      const double f0 = sigs.at(e).dominant_freq_hz;
      double p = 0.0;
      for (const auto& ch : r.channels) p += band_power(ch.samples, 250.0, f0 - 1, f0 + 1);
      f.push_back(std::log(p + 1e-12));
    }
    return f;
  };
  std::vector<std::vector<double>> centroid(kNumEmotions, std::vector<double>(kNumEmotions, 0.0));
  std::vector<int> cnt(kNumEmotions, 0);
  for (int i = 0; i < 90; ++i) {
    const int c = static_cast<int>(*recs[i].label);
    const auto f = features(recs[i]);
    for (int j = 0; j < kNumEmotions; ++j) centroid[c][j] += f[j];
    cnt[c]++;
  }
  for (int c = 0; c < kNumEmotions; ++c)
    for (auto& v : centroid[c]) v /= cnt[c];
  int correct = 0;
  for (int i = 90; i < 180; ++i) {
    const auto f = features(recs[i]);
    int best = -1;
    double bd = 1e300;
    for (int c = 0; c < kNumEmotions; ++c) {
      double d = 0.0;
      for (int j = 0; j < kNumEmotions; ++j) d += (f[j] - centroid[c][j]) * (f[j] - centroid[c][j]);
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    correct += best == static_cast<int>(*recs[i].label);
  }
  EXPECT_GE(correct / 90.0, 0.95);
}

TEST(Corpus, RecordsFromSynthetic) {
  SynthConfig cfg;
  const auto recs = synth_generate(cfg);
  const auto corpus = build_corpus(recs, CompressionConfig{});
  ASSERT_EQ(corpus.size(), 9u);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(corpus[i].emotion, *recs[i].label);
    EXPECT_EQ(corpus[i].treatment, treatment_template(corpus[i].emotion));
    EXPECT_NE(corpus[i].prompt.find("\nFp1: "), std::string::npos);
    EXPECT_NE(corpus[i].prompt.find("\nOz: "), std::string::npos);
  }
}

TEST(Treatment, TemplatesDoNotNameEmotions) {
  // The first emotion word in a response must be the label itself.
  for (Emotion e : kAllEmotions) {
    std::string t(treatment_template(e));
    for (auto& ch : t) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    for (Emotion o : kAllEmotions)
      EXPECT_EQ(t.find(to_string(o)), std::string::npos) << to_string(e);
  }
}
