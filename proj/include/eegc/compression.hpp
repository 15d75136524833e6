#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eegc/recording.hpp"

namespace eegc {

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

struct PreprocessOptions {
  bool detrend{true};
  bool average_reference{true};
};

struct PreprocessResult {
  RawRecording recording;
  // Set when common-average referencing was requested but refused because the
  // recording has fewer than two channels.
  bool reref_skipped{false};
};

// Per-channel least-squares linear detrend followed by common-average
// re-reference. Both steps are orthogonal projections, so the composition is
// idempotent.
PreprocessResult preprocess(const RawRecording& rec,
                            const PreprocessOptions& opt = {});

// ---------------------------------------------------------------------------
// Wavelet compression
// ---------------------------------------------------------------------------

enum class Method { W, WtoS };
enum class Wavelet { haar, db4 };

std::string_view to_string(Method m);
std::string_view to_string(Wavelet w);
std::optional<Method> method_from_string(std::string_view s);
std::optional<Wavelet> wavelet_from_string(std::string_view s);

struct CompressionConfig {
  Method method{Method::W};
  int target_len{50};
  int segments{1};
  Wavelet wavelet{Wavelet::haar};
  int quant_bins{256};

  // W: 50 points, 1 segment. WtoS: 500 points in 10 segments of 50.
  static CompressionConfig for_method(Method m);
  void validate() const;
};

// Scaling (low-pass) filter taps of the orthonormal wavelet.
std::span<const double> scaling_filter(Wavelet w);

struct DwtLevel {
  std::vector<double> approx;
  std::vector<double> detail;
};

// One analysis level with periodized boundaries. Odd-length input is first
// extended by repeating the last sample. The transform is orthogonal on the
// (padded) input, so ||approx||^2 + ||detail||^2 == ||padded input||^2.
DwtLevel dwt_level(std::span<const double> x, Wavelet w);

// Keep approximation coefficients until target <= L < 2*target, then
// linearly resample to exactly target_len points.
std::vector<double> dwt_compress(std::span<const double> samples,
                                 const CompressionConfig& cfg);

// Linear interpolation onto n evenly spaced points spanning the input.
std::vector<double> linear_resample(std::span<const double> x, std::size_t n);

// Max-abs normalization to [-1, 1] then uniform binning into [0, bins-1].
std::vector<int> quantize(std::span<const double> values, int bins);

struct CompressedChannel {
  std::string name;
  std::vector<double> values;
  std::vector<int> quantized;
};

CompressedChannel compress_channel(const Channel& ch,
                                   const CompressionConfig& cfg);

// "<name>: q1 q2 ... qN"
std::string serialize_channel(const CompressedChannel& ch);

// `segments` lines "<name>[k]: ..." (k = 1..segments) of consecutive chunks.
std::vector<std::string> segment_serialize(const CompressedChannel& ch,
                                           const CompressionConfig& cfg);

// Dispatches on cfg.method.
std::vector<std::string> channel_lines(const CompressedChannel& ch,
                                       const CompressionConfig& cfg);

struct ParsedChannelLine {
  std::string name;
  std::optional<int> segment;  // 1-based, WtoS only
  std::vector<int> values;
};

ParsedChannelLine parse_channel_line(std::string_view line);

// preprocess -> compress every channel -> serialized prompt lines.
std::vector<std::string> compress_recording(const RawRecording& rec,
                                            const CompressionConfig& cfg);

}  // namespace eegc
