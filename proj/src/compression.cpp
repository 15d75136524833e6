#include "eegc/compression.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace eegc {

namespace {

// Orthonormal scaling filters, h[0] first (reconstruction low-pass order).
const std::array<double, 2> kHaar = {0.70710678118654752440,
                                     0.70710678118654752440};
const std::array<double, 8> kDb4 = {
    0.23037781330885523,  0.7148465705525415,   0.6308807679295904,
    -0.02798376941698385, -0.18703481171888114, 0.030841381835986965,
    0.032883011666982945, -0.010597401784997278};

}  // namespace

// ---------------------------------------------------------------------------

PreprocessResult preprocess(const RawRecording& rec,
                            const PreprocessOptions& opt) {
  validate(rec);
  PreprocessResult out{rec, false};
  auto& chans = out.recording.channels;
  const std::size_t n = rec.n_samples();

  if (opt.detrend) {
    // Least squares against the centered time index so the two basis vectors
    // are orthogonal.
    const double t_mean = (static_cast<double>(n) - 1.0) / 2.0;
    double t_ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) - t_mean;
      t_ss += t * t;
    }
    for (auto& ch : chans) {
      double mean = 0.0;
      for (double v : ch.samples) mean += v;
      mean /= static_cast<double>(n);
      double slope = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        slope += (static_cast<double>(i) - t_mean) * (ch.samples[i] - mean);
      }
      slope /= t_ss;
      for (std::size_t i = 0; i < n; ++i) {
        ch.samples[i] -= mean + slope * (static_cast<double>(i) - t_mean);
      }
    }
  }

  if (opt.average_reference) {
    if (chans.size() < 2) {
      out.reref_skipped = true;
    } else {
      const double inv = 1.0 / static_cast<double>(chans.size());
      for (std::size_t i = 0; i < n; ++i) {
        double m = 0.0;
        for (const auto& ch : chans) m += ch.samples[i];
        m *= inv;
        for (auto& ch : chans) ch.samples[i] -= m;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Method m) {
  return m == Method::W ? "W" : "WtoS";
}

std::string_view to_string(Wavelet w) {
  return w == Wavelet::haar ? "haar" : "db4";
}

std::optional<Method> method_from_string(std::string_view s) {
  if (s == "W") return Method::W;
  if (s == "WtoS" || s == "W->S") return Method::WtoS;
  return std::nullopt;
}

std::optional<Wavelet> wavelet_from_string(std::string_view s) {
  if (s == "haar") return Wavelet::haar;
  if (s == "db4") return Wavelet::db4;
  return std::nullopt;
}

CompressionConfig CompressionConfig::for_method(Method m) {
  CompressionConfig cfg;
  cfg.method = m;
  if (m == Method::WtoS) {
    cfg.target_len = 500;
    cfg.segments = 10;
  }
  return cfg;
}

void CompressionConfig::validate() const {
  if (target_len < 1) throw std::invalid_argument("target_len must be positive");
  if (segments < 1) throw std::invalid_argument("segments must be positive");
  if (quant_bins < 2) throw std::invalid_argument("quant_bins must be >= 2");
  if (method == Method::WtoS && target_len % segments != 0) {
    throw std::invalid_argument("target_len must be divisible by segments");
  }
}

std::span<const double> scaling_filter(Wavelet w) {
  if (w == Wavelet::haar) return kHaar;
  return kDb4;
}

DwtLevel dwt_level(std::span<const double> x, Wavelet w) {
  if (x.empty()) throw std::invalid_argument("dwt_level: empty input");
  std::vector<double> padded(x.begin(), x.end());
  if (padded.size() % 2 == 1) padded.push_back(padded.back());

  const auto h = scaling_filter(w);
  const std::size_t taps = h.size();
  const std::size_t n = padded.size();
  const std::size_t half = n / 2;

  DwtLevel out;
  out.approx.assign(half, 0.0);
  out.detail.assign(half, 0.0);
  for (std::size_t k = 0; k < half; ++k) {
    double a = 0.0;
    double d = 0.0;
    for (std::size_t t = 0; t < taps; ++t) {
      const double v = padded[(2 * k + t) % n];
      a += h[t] * v;
      // Quadrature mirror: g[t] = (-1)^t h[taps-1-t]
      const double g = (t % 2 == 0 ? 1.0 : -1.0) * h[taps - 1 - t];
      d += g * v;
    }
    out.approx[k] = a;
    out.detail[k] = d;
  }
  return out;
}

std::vector<double> linear_resample(std::span<const double> x, std::size_t n) {
  if (x.empty()) throw std::invalid_argument("linear_resample: empty input");
  if (n == 0) return {};
  std::vector<double> out(n);
  if (x.size() == 1 || n == 1) {
    std::fill(out.begin(), out.end(), x.front());
    return out;
  }
  if (x.size() == n) return {x.begin(), x.end()};
  const double step =
      static_cast<double>(x.size() - 1) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = step * static_cast<double>(i);
    const auto lo = std::min(static_cast<std::size_t>(pos), x.size() - 2);
    const double frac = pos - static_cast<double>(lo);
    out[i] = x[lo] * (1.0 - frac) + x[lo + 1] * frac;
  }
  return out;
}

std::vector<double> dwt_compress(std::span<const double> samples,
                                 const CompressionConfig& cfg) {
  cfg.validate();
  const auto target = static_cast<std::size_t>(cfg.target_len);
  if (samples.size() < target) {
    throw std::invalid_argument("signal shorter than target");
  }
  std::vector<double> approx(samples.begin(), samples.end());
  while (approx.size() >= 2 * target) {
    approx = dwt_level(approx, cfg.wavelet).approx;
  }
  if (approx.size() == target) return approx;
  return linear_resample(approx, target);
}

std::vector<int> quantize(std::span<const double> values, int bins) {
  if (values.empty()) throw std::invalid_argument("quantize: empty input");
  if (bins < 2) throw std::invalid_argument("quantize: bins must be >= 2");
  double max_abs = 0.0;
  for (double v : values) max_abs = std::max(max_abs, std::abs(v));
  std::vector<int> out(values.size());
  if (max_abs == 0.0) {
    std::fill(out.begin(), out.end(), bins / 2);
    return out;
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double unit = (values[i] / max_abs + 1.0) * 0.5;  // [0, 1]
    const auto q = static_cast<int>(std::floor(unit * bins));
    out[i] = std::clamp(q, 0, bins - 1);
  }
  return out;
}

CompressedChannel compress_channel(const Channel& ch,
                                   const CompressionConfig& cfg) {
  CompressedChannel out;
  out.name = ch.name;
  out.values = dwt_compress(ch.samples, cfg);
  out.quantized = quantize(out.values, cfg.quant_bins);
  return out;
}

namespace {

void append_values(std::string& line, std::span<const int> values) {
  for (int q : values) {
    line += ' ';
    line += std::to_string(q);
  }
}

}  // namespace

std::string serialize_channel(const CompressedChannel& ch) {
  std::string line = ch.name + ":";
  append_values(line, ch.quantized);
  return line;
}

std::vector<std::string> segment_serialize(const CompressedChannel& ch,
                                           const CompressionConfig& cfg) {
  cfg.validate();
  const auto n = ch.quantized.size();
  const auto segs = static_cast<std::size_t>(cfg.segments);
  if (n % segs != 0) {
    throw std::invalid_argument("channel length not divisible by segments");
  }
  const std::size_t len = n / segs;
  std::vector<std::string> lines;
  lines.reserve(segs);
  for (std::size_t k = 0; k < segs; ++k) {
    std::string line = ch.name + "[" + std::to_string(k + 1) + "]:";
    append_values(line, std::span<const int>(ch.quantized).subspan(k * len, len));
    lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<std::string> channel_lines(const CompressedChannel& ch,
                                       const CompressionConfig& cfg) {
  if (cfg.method == Method::W) return {serialize_channel(ch)};
  return segment_serialize(ch, cfg);
}

ParsedChannelLine parse_channel_line(std::string_view line) {
  const auto colon = line.find(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw std::invalid_argument("channel line missing '<name>:' prefix");
  }
  ParsedChannelLine out;
  std::string_view head = line.substr(0, colon);
  if (head.back() == ']') {
    const auto open = head.find('[');
    if (open == std::string_view::npos || open == 0) {
      throw std::invalid_argument("malformed segment index");
    }
    int seg = 0;
    const auto idx = head.substr(open + 1, head.size() - open - 2);
    auto [p, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), seg);
    if (ec != std::errc{} || p != idx.data() + idx.size()) {
      throw std::invalid_argument("malformed segment index");
    }
    out.segment = seg;
    head = head.substr(0, open);
  }
  out.name = std::string(head);
  std::string_view rest = line.substr(colon + 1);
  std::size_t i = 0;
  while (i < rest.size()) {
    if (rest[i] == ' ') {
      ++i;
      continue;
    }
    int v = 0;
    auto [p, ec] = std::from_chars(rest.data() + i, rest.data() + rest.size(), v);
    if (ec != std::errc{}) {
      throw std::invalid_argument("non-integer value in channel line");
    }
    out.values.push_back(v);
    i = static_cast<std::size_t>(p - rest.data());
  }
  return out;
}

std::vector<std::string> compress_recording(const RawRecording& rec,
                                            const CompressionConfig& cfg) {
  cfg.validate();
  const auto pre = preprocess(rec);
  std::vector<std::string> lines;
  for (const auto& ch : pre.recording.channels) {
    auto chunk = channel_lines(compress_channel(ch, cfg), cfg);
    lines.insert(lines.end(), std::make_move_iterator(chunk.begin()),
                 std::make_move_iterator(chunk.end()));
  }
  return lines;
}

}  // namespace eegc
