#pragma once

// Deterministic log-mel audio front-end standing in for a pretrained speech
// encoder, plus video-rate alignment and an energy envelope.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "dlsync/error.hpp"
#include "dlsync/io_util.hpp"
#include "dlsync/parallel.hpp"

namespace dlsync {

inline constexpr double kVideoFps = 25.0;

struct AudioClip {
  std::vector<double> samples;  // mono, [-1, 1]
  int sample_rate = 16000;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
  void validate() const {
    if (sample_rate <= 0) throw DomainError("sample rate must be positive");
    if (samples.empty()) throw DomainError("audio clip is empty");
  }
};

/// F x K matrix of log-mel energies, row-major.
struct AudioFeatures {
  int frame_count = 0;
  int band_count = 0;
  double frame_rate = 0.0;
  double duration_s = 0.0;  // duration of the source audio
  double floor = 1e-10;
  std::vector<double> values;

  const double* row(int f) const { return values.data() + static_cast<std::size_t>(f) * band_count; }
  double* row(int f) { return values.data() + static_cast<std::size_t>(f) * band_count; }
  double at(int f, int k) const { return row(f)[k]; }
  bool empty() const { return frame_count == 0; }
};

struct LogMelConfig {
  int fft_size = 512;
  int hop = 0;  // 0: sample_rate / 25, so rows align with 25 fps video
  int band_count = 80;
  double fmin = 0.0;
  double fmax = 0.0;  // 0: Nyquist
  double floor = 1e-10;
};

// ---------------------------------------------------------------------------
// WAV (RIFF, PCM16, mono).

inline AudioClip load_wav(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  char tag[4];
  auto read_tag = [&](const char* what) {
    if (!in.read(tag, 4)) throw FormatError(std::string("truncated WAV: missing ") + what);
  };
  read_tag("RIFF header");
  if (std::memcmp(tag, "RIFF", 4) != 0) throw FormatError("not a RIFF file: " + path.string());
  (void)io::read_le<std::uint32_t>(in, "RIFF size");
  read_tag("WAVE tag");
  if (std::memcmp(tag, "WAVE", 4) != 0) throw FormatError("not a WAVE file: " + path.string());

  bool have_fmt = false;
  AudioClip clip;
  while (true) {
    if (!in.read(tag, 4)) break;
    const auto size = io::read_le<std::uint32_t>(in, "chunk size");
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError("WAV fmt chunk too short");
      const auto format = io::read_le<std::uint16_t>(in, "fmt");
      const auto channels = io::read_le<std::uint16_t>(in, "fmt");
      const auto rate = io::read_le<std::uint32_t>(in, "fmt");
      (void)io::read_le<std::uint32_t>(in, "fmt");
      (void)io::read_le<std::uint16_t>(in, "fmt");
      const auto bits = io::read_le<std::uint16_t>(in, "fmt");
      in.ignore(size - 16 + (size & 1));
      if (format != 1) throw FormatError("unsupported WAV format (only PCM16 is supported)");
      if (channels != 1) throw FormatError("unsupported WAV format: " + std::to_string(channels) + " channels (mono required)");
      if (bits != 16) throw FormatError("unsupported WAV format: " + std::to_string(bits) + "-bit samples");
      if (rate == 0) throw FormatError("WAV sample rate is zero");
      clip.sample_rate = static_cast<int>(rate);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("WAV data chunk precedes fmt chunk");
      if (size % 2 != 0) throw FormatError("WAV data chunk has odd length");
      std::vector<std::int16_t> pcm(size / 2);
      if (!in.read(reinterpret_cast<char*>(pcm.data()), size)) throw FormatError("truncated WAV data chunk");
      clip.samples.resize(pcm.size());
      for (std::size_t i = 0; i < pcm.size(); ++i) clip.samples[i] = pcm[i] / 32768.0;
      return clip;
    } else {
      in.ignore(size + (size & 1));
      if (!in) throw FormatError("truncated WAV chunk");
    }
  }
  throw FormatError("WAV file has no data chunk: " + path.string());
}

inline void write_wav(const AudioClip& clip, const std::filesystem::path& path) {
  if (clip.sample_rate <= 0) throw DomainError("sample rate must be positive");
  auto out = io::open_out(path);
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  out.write("RIFF", 4);
  io::write_le<std::uint32_t>(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  io::write_le<std::uint32_t>(out, 16);
  io::write_le<std::uint16_t>(out, 1);
  io::write_le<std::uint16_t>(out, 1);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  io::write_le<std::uint16_t>(out, 2);
  io::write_le<std::uint16_t>(out, 16);
  out.write("data", 4);
  io::write_le<std::uint32_t>(out, data_bytes);
  for (double s : clip.samples) {
    const double q = std::round(std::clamp(s, -1.0, 1.0) * 32768.0);
    io::write_le<std::int16_t>(out, static_cast<std::int16_t>(std::clamp(q, -32768.0, 32767.0)));
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Spectral helpers.

namespace detail {

/// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    for (std::size_t i = 0; i < n; i += len)
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> w = std::polar(1.0, ang * static_cast<double>(k));
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
  }
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct ResolvedConfig {
  int fft_size, hop, band_count;
  double fmin, fmax, floor;
};

inline ResolvedConfig resolve(const LogMelConfig& cfg, int sample_rate) {
  if (sample_rate <= 0) throw DomainError("sample rate must be positive");
  if (cfg.fft_size < 2 || (cfg.fft_size & (cfg.fft_size - 1)) != 0)
    throw DomainError("fft_size must be a power of two");
  int hop = cfg.hop;
  if (hop == 0) {
    if (sample_rate % 25 != 0) throw DomainError("default hop needs a sample rate divisible by 25");
    hop = sample_rate / 25;
  }
  if (hop <= 0) throw DomainError("hop must be positive");
  if (cfg.band_count <= 0) throw DomainError("band_count must be positive");
  const double nyquist = sample_rate / 2.0;
  const double fmax = cfg.fmax == 0.0 ? nyquist : cfg.fmax;
  if (!(cfg.fmin >= 0 && cfg.fmin < fmax && fmax <= nyquist))
    throw DomainError("need 0 <= fmin < fmax <= sample_rate / 2");
  if (!(cfg.floor > 0)) throw DomainError("energy floor must be positive");
  return {cfg.fft_size, hop, cfg.band_count, cfg.fmin, fmax, cfg.floor};
}

}  // namespace detail

/// Center frequencies (Hz) of the triangular mel filters, in band order.
inline std::vector<double> mel_band_centers(const LogMelConfig& cfg, int sample_rate) {
  const auto rc = detail::resolve(cfg, sample_rate);
  const double lo = detail::hz_to_mel(rc.fmin), hi = detail::hz_to_mel(rc.fmax);
  std::vector<double> centers(rc.band_count);
  for (int b = 0; b < rc.band_count; ++b)
    centers[b] = detail::mel_to_hz(lo + (hi - lo) * (b + 1) / (rc.band_count + 1));
  return centers;
}

/// Hann-windowed magnitude STFT -> unit-peak triangular mel filterbank ->
/// log(energy + floor). Frame f covers samples [f*hop, f*hop + fft_size),
/// zero-padded past the end; F = floor(samples / hop).
inline AudioFeatures compute_logmel(const AudioClip& clip, const LogMelConfig& cfg = {}, int threads = 1) {
  clip.validate();
  const auto rc = detail::resolve(cfg, clip.sample_rate);
  const int n_fft = rc.fft_size;
  const int bins = n_fft / 2 + 1;

  std::vector<double> window(n_fft);
  double window_energy = 0;
  for (int i = 0; i < n_fft; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n_fft);
    window_energy += window[i] * window[i];
  }

  // Filter weights, band-major.
  const double lo = detail::hz_to_mel(rc.fmin), hi = detail::hz_to_mel(rc.fmax);
  std::vector<double> edges(rc.band_count + 2);
  for (int i = 0; i < rc.band_count + 2; ++i)
    edges[i] = detail::mel_to_hz(lo + (hi - lo) * i / (rc.band_count + 1));
  std::vector<double> weights(static_cast<std::size_t>(rc.band_count) * bins, 0.0);
  for (int b = 0; b < rc.band_count; ++b)
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * clip.sample_rate / n_fft;
      double w = 0;
      if (f > edges[b] && f <= edges[b + 1]) w = (f - edges[b]) / (edges[b + 1] - edges[b]);
      else if (f > edges[b + 1] && f < edges[b + 2]) w = (edges[b + 2] - f) / (edges[b + 2] - edges[b + 1]);
      weights[static_cast<std::size_t>(b) * bins + k] = w;
    }

  AudioFeatures feats;
  feats.frame_count = static_cast<int>(clip.samples.size() / rc.hop);
  feats.band_count = rc.band_count;
  feats.frame_rate = static_cast<double>(clip.sample_rate) / rc.hop;
  feats.duration_s = clip.duration();
  feats.floor = rc.floor;
  feats.values.assign(static_cast<std::size_t>(feats.frame_count) * rc.band_count, 0.0);

  parallel_for(static_cast<std::size_t>(feats.frame_count), threads, [&](std::size_t begin, std::size_t end) {
    std::vector<std::complex<double>> buf(n_fft);
    std::vector<double> power(bins);
    for (std::size_t f = begin; f < end; ++f) {
      const std::size_t start = f * rc.hop;
      for (int i = 0; i < n_fft; ++i) {
        const std::size_t s = start + i;
        buf[i] = s < clip.samples.size() ? clip.samples[s] * window[i] : 0.0;
      }
      detail::fft(buf);
      for (int k = 0; k < bins; ++k) power[k] = std::norm(buf[k]) / window_energy;
      double* out = feats.row(static_cast<int>(f));
      for (int b = 0; b < rc.band_count; ++b) {
        const double* w = weights.data() + static_cast<std::size_t>(b) * bins;
        double e = 0;
        for (int k = 0; k < bins; ++k) e += w[k] * power[k];
        out[b] = std::log(e + rc.floor);
      }
    }
  });
  return feats;
}

/// Resamples feature rows to one row per video frame by nearest-time
/// selection. Output length is floor(duration * fps).
inline AudioFeatures align_to_video(const AudioFeatures& feats, double video_fps = kVideoFps) {
  if (!(video_fps > 0)) throw DomainError("video frame rate must be positive");
  if (feats.empty()) throw DomainError("cannot align empty audio features");
  const auto rows = static_cast<long long>(std::floor(feats.duration_s * video_fps + 1e-9));
  if (rows <= 0) throw DomainError("audio is shorter than one video frame");
  AudioFeatures out = feats;
  out.frame_count = static_cast<int>(rows);
  out.frame_rate = video_fps;
  out.values.assign(static_cast<std::size_t>(rows) * feats.band_count, 0.0);
  const double ratio = feats.frame_rate / video_fps;
  for (long long j = 0; j < rows; ++j) {
    const auto src = std::clamp<long long>(std::llround(static_cast<double>(j) * ratio), 0, feats.frame_count - 1);
    std::copy_n(feats.row(static_cast<int>(src)), feats.band_count, out.row(static_cast<int>(j)));
  }
  return out;
}

/// Mean band energy per frame, exp(logmel) - floor, clamped at zero.
inline std::vector<double> energy_envelope(const AudioFeatures& feats) {
  if (feats.empty()) throw DomainError("cannot compute the envelope of empty features");
  std::vector<double> env(feats.frame_count);
  for (int f = 0; f < feats.frame_count; ++f) {
    double sum = 0;
    for (int k = 0; k < feats.band_count; ++k) sum += std::max(0.0, std::exp(feats.at(f, k)) - feats.floor);
    env[f] = sum / feats.band_count;
  }
  return env;
}

/// Rows [first, first + count) of the features, clamping indices at the
/// ends (edge replication).
inline std::vector<double> feature_window(const AudioFeatures& feats, int first, int count) {
  if (feats.empty()) throw DomainError("empty audio features");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(count) * feats.band_count);
  for (int i = 0; i < count; ++i) {
    const int r = std::clamp(first + i, 0, feats.frame_count - 1);
    out.insert(out.end(), feats.row(r), feats.row(r) + feats.band_count);
  }
  return out;
}

inline void write_features_csv(const AudioFeatures& feats, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  for (int f = 0; f < feats.frame_count; ++f) {
    for (int k = 0; k < feats.band_count; ++k) out << (k ? "," : "") << io::format_double(feats.at(f, k));
    out << '\n';
  }
}

}  // namespace dlsync
