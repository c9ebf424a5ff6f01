#pragma once

// Deterministic synthetic fixtures: a toy morphable model on a grid mesh,
// a talking-mouth clip with matching audio, and a small multi-video corpus
// for preprocessing and evaluation. Shared by the fixture tool and tests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dlsync/dlsync.hpp"

namespace dlsync::fixtures {

inline constexpr int kGrid = 12;
inline constexpr int kImageSize = 64;
inline constexpr int kClipFrames = 40;
inline constexpr int kSampleRate = 16000;
inline const Camera kCamera{28.0, 32.0, 32.0, 2.0};

// Mouth geometry in pixels.
inline constexpr double kMouthX = 32.0;
inline constexpr double kMouthY = 44.0;
inline constexpr double kMouthHalfWidth = 12.0;

/// Grid mesh over [-1, 1]^2 with a bowl-shaped mean and standard-sized bases.
/// Expression column 0 pushes the mouth region away from the camera.
inline BasisSet toy_basis(std::uint64_t seed = 7) {
  BasisSet b;
  b.vertex_count = kGrid * kGrid;
  b.identity_dims = kStandardIdentityDims;
  b.expression_dims = kStandardExpressionDims;
  const std::size_t rows = b.rows();
  b.mean_shape.resize(rows);
  b.identity_basis.resize(rows * b.identity_dims);
  b.expression_basis.resize(rows * b.expression_dims);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const double mouth_y = (kMouthY - kCamera.ty) / kCamera.scale;
  for (int j = 0; j < kGrid; ++j)
    for (int i = 0; i < kGrid; ++i) {
      const int v = j * kGrid + i;
      const double x = -1.0 + 2.0 * i / (kGrid - 1), y = -1.0 + 2.0 * j / (kGrid - 1);
      b.mean_shape[3 * v] = static_cast<float>(x);
      b.mean_shape[3 * v + 1] = static_cast<float>(y);
      b.mean_shape[3 * v + 2] = static_cast<float>(1.0 + 0.25 * (x * x + y * y));
      b.expression_basis[3 * v + 2] =
          static_cast<float>(0.3 * std::exp(-(x * x / 0.09 + (y - mouth_y) * (y - mouth_y) / 0.02)));
    }
  for (int k = 0; k < b.identity_dims; ++k)
    for (std::size_t r = 0; r < rows; ++r) b.identity_basis[k * rows + r] = static_cast<float>(0.002 * n01(rng));
  for (int k = 1; k < b.expression_dims; ++k)
    for (std::size_t r = 0; r < rows; ++r) b.expression_basis[k * rows + r] = static_cast<float>(0.001 * n01(rng));
  for (int j = 0; j + 1 < kGrid; ++j)
    for (int i = 0; i + 1 < kGrid; ++i) {
      const auto a = static_cast<std::uint32_t>(j * kGrid + i);
      b.triangles.push_back({a, a + 1, a + kGrid});
      b.triangles.push_back({a + 1, a + kGrid + 1, a + kGrid});
    }
  b.validate(true);
  return b;
}

inline IdentityCoeffs toy_identity(std::uint64_t seed = 11) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  IdentityCoeffs a;
  for (int k = 0; k < kStandardIdentityDims; ++k) a.values.push_back(n01(rng));
  return a;
}

/// Mouth aperture in [0, 1] for the fixture clip at time t (seconds).
inline double clip_opening(double t) { return 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * 2.0 * t); }

inline ExpressionTrack toy_expressions(int frames, double (*opening)(double), std::uint64_t seed = 13) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  ExpressionTrack track;
  for (int f = 0; f < frames; ++f) {
    ExpressionCoeffs c;
    c.values.push_back(opening(f / kVideoFps));
    for (int k = 1; k < kStandardExpressionDims; ++k) c.values.push_back(0.1 * n01(rng));
    track.frames.push_back(std::move(c));
  }
  return track;
}

/// 80-point closed mouth contour: points 0..39 trace the upper lip left to
/// right, 40..79 the lower lip right to left.
inline MouthPolygon mouth_polygon(double opening, double cx = kMouthX, double cy = kMouthY) {
  const double h = 1.5 + 5.0 * opening;
  MouthPolygon poly;
  for (int k = 0; k < 40; ++k) {
    const double th = std::numbers::pi * (1.0 - (k + 0.5) / 40.0);
    poly.points.push_back({cx + kMouthHalfWidth * std::cos(th), cy - h * std::sin(th)});
  }
  for (int k = 0; k < 40; ++k) {
    const double th = -std::numbers::pi * (k + 0.5) / 40.0;
    poly.points.push_back({cx + kMouthHalfWidth * std::cos(th), cy - h * std::sin(th)});
  }
  return poly;
}

/// Frame that is constant on every 8x8 block: skin tone with a gentle
/// gradient, darkened by the fraction of the block the mouth covers.
inline ImageFrame face_frame(const MouthPolygon& mouth) {
  ImageFrame img(kImageSize, kImageSize);
  const double skin[3] = {0.80, 0.62, 0.52}, lip[3] = {0.35, 0.08, 0.10};
  for (int by = 0; by < kImageSize / kLatentStride; ++by)
    for (int bx = 0; bx < kImageSize / kLatentStride; ++bx) {
      int inside = 0;
      for (int sy = 0; sy < 8; ++sy)
        for (int sx = 0; sx < 8; ++sx)
          inside += point_in_polygon(mouth, bx * 8.0 + sx + 0.5, by * 8.0 + sy + 0.5);
      const double cover = inside / 64.0;
      const double shade = 1.0 - 0.02 * by + 0.01 * bx;
      for (int c = 0; c < 3; ++c) {
        const double v = (1.0 - cover) * skin[c] * shade + cover * lip[c];
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) img.at(c, by * 8 + y, bx * 8 + x) = v;
      }
    }
  return img;
}

/// Harmonic tone whose amplitude follows the mouth opening, plus a little
/// seeded noise.
inline AudioClip voiced_audio(double seconds, double (*opening)(double), std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  AudioClip clip;
  clip.sample_rate = kSampleRate;
  const auto n = static_cast<std::size_t>(std::llround(seconds * kSampleRate));
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    const double amp = 0.05 + 0.6 * opening(t);
    const double tone = 0.6 * std::sin(2 * std::numbers::pi * 220 * t) + 0.3 * std::sin(2 * std::numbers::pi * 660 * t);
    clip.samples.push_back(std::clamp(amp * (tone + 0.05 * n01(rng)), -1.0, 1.0));
  }
  return clip;
}

/// The fixture clip in memory, with depth rendered and mouth-masked.
inline ClipData toy_clip(int threads = 1) {
  ClipData clip;
  clip.id = "clip";
  for (int f = 0; f < kClipFrames; ++f) {
    const auto poly = mouth_polygon(clip_opening(f / kVideoFps));
    clip.mouths.emplace(f, poly);
    clip.frames.push_back(face_frame(poly));
  }
  const auto basis = toy_basis();
  const auto maps = render_track(basis, toy_identity(), toy_expressions(kClipFrames, clip_opening), kCamera,
                                 kImageSize, kImageSize, threads);
  for (int f = 0; f < kClipFrames; ++f) clip.depth.push_back(mask_mouth_region(maps[f], clip.mouths.at(f)));
  clip.audio = align_to_video(compute_logmel(voiced_audio(kClipFrames / kVideoFps, clip_opening, 17)), kVideoFps);
  return clip;
}

// ---------------------------------------------------------------------------
// Multi-video corpus.

inline constexpr int kCorpusVideos = 4;
inline constexpr int kCorpusFrames = 300;  // 12 s at 25 fps

/// Per-video opening signal: a sum of three seeded sinusoids in [0, 1].
struct CorpusOpening {
  double freq[3], phase[3];

  static CorpusOpening make(int video) {
    std::mt19937_64 rng(derive_seed(101, static_cast<std::uint64_t>(video)));
    std::uniform_real_distribution<double> f(0.7, 3.5), p(0.0, 2 * std::numbers::pi);
    CorpusOpening o{};
    for (int k = 0; k < 3; ++k) {
      o.freq[k] = f(rng);
      o.phase[k] = p(rng);
    }
    return o;
  }
  double operator()(double t) const {
    double s = 0;
    for (int k = 0; k < 3; ++k) s += std::sin(2 * std::numbers::pi * freq[k] * t + phase[k]);
    return 0.5 + s / 6.0;
  }
};

inline std::string corpus_id(int video) { return "v0" + std::to_string(video); }

/// Writes the whole fixture tree under dir.
inline void write_all(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto basis = toy_basis();
  write_basis(basis, dir / "basis.dlb");
  write_coeff_rows(dir / "identity.csv", {toy_identity().values});
  std::vector<std::vector<double>> expr;
  for (const auto& f : toy_expressions(kClipFrames, clip_opening).frames) expr.push_back(f.values);
  write_coeff_rows(dir / "expr.csv", expr);

  const fs::path clip = dir / "clip";
  MouthTrack mouths;
  for (int f = 0; f < kClipFrames; ++f) {
    const auto poly = mouth_polygon(clip_opening(f / kVideoFps));
    mouths.emplace(f, poly);
    write_ppm(face_frame(poly), clip / "frames" / frame_name(f, "ppm"));
  }
  write_mouth_csv(mouths, clip / "mouth.csv");
  write_wav(voiced_audio(kClipFrames / kVideoFps, clip_opening, 17), clip / "audio.wav");

  auto tracks = io::open_out(dir / "tracks.csv");
  tracks << "video_id,fps,frame,face_count,x,y,w,h\n";
  auto meta = io::open_out(dir / "metadata.csv");
  meta << "video_id,account_id,single_face,audio_speaker_match,mouth_visible,clean_audio,gender\n";
  for (int v = 0; v < kCorpusVideos; ++v) {
    const std::string id = corpus_id(v);
    const auto opening = CorpusOpening::make(v);
    MouthTrack track;
    for (int f = 0; f < kCorpusFrames; ++f) track.emplace(f, mouth_polygon(opening(f / kVideoFps)));
    write_mouth_csv(track, dir / "videos" / id / "mouth.csv");
    std::mt19937_64 rng(derive_seed(202, static_cast<std::uint64_t>(v)));
    std::normal_distribution<double> n01(0.0, 1.0);
    AudioClip audio;
    audio.sample_rate = kSampleRate;
    for (int i = 0; i < kCorpusFrames * kSampleRate / 25; ++i) {
      const double t = static_cast<double>(i) / kSampleRate;
      const double amp = 0.05 + 0.6 * opening(t);
      audio.samples.push_back(std::clamp(amp * (0.7 * std::sin(2 * std::numbers::pi * (180 + 20 * v) * t) +
                                                0.05 * n01(rng)),
                                         -1.0, 1.0));
    }
    write_wav(audio, dir / "videos" / id / "audio.wav");
    for (int f = 0; f < kCorpusFrames; ++f) {
      // v00 has a two-face stretch and v03 starts without a face.
      const bool two = v == 0 && f >= 100 && f < 105;
      const bool none = v == 3 && f < 10;
      tracks << id << ",25," << f << ',' << (two ? 2 : none ? 0 : 1);
      if (two || none) tracks << ",,,,\n";
      else tracks << ",16,14," << 32 + 2 * v << ',' << 36 + v << '\n';
    }
    meta << id << ",acct" << v << ",1,1,1,1," << (v % 2 ? "f" : "m") << '\n';
  }
  meta << "v04,acct0,1,1,0,1,f\n";

  auto cfg = io::open_out(dir / "train.cfg");
  cfg << "# toy training run\noptimizer = adam\nlr = 1e-3\nbase-width = 8\n";
}

}  // namespace dlsync::fixtures
