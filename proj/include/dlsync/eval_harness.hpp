#pragma once

// Unpaired evaluation protocol: video clips paired with audio from other
// videos, scored with a geometric lip-audio synchronization proxy
// (lag-maximized Pearson correlation of mouth aperture against audio
// energy). Proxy scores are not comparable to SyncNet-based LSE values.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dlsync/audio_features.hpp"
#include "dlsync/dataset_pipeline.hpp"
#include "dlsync/depth_renderer.hpp"
#include "dlsync/error.hpp"
#include "dlsync/histogram.hpp"
#include "dlsync/io_util.hpp"
#include "dlsync/parallel.hpp"

namespace dlsync {

inline constexpr int kDefaultMaxLag = 5;

struct EvalPair {
  std::size_t video_record = 0;  // manifest index
  std::size_t audio_record = 0;
  std::string video_id;
  std::string audio_id;
  int video_offset = 0;  // frames from the clip start
  int audio_offset = 0;
  double duration_s = 0;
};

enum class PairingMode { random, cyclic };

/// n seeded pairs whose video and audio come from different videos. Only
/// clips at least `duration_s` long are eligible; offsets are uniform over
/// the feasible range. In cyclic mode the video side walks the eligible
/// clips in order, so every clip is used before any repeats.
inline std::vector<EvalPair> build_unpaired_pairs(const ClipManifest& manifest, int n_pairs, double duration_s,
                                                  std::uint64_t seed, PairingMode mode = PairingMode::random) {
  if (n_pairs < 0) throw DomainError("pair count must be non-negative");
  if (!(duration_s > 0)) throw DomainError("pair duration must be positive");
  std::vector<std::size_t> eligible;
  std::set<std::string> videos;
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    if (manifest.records[i].duration_s() + 1e-9 >= duration_s) {
      eligible.push_back(i);
      videos.insert(manifest.records[i].video_id);
    }
  if (eligible.empty()) throw DomainError("no clip is at least " + io::format_double(duration_s) + " s long");
  if (videos.size() < 2) throw DomainError("unpaired evaluation needs at least 2 eligible videos");

  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t hi) { return std::uniform_int_distribution<std::size_t>(0, hi - 1)(rng); };
  std::vector<EvalPair> pairs;
  pairs.reserve(n_pairs);
  for (int k = 0; k < n_pairs; ++k) {
    const std::size_t v = mode == PairingMode::cyclic ? eligible[k % eligible.size()] : eligible[pick(eligible.size())];
    std::vector<std::size_t> others;
    for (std::size_t i : eligible)
      if (manifest.records[i].video_id != manifest.records[v].video_id) others.push_back(i);
    const std::size_t a = others[pick(others.size())];
    const auto& vr = manifest.records[v];
    const auto& ar = manifest.records[a];
    EvalPair p;
    p.video_record = v;
    p.audio_record = a;
    p.video_id = vr.video_id;
    p.audio_id = ar.video_id;
    p.duration_s = duration_s;
    const int vspan = vr.length() - static_cast<int>(std::llround(duration_s * vr.fps));
    const int aspan = ar.length() - static_cast<int>(std::llround(duration_s * ar.fps));
    p.video_offset = static_cast<int>(pick(static_cast<std::size_t>(std::max(vspan, 0)) + 1));
    p.audio_offset = static_cast<int>(pick(static_cast<std::size_t>(std::max(aspan, 0)) + 1));
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline void write_pairs_csv(const std::vector<EvalPair>& pairs, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << "pair,video_id,audio_id,video_offset,audio_offset,duration_s\n";
  for (std::size_t i = 0; i < pairs.size(); ++i)
    out << i << ',' << pairs[i].video_id << ',' << pairs[i].audio_id << ',' << pairs[i].video_offset << ','
        << pairs[i].audio_offset << ',' << io::format_double(pairs[i].duration_s) << '\n';
}

// ---------------------------------------------------------------------------
// Mouth aperture.

/// Which polygon points belong to the upper and lower lip. Empty vectors
/// select the default split: first half upper, second half lower.
struct LipPartition {
  std::vector<int> upper;
  std::vector<int> lower;
};

/// Distance between the upper-lip and lower-lip point centroids, divided by
/// the polygon's horizontal extent.
inline double mouth_opening(const MouthPolygon& poly, const LipPartition& part = {}) {
  poly.validate();
  const int n = static_cast<int>(poly.points.size());
  std::vector<int> upper = part.upper, lower = part.lower;
  if (upper.empty() && lower.empty()) {
    for (int i = 0; i < n / 2; ++i) upper.push_back(i);
    for (int i = n / 2; i < n; ++i) lower.push_back(i);
  }
  if (upper.empty() || lower.empty()) throw DomainError("lip partition needs upper and lower points");
  auto centroid = [&](const std::vector<int>& idx) {
    Point2 c;
    for (int i : idx) {
      if (i < 0 || i >= n) throw DomainError("lip partition index out of range");
      c.x += poly.points[i].x;
      c.y += poly.points[i].y;
    }
    c.x /= static_cast<double>(idx.size());
    c.y /= static_cast<double>(idx.size());
    return c;
  };
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& p : poly.points) {
    lo = std::min(lo, p.x);
    hi = std::max(hi, p.x);
  }
  const double width = hi - lo;
  if (!(width > 0)) throw DomainError("degenerate mouth polygon: zero width");
  const Point2 u = centroid(upper), l = centroid(lower);
  return std::hypot(u.x - l.x, u.y - l.y) / width;
}

inline std::vector<double> mouth_opening_series(const std::vector<MouthPolygon>& frames, const LipPartition& part = {}) {
  if (frames.empty()) throw DomainError("mouth series needs at least one frame");
  std::vector<double> s;
  s.reserve(frames.size());
  for (const auto& f : frames) s.push_back(mouth_opening(f, part));
  return s;
}

// ---------------------------------------------------------------------------
// Sync proxy.

struct SyncScore {
  double score = 0;
  int best_lag = 0;
};

/// Pearson correlation of (a[t], b[t + lag]) over the overlapping range,
/// or NaN when either side is constant there.
inline double lagged_pearson(const std::vector<double>& a, const std::vector<double>& b, int lag) {
  const int n = static_cast<int>(std::min(a.size(), b.size()));
  const int t0 = std::max(0, -lag), t1 = std::min(n, n - lag);
  if (t1 - t0 < 2) return std::numeric_limits<double>::quiet_NaN();
  double ma = 0, mb = 0;
  for (int t = t0; t < t1; ++t) {
    ma += a[t];
    mb += b[t + lag];
  }
  ma /= t1 - t0;
  mb /= t1 - t0;
  double sab = 0, saa = 0, sbb = 0;
  for (int t = t0; t < t1; ++t) {
    const double da = a[t] - ma, db = b[t + lag] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (!(saa > 0) || !(sbb > 0)) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

/// Maximum lagged correlation over lags in [-max_lag, max_lag]. Lags are
/// visited in the order 0, -1, +1, -2, +2, ... and only a strictly better
/// score replaces the incumbent, so ties resolve toward lag 0.
inline SyncScore sync_proxy_score(const std::vector<double>& mouth, const std::vector<double>& envelope,
                                  int max_lag = kDefaultMaxLag) {
  if (max_lag < 0) throw DomainError("max_lag must be non-negative");
  const std::size_t need = static_cast<std::size_t>(max_lag) + 2;
  if (mouth.size() < need || envelope.size() < need)
    throw DomainError("sync proxy needs series of length >= max_lag + 2");
  auto constant = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (constant(mouth) || constant(envelope)) throw DomainError("sync proxy is undefined for a constant series");
  SyncScore best{-std::numeric_limits<double>::infinity(), 0};
  for (int k = 0; k <= 2 * max_lag; ++k) {
    const int lag = k == 0 ? 0 : (k % 2 ? -(k + 1) / 2 : k / 2);
    const double r = lagged_pearson(mouth, envelope, lag);
    if (std::isnan(r)) continue;
    if (r > best.score) best = {r, lag};
  }
  if (!std::isfinite(best.score)) throw DomainError("sync proxy is undefined at every lag");
  return best;
}

// ---------------------------------------------------------------------------
// Distribution curves.

struct DistributionConfig {
  double lo = -1.0;
  double hi = 1.0;
  int bins = 20;
};

inline void write_cdf_csv(std::vector<double> scores, const std::filesystem::path& path) {
  std::sort(scores.begin(), scores.end());
  auto out = io::open_out(path);
  out << "score,cdf\n";
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i + 1 < scores.size() && scores[i + 1] == scores[i]) continue;
    out << io::format_double(scores[i]) << ',' << io::format_double(static_cast<double>(i + 1) / scores.size()) << '\n';
  }
}

/// Writes hist_<method>.csv and cdf_<method>.csv per method.
inline std::map<std::string, Histogram> emit_distribution(const std::map<std::string, std::vector<double>>& scores,
                                                          const std::filesystem::path& dir,
                                                          const DistributionConfig& cfg = {}) {
  if (scores.empty()) throw DomainError("no score sets to emit");
  std::map<std::string, Histogram> hists;
  for (const auto& [method, values] : scores) {
    if (values.empty()) throw DomainError("score set '" + method + "' is empty");
    auto h = make_histogram(values, uniform_edges(cfg.lo, cfg.hi, cfg.bins));
    write_histogram_csv(h, dir / ("hist_" + method + ".csv"));
    write_cdf_csv(values, dir / ("cdf_" + method + ".csv"));
    hists.emplace(method, std::move(h));
  }
  return hists;
}

// ---------------------------------------------------------------------------
// End-to-end scoring over manifest pairs.

struct SyncEvalOptions {
  int max_lag = kDefaultMaxLag;
  LogMelConfig logmel{};
  LipPartition lips{};
};

struct PairScores {
  std::vector<SyncScore> unpaired;  // video landmarks vs. audio of another video
  std::vector<SyncScore> paired;    // same clip's own audio at the same offset
};

namespace detail {

/// Landmarks and audio for every record a pair list touches, loaded once
/// up front so scoring can read them from several threads.
struct SourceCache {
  std::map<std::string, MouthTrack> mouths;
  std::map<std::string, AudioClip> audio;

  void load(const ClipRecord& r) {
    if (!mouths.count(r.landmarks)) mouths.emplace(r.landmarks, load_mouth_csv(r.landmarks));
    if (!audio.count(r.audio)) audio.emplace(r.audio, load_wav(r.audio));
  }
};

inline std::vector<double> mouth_series_for(const SourceCache& cache, const ClipRecord& r, int offset, int frames,
                                            const LipPartition& lips) {
  const auto& track = cache.mouths.at(r.landmarks);
  std::vector<MouthPolygon> polys;
  for (int f = 0; f < frames; ++f) polys.push_back(mouth_for_frame(track, r.start_frame + offset + f));
  return mouth_opening_series(polys, lips);
}

inline std::vector<double> envelope_for(const SourceCache& cache, const ClipRecord& r, int offset, int frames,
                                        const LogMelConfig& cfg) {
  const auto& clip = cache.audio.at(r.audio);
  const auto first = static_cast<std::size_t>(std::llround((r.start_frame + offset) / r.fps * clip.sample_rate));
  const auto count = static_cast<std::size_t>(std::llround(frames / r.fps * clip.sample_rate));
  if (first + count > clip.samples.size())
    throw FormatError("audio " + r.audio + " is shorter than its manifest clip");
  AudioClip slice{{clip.samples.begin() + static_cast<std::ptrdiff_t>(first),
                   clip.samples.begin() + static_cast<std::ptrdiff_t>(first + count)},
                  clip.sample_rate};
  auto env = energy_envelope(align_to_video(compute_logmel(slice, cfg), r.fps));
  env.resize(static_cast<std::size_t>(frames), env.empty() ? 0.0 : env.back());
  return env;
}

}  // namespace detail

/// Scores every pair twice: against the foreign audio it was paired with,
/// and against the video's own audio at the same offset. Results are
/// stored by pair index, so they do not depend on the thread count.
inline PairScores score_pairs(const ClipManifest& manifest, const std::vector<EvalPair>& pairs,
                              const SyncEvalOptions& opt = {}, int threads = 1) {
  detail::SourceCache cache;
  for (const auto& p : pairs) {
    cache.load(manifest.records.at(p.video_record));
    cache.load(manifest.records.at(p.audio_record));
  }
  PairScores out;
  out.unpaired.resize(pairs.size());
  out.paired.resize(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& p = pairs[i];
      const auto& vr = manifest.records[p.video_record];
      const auto& ar = manifest.records[p.audio_record];
      const int frames = static_cast<int>(std::llround(p.duration_s * vr.fps));
      const auto mouth = detail::mouth_series_for(cache, vr, p.video_offset, frames, opt.lips);
      out.unpaired[i] = sync_proxy_score(mouth, detail::envelope_for(cache, ar, p.audio_offset, frames, opt.logmel),
                                         opt.max_lag);
      out.paired[i] = sync_proxy_score(mouth, detail::envelope_for(cache, vr, p.video_offset, frames, opt.logmel),
                                       opt.max_lag);
    }
  });
  return out;
}

struct ScoreSummary {
  std::size_t count = 0;
  double mean = 0;
  double stddev = 0;
  double median = 0;
  double min = 0;
  double max = 0;
};

inline ScoreSummary summarize(std::vector<double> v) {
  if (v.empty()) throw DomainError("cannot summarize an empty score set");
  std::sort(v.begin(), v.end());
  ScoreSummary s;
  s.count = v.size();
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.stddev += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(s.stddev / static_cast<double>(v.size()));
  const std::size_t n = v.size();
  s.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  s.min = v.front();
  s.max = v.back();
  return s;
}

inline std::vector<double> score_values(const std::vector<SyncScore>& s) {
  std::vector<double> v;
  v.reserve(s.size());
  for (const auto& x : s) v.push_back(x.score);
  return v;
}

inline void write_scores_csv(const std::vector<EvalPair>& pairs, const PairScores& s, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << "pair,method,score,best_lag\n";
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    out << i << ",unpaired," << io::format_double(s.unpaired[i].score) << ',' << s.unpaired[i].best_lag << '\n';
    out << i << ",paired," << io::format_double(s.paired[i].score) << ',' << s.paired[i].best_lag << '\n';
  }
}

inline void write_summary(const std::map<std::string, std::vector<double>>& scores, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << "method,count,mean,stddev,median,min,max\n";
  for (const auto& [method, values] : scores) {
    const auto s = summarize(values);
    out << method << ',' << s.count << ',' << io::format_double(s.mean) << ',' << io::format_double(s.stddev) << ','
        << io::format_double(s.median) << ',' << io::format_double(s.min) << ',' << io::format_double(s.max) << '\n';
  }
}

}  // namespace dlsync
