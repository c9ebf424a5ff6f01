#pragma once

// Preprocessing: curation filters, single-face clip segmentation, frame
// sampling, face cropping, clip manifests and dataset statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <numeric>
#include <random>
#include <ranges>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "dlsync/error.hpp"
#include "dlsync/histogram.hpp"
#include "dlsync/image.hpp"
#include "dlsync/io_util.hpp"
#include "dlsync/random.hpp"

namespace dlsync {

inline constexpr int kDefaultMinClipFrames = 25;
inline constexpr int kDefaultFrameCap = 10000;

struct Box {
  double x = 0, y = 0, w = 0, h = 0;
  friend bool operator==(const Box&, const Box&) = default;
};

/// Per-frame face detections for one video.
struct FaceTrack {
  std::vector<int> counts;
  std::vector<std::optional<Box>> boxes;
  double fps = 25.0;

  void validate() const {
    if (counts.size() != boxes.size()) throw FormatError("face track counts and boxes differ in length");
    if (!(fps > 0)) throw DomainError("face track fps must be positive");
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (counts[i] < 0) throw FormatError("negative face count");
      if ((counts[i] == 1) != boxes[i].has_value())
        throw FormatError("frame " + std::to_string(i) + ": box must be present iff exactly one face");
    }
  }
};

// ---------------------------------------------------------------------------
// Segmentation and sampling.

/// Maximal runs of single-face frames, as half-open [start, end) ranges,
/// keeping runs of at least min_len frames.
inline std::vector<std::pair<int, int>> segment_clips(const FaceTrack& track, int min_len = kDefaultMinClipFrames) {
  track.validate();
  std::vector<std::pair<int, int>> runs;
  const int n = static_cast<int>(track.counts.size());
  int start = -1;
  for (int i = 0; i <= n; ++i) {
    const bool single = i < n && track.counts[i] == 1;
    if (single && start < 0) start = i;
    if (!single && start >= 0) {
      if (i - start >= min_len) runs.emplace_back(start, i);
      start = -1;
    }
  }
  return runs;
}

/// All indices when length <= cap, otherwise a seeded uniform sample of
/// `cap` distinct indices without replacement, in ascending order.
inline std::vector<int> sample_frames(int length, int cap, std::uint64_t seed) {
  if (cap < 1) throw DomainError("frame cap must be >= 1");
  if (length < 0) throw DomainError("negative clip length");
  std::vector<int> out;
  out.reserve(std::min(length, cap));
  if (length <= cap) {
    for (int i = 0; i < length; ++i) out.push_back(i);
    return out;
  }
  std::mt19937_64 rng(seed);
  std::vector<int> all(static_cast<std::size_t>(length));
  std::iota(all.begin(), all.end(), 0);
  std::ranges::sample(all, std::back_inserter(out), cap, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Cropping.

/// Crops `box` out of the frame and resizes it to out_w x out_h with
/// bilinear sampling; samples outside the frame read as 0. Output pixel i
/// samples source x = box.x + (i + 0.5) * box.w / out_w - 0.5.
inline ImageFrame crop_face(const ImageFrame& frame, const Box& box, int out_w, int out_h) {
  if (!(box.w > 0) || !(box.h > 0)) throw DomainError("crop box dimensions must be positive");
  if (out_w <= 0 || out_h <= 0) throw DomainError("crop output size must be positive");
  if (box.x >= frame.width || box.y >= frame.height || box.x + box.w <= 0 || box.y + box.h <= 0)
    throw DomainError("crop box does not intersect the frame");
  auto fetch = [&](int c, int y, int x) {
    return (x < 0 || y < 0 || x >= frame.width || y >= frame.height) ? 0.0 : frame.at(c, y, x);
  };
  ImageFrame out(out_w, out_h);
  for (int j = 0; j < out_h; ++j) {
    const double sy = box.y + (j + 0.5) * box.h / out_h - 0.5;
    const int y0 = static_cast<int>(std::floor(sy));
    const double fy = sy - y0;
    for (int i = 0; i < out_w; ++i) {
      const double sx = box.x + (i + 0.5) * box.w / out_w - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const double fx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        double v = (1 - fy) * (1 - fx) * fetch(c, y0, x0);
        if (fx != 0) v += (1 - fy) * fx * fetch(c, y0, x0 + 1);
        if (fy != 0) v += fy * (1 - fx) * fetch(c, y0 + 1, x0);
        if (fx != 0 && fy != 0) v += fy * fx * fetch(c, y0 + 1, x0 + 1);
        out.at(c, j, i) = v;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Curation.

struct CurationRecord {
  std::string video_id;
  std::string account_id;
  std::optional<bool> single_face;
  std::optional<bool> audio_speaker_match;
  std::optional<bool> mouth_visible;
  std::optional<bool> clean_audio;
  std::string gender;  // optional, carried through only
};

struct CurationDecision {
  bool accepted = false;
  std::string reason;  // empty when accepted
};

/// Stateful filter: a record is accepted when every flag holds and no
/// previously accepted record came from the same account.
class CurationFilter {
 public:
  CurationDecision evaluate(const CurationRecord& r) {
    if (r.account_id.empty()) throw FormatError("curation record " + r.video_id + " lacks an account id");
    if (!r.single_face || !r.audio_speaker_match || !r.mouth_visible || !r.clean_audio)
      throw FormatError("curation record " + r.video_id + " lacks one or more criterion flags");
    if (seen_accounts_.count(r.account_id)) return {false, "duplicate-account"};
    if (!*r.single_face) return {false, "multiple-faces"};
    if (!*r.audio_speaker_match) return {false, "audio-speaker-mismatch"};
    if (!*r.mouth_visible) return {false, "mouth-not-visible"};
    if (!*r.clean_audio) return {false, "noisy-audio"};
    seen_accounts_.insert(r.account_id);
    return {true, {}};
  }

 private:
  std::set<std::string> seen_accounts_;
};

inline CurationDecision apply_curation_filters(CurationFilter& filter, const CurationRecord& r) {
  return filter.evaluate(r);
}

// ---------------------------------------------------------------------------
// Simple header-driven CSV table.

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name, bool required = true) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    if (required) throw FormatError("CSV is missing column '" + name + "'");
    return -1;
  }
};

inline CsvTable read_csv_table(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  CsvTable t;
  std::string line;
  while (std::getline(in, line)) {
    const auto trimmed = io::trim(line);
    if (trimmed.empty() || trimmed.front() == '#') continue;
    auto fields = io::split(trimmed);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size())
      throw FormatError(path.string() + ": row has " + std::to_string(fields.size()) + " fields, header has " +
                        std::to_string(t.header.size()));
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw FormatError("CSV has no header: " + path.string());
  return t;
}

inline std::optional<bool> parse_flag(const std::string& s) {
  if (s == "1" || s == "true") return true;
  if (s == "0" || s == "false") return false;
  if (s.empty()) return std::nullopt;
  throw FormatError("boolean field must be 0/1/true/false, got '" + s + "'");
}

inline std::vector<CurationRecord> load_curation_csv(const std::filesystem::path& path) {
  const auto t = read_csv_table(path);
  const int vid = t.column("video_id"), acc = t.column("account_id"), sf = t.column("single_face"),
            asm_ = t.column("audio_speaker_match"), mv = t.column("mouth_visible"), ca = t.column("clean_audio"),
            g = t.column("gender", false);
  std::vector<CurationRecord> out;
  for (const auto& r : t.rows)
    out.push_back({r[vid], r[acc], parse_flag(r[sf]), parse_flag(r[asm_]), parse_flag(r[mv]), parse_flag(r[ca]),
                   g >= 0 ? r[g] : std::string{}});
  return out;
}

/// Tracks CSV with header video_id,fps,frame,face_count,x,y,w,h. Box
/// fields are empty unless face_count is 1. Frames of a video must be
/// listed contiguously from 0.
inline std::map<std::string, FaceTrack> load_face_tracks(const std::filesystem::path& path) {
  const auto t = read_csv_table(path);
  const int vid = t.column("video_id"), fps = t.column("fps"), fr = t.column("frame"), fc = t.column("face_count"),
            cx = t.column("x"), cy = t.column("y"), cw = t.column("w"), ch = t.column("h");
  std::map<std::string, FaceTrack> tracks;
  for (const auto& r : t.rows) {
    auto& tr = tracks[r[vid]];
    const double rate = io::parse_double(r[fps], "tracks fps");
    if (tr.counts.empty()) tr.fps = rate;
    else if (rate != tr.fps) throw FormatError("video " + r[vid] + " has inconsistent fps");
    if (io::parse_int(r[fr], "tracks frame") != static_cast<long long>(tr.counts.size()))
      throw FormatError("video " + r[vid] + ": frames must be contiguous from 0");
    const int count = static_cast<int>(io::parse_int(r[fc], "tracks face_count"));
    tr.counts.push_back(count);
    if (r[cx].empty() && r[cy].empty() && r[cw].empty() && r[ch].empty()) {
      tr.boxes.emplace_back();
    } else {
      tr.boxes.push_back(Box{io::parse_double(r[cx], "box x"), io::parse_double(r[cy], "box y"),
                             io::parse_double(r[cw], "box w"), io::parse_double(r[ch], "box h")});
    }
  }
  for (auto& [id, tr] : tracks) tr.validate();
  return tracks;
}

// ---------------------------------------------------------------------------
// Manifest.

struct ClipRecord {
  std::string video_id;
  int clip_id = 0;
  int start_frame = 0;
  int end_frame = 0;  // exclusive
  double fps = 25.0;
  std::vector<double> face_sizes;  // max(w, h) per frame, pixels
  std::string frames_dir;
  std::string landmarks;
  std::string audio;
  std::string gender;

  int length() const { return end_frame - start_frame; }
  double duration_s() const { return length() / fps; }
};

struct ClipManifest {
  std::vector<ClipRecord> records;

  void sort() {
    std::sort(records.begin(), records.end(), [](const ClipRecord& a, const ClipRecord& b) {
      return std::tie(a.video_id, a.clip_id) < std::tie(b.video_id, b.clip_id);
    });
  }
  void validate() const {
    for (const auto& r : records) {
      if (r.end_frame <= r.start_frame) throw FormatError("manifest record " + r.video_id + " has end <= start");
      if (!(r.fps > 0)) throw FormatError("manifest record " + r.video_id + " has non-positive fps");
    }
  }
};

inline constexpr const char* kManifestHeader =
    "video_id,clip_id,start_frame,end_frame,fps,duration_s,face_sizes,frames_dir,landmarks,audio,gender";

inline void write_manifest(const ClipManifest& m, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << kManifestHeader << '\n';
  for (const auto& r : m.records) {
    std::string sizes;
    for (std::size_t i = 0; i < r.face_sizes.size(); ++i) sizes += (i ? ";" : "") + io::format_double(r.face_sizes[i]);
    out << r.video_id << ',' << r.clip_id << ',' << r.start_frame << ',' << r.end_frame << ','
        << io::format_double(r.fps) << ',' << io::format_double(r.duration_s()) << ',' << sizes << ','
        << r.frames_dir << ',' << r.landmarks << ',' << r.audio << ',' << r.gender << '\n';
  }
}

inline ClipManifest read_manifest(const std::filesystem::path& path) {
  const auto t = read_csv_table(path);
  const int vid = t.column("video_id"), cid = t.column("clip_id"), s = t.column("start_frame"),
            e = t.column("end_frame"), fps = t.column("fps"), fs = t.column("face_sizes", false),
            fd = t.column("frames_dir", false), lm = t.column("landmarks", false), au = t.column("audio", false),
            g = t.column("gender", false);
  ClipManifest m;
  for (const auto& r : t.rows) {
    ClipRecord c;
    c.video_id = r[vid];
    c.clip_id = static_cast<int>(io::parse_int(r[cid], "manifest clip_id"));
    c.start_frame = static_cast<int>(io::parse_int(r[s], "manifest start_frame"));
    c.end_frame = static_cast<int>(io::parse_int(r[e], "manifest end_frame"));
    c.fps = io::parse_double(r[fps], "manifest fps");
    if (fs >= 0 && !r[fs].empty())
      for (const auto& v : io::split(r[fs], ';')) c.face_sizes.push_back(io::parse_double(v, "manifest face_sizes"));
    if (fd >= 0) c.frames_dir = r[fd];
    if (lm >= 0) c.landmarks = r[lm];
    if (au >= 0) c.audio = r[au];
    if (g >= 0) c.gender = r[g];
    m.records.push_back(std::move(c));
  }
  m.validate();
  return m;
}

struct PreprocessOptions {
  int min_len = kDefaultMinClipFrames;
  int frame_cap = kDefaultFrameCap;
  std::uint64_t seed = 0;
};

struct PreprocessResult {
  ClipManifest manifest;
  std::vector<std::pair<std::string, int>> samples;  // (video id, absolute frame)
  std::vector<std::pair<std::string, std::string>> rejected;  // (video id, reason)
};

/// Curation (when metadata is given), clip segmentation and per-video frame
/// sampling. Videos are processed in sorted id order, so the output is
/// deterministic given the seed.
inline PreprocessResult preprocess(const std::map<std::string, FaceTrack>& tracks,
                                   const std::vector<CurationRecord>* curation,
                                   const std::filesystem::path& frames_root, const PreprocessOptions& opt) {
  PreprocessResult res;
  std::map<std::string, CurationRecord> meta;
  std::set<std::string> accepted;
  if (curation) {
    CurationFilter filter;
    for (const auto& r : *curation) {
      meta[r.video_id] = r;
      const auto d = filter.evaluate(r);
      if (d.accepted) accepted.insert(r.video_id);
      else res.rejected.emplace_back(r.video_id, d.reason);
    }
  }
  std::uint64_t video_index = 0;
  for (const auto& [id, track] : tracks) {
    const std::uint64_t stream = video_index++;
    if (curation) {
      if (!meta.count(id)) {
        res.rejected.emplace_back(id, "missing-metadata");
        continue;
      }
      if (!accepted.count(id)) continue;
    }
    const auto runs = segment_clips(track, opt.min_len);
    std::vector<int> pool;
    int clip_id = 0;
    for (const auto& [s, e] : runs) {
      ClipRecord r;
      r.video_id = id;
      r.clip_id = clip_id++;
      r.start_frame = s;
      r.end_frame = e;
      r.fps = track.fps;
      for (int f = s; f < e; ++f) {
        r.face_sizes.push_back(std::max(track.boxes[f]->w, track.boxes[f]->h));
        pool.push_back(f);
      }
      const auto base = frames_root / id;
      r.frames_dir = (base / "frames").generic_string();
      r.landmarks = (base / "mouth.csv").generic_string();
      r.audio = (base / "audio.wav").generic_string();
      if (curation) r.gender = meta[id].gender;
      res.manifest.records.push_back(std::move(r));
    }
    for (int k : sample_frames(static_cast<int>(pool.size()), opt.frame_cap, derive_seed(opt.seed, stream)))
      res.samples.emplace_back(id, pool[k]);
  }
  res.manifest.sort();
  return res;
}

// ---------------------------------------------------------------------------
// Statistics.

struct StatsConfig {
  std::vector<double> duration_edges{0, 30, 60, 120, 300, 600, 1200, 1800, 3600, 7200};
  std::vector<double> fps_edges{0, 24.5, 25.5, 29.5, 30.5, 49.5, 50.5, 59.5, 60.5, 240};
  std::vector<double> face_size_edges{0, 64, 128, 192, 256, 384, 512, 768, 1024, 2048};
};

struct DatasetStats {
  Histogram durations;
  Histogram fps;
  Histogram face_sizes;
  long long record_count = 0;
  long long video_count = 0;
  double total_seconds = 0;

  double total_hours() const { return total_seconds / 3600.0; }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// One entry per record on every axis; a record's face size is the median
/// of its per-frame face sizes.
inline DatasetStats compute_statistics(const ClipManifest& m, const StatsConfig& cfg = {}) {
  if (m.records.empty()) throw DomainError("cannot compute statistics of an empty manifest");
  std::vector<double> d, f, s;
  std::set<std::string> videos;
  DatasetStats st;
  for (const auto& r : m.records) {
    d.push_back(r.duration_s());
    f.push_back(r.fps);
    s.push_back(median(r.face_sizes));
    videos.insert(r.video_id);
    st.total_seconds += r.duration_s();
  }
  st.durations = make_histogram(d, cfg.duration_edges);
  st.fps = make_histogram(f, cfg.fps_edges);
  st.face_sizes = make_histogram(s, cfg.face_size_edges);
  st.record_count = static_cast<long long>(m.records.size());
  st.video_count = static_cast<long long>(videos.size());
  return st;
}

inline void write_statistics(const DatasetStats& st, const std::filesystem::path& dir) {
  write_histogram_csv(st.durations, dir / "hist_duration.csv");
  write_histogram_csv(st.fps, dir / "hist_fps.csv");
  write_histogram_csv(st.face_sizes, dir / "hist_face_size.csv");
  auto out = io::open_out(dir / "summary.txt");
  out << "records " << st.record_count << "\nvideos " << st.video_count << "\ntotal_seconds "
      << io::format_double(st.total_seconds) << "\ntotal_hours " << io::format_double(st.total_hours()) << '\n';
}

}  // namespace dlsync
