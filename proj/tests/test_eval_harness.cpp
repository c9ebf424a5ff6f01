#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "dlsync/eval_harness.hpp"
#include "fixture_gen.hpp"
#include "test_support.hpp"

using namespace dlsync;
using dlsync::testing::ScratchDir;

namespace {

ClipManifest synthetic_manifest(int videos, int frames = 500, int clips_per_video = 1) {
  ClipManifest m;
  for (int v = 0; v < videos; ++v)
    for (int c = 0; c < clips_per_video; ++c) {
      ClipRecord r;
      r.video_id = "vid" + std::to_string(v);
      r.clip_id = c;
      r.start_frame = c * frames;
      r.end_frame = (c + 1) * frames;
      m.records.push_back(r);
    }
  return m;
}

std::vector<double> ar1_series(std::mt19937_64& rng, int n, double rho = 0.5) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> s(n);
  double x = 0;
  for (auto& v : s) v = x = rho * x + n01(rng);
  return s;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::istringstream in(dlsync::testing::slurp(p));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pair construction.

TEST(UnpairedPairs, NoSelfPairsAcrossManyDraws) {
  const auto m = synthetic_manifest(10, 400, 2);
  for (auto mode : {PairingMode::random, PairingMode::cyclic}) {
    const auto pairs = build_unpaired_pairs(m, 1000, 10.0, 3, mode);
    ASSERT_EQ(pairs.size(), 1000u);
    for (const auto& p : pairs) {
      EXPECT_NE(p.video_id, p.audio_id);
      EXPECT_EQ(m.records[p.video_record].video_id, p.video_id);
      EXPECT_EQ(m.records[p.audio_record].video_id, p.audio_id);
    }
  }
}

TEST(UnpairedPairs, ProtocolCounts) {
  const auto m = synthetic_manifest(12, 300);
  for (int n : {500, 900}) {
    const auto pairs = build_unpaired_pairs(m, n, 10.0, 1);
    EXPECT_EQ(pairs.size(), static_cast<std::size_t>(n));
    for (const auto& p : pairs) EXPECT_EQ(p.duration_s, 10.0);
  }
}

TEST(UnpairedPairs, TwoVideosAlwaysCross) {
  const auto m = synthetic_manifest(2, 300);
  for (const auto& p : build_unpaired_pairs(m, 50, 4.0, 7)) {
    EXPECT_TRUE((p.video_id == "vid0" && p.audio_id == "vid1") || (p.video_id == "vid1" && p.audio_id == "vid0"));
  }
}

TEST(UnpairedPairs, OffsetsKeepWindowInsideClip) {
  const auto m = synthetic_manifest(5, 300);
  for (const auto& p : build_unpaired_pairs(m, 300, 10.0, 9)) {
    EXPECT_GE(p.video_offset, 0);
    EXPECT_LE(p.video_offset + 250, m.records[p.video_record].length());
    EXPECT_LE(p.audio_offset + 250, m.records[p.audio_record].length());
  }
}

TEST(UnpairedPairs, CyclicModeVisitsEveryClipBeforeRepeating) {
  const auto m = synthetic_manifest(6, 300);
  const auto pairs = build_unpaired_pairs(m, 12, 10.0, 2, PairingMode::cyclic);
  for (std::size_t k = 0; k < pairs.size(); ++k) EXPECT_EQ(pairs[k].video_record, k % 6);
}

TEST(UnpairedPairs, SeedDeterminesPairs) {
  const auto m = synthetic_manifest(8, 300);
  const auto a = build_unpaired_pairs(m, 100, 10.0, 4), b = build_unpaired_pairs(m, 100, 10.0, 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].video_record, b[i].video_record);
    EXPECT_EQ(a[i].audio_record, b[i].audio_record);
    EXPECT_EQ(a[i].video_offset, b[i].video_offset);
  }
}

TEST(UnpairedPairs, InfeasibleRequestsRejected) {
  EXPECT_THROW(build_unpaired_pairs(synthetic_manifest(1, 300), 5, 10.0, 0), DomainError);
  EXPECT_THROW(build_unpaired_pairs(synthetic_manifest(4, 100), 5, 10.0, 0), DomainError);  // 4 s clips
  EXPECT_THROW(build_unpaired_pairs(synthetic_manifest(4, 300), 5, 0.0, 0), DomainError);
  EXPECT_THROW(build_unpaired_pairs(synthetic_manifest(4, 300), -1, 10.0, 0), DomainError);
  // One long video plus short ones: only one eligible video.
  auto m = synthetic_manifest(3, 100);
  m.records[0].end_frame = 400;
  EXPECT_THROW(build_unpaired_pairs(m, 5, 10.0, 0), DomainError);
}

// ---------------------------------------------------------------------------
// Mouth opening.

TEST(MouthOpening, ConstantLandmarksGiveConstantSeries) {
  const auto poly = fixtures::mouth_polygon(0.4);
  const auto s = mouth_opening_series(std::vector<MouthPolygon>(20, poly));
  for (double v : s) EXPECT_EQ(v, s.front());
  EXPECT_GT(s.front(), 0.0);
}

TEST(MouthOpening, RectangleOpeningIsHeightOverWidth) {
  // Upper lip points at y = 0, lower lip at y = 3, width 12.
  MouthPolygon p;
  p.points = {{0, 0}, {6, 0}, {12, 0}, {12, 3}, {6, 3}, {0, 3}};
  EXPECT_DOUBLE_EQ(mouth_opening(p), 3.0 / 12.0);
  EXPECT_DOUBLE_EQ(mouth_opening(p, LipPartition{{1}, {4}}), 3.0 / 12.0);
}

TEST(MouthOpening, OscillationPeriodIsRecovered) {
  constexpr int period = 10;
  std::vector<MouthPolygon> frames;
  for (int f = 0; f < 200; ++f)
    frames.push_back(fixtures::mouth_polygon(0.5 + 0.5 * std::sin(2 * std::numbers::pi * f / period)));
  const auto s = mouth_opening_series(frames);
  // Autocorrelation peaks at the constructed period among lags 2..30.
  int best = 0;
  double best_r = -2;
  for (int lag = 2; lag <= 30; ++lag) {
    const double r = lagged_pearson(s, s, lag);
    if (r > best_r + 1e-12) {
      best_r = r;
      best = lag;
    }
  }
  EXPECT_EQ(best, period);
  EXPECT_GT(best_r, 0.99);
}

TEST(MouthOpening, ZeroWidthIsError) {
  MouthPolygon p;
  p.points = {{5, 0}, {5, 1}, {5, 2}, {5, 3}};
  EXPECT_THROW(mouth_opening(p), DomainError);
  EXPECT_THROW(mouth_opening_series({}), DomainError);
  MouthPolygon ok;
  ok.points = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  EXPECT_THROW(mouth_opening(ok, LipPartition{{0}, {}}), DomainError);
  EXPECT_THROW(mouth_opening(ok, LipPartition{{0}, {9}}), DomainError);
}

// ---------------------------------------------------------------------------
// Sync proxy.

TEST(SyncProxy, SelfCorrelationIsOneAtLagZero) {
  std::mt19937_64 rng(1);
  const auto s = ar1_series(rng, 250);
  const auto r = sync_proxy_score(s, s);
  EXPECT_NEAR(r.score, 1.0, 1e-12);
  EXPECT_EQ(r.best_lag, 0);
}

TEST(SyncProxy, ConstructedShiftIsFound) {
  std::mt19937_64 rng(2);
  for (int shift : {-5, -3, -1, 1, 3, 5}) {
    const auto base = ar1_series(rng, 260);
    // envelope[t] = mouth[t - shift]
    std::vector<double> mouth(250), env(250);
    for (int t = 0; t < 250; ++t) {
      mouth[t] = base[t + 5];
      env[t] = base[t + 5 - shift];
    }
    const auto r = sync_proxy_score(mouth, env, 5);
    EXPECT_EQ(r.best_lag, shift);
    EXPECT_NEAR(r.score, 1.0, 1e-12);
  }
}

TEST(SyncProxy, AffineInvariantAndSymmetric) {
  std::mt19937_64 rng(3);
  const auto a = ar1_series(rng, 200), b = ar1_series(rng, 200);
  std::vector<double> b2(b);
  for (auto& v : b2) v = 3.5 * v - 7;
  const auto r1 = sync_proxy_score(a, b), r2 = sync_proxy_score(a, b2), r3 = sync_proxy_score(b, a);
  EXPECT_NEAR(r1.score, r2.score, 1e-12);
  EXPECT_EQ(r1.best_lag, r2.best_lag);
  EXPECT_NEAR(r1.score, r3.score, 1e-12);
  EXPECT_EQ(r1.best_lag, -r3.best_lag);
}

TEST(SyncProxy, ScoreBoundedAndIndependentSeriesNearZero) {
  int below = 0;
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    const auto a = ar1_series(rng, 250), b = ar1_series(rng, 250);
    const auto r = sync_proxy_score(a, b);
    EXPECT_LE(std::abs(r.score), 1.0 + 1e-12);
    below += std::abs(r.score) < 0.5;
  }
  EXPECT_GE(below, 95);
}

TEST(SyncProxy, TiesResolveTowardLagZero) {
  // Period-2 series: lags 0, +-2, +-4 all correlate perfectly.
  std::vector<double> s(40);
  for (int t = 0; t < 40; ++t) s[t] = t % 2;
  const auto r = sync_proxy_score(s, s, 4);
  EXPECT_EQ(r.best_lag, 0);
}

TEST(SyncProxy, Preconditions) {
  const std::vector<double> flat(30, 1.0), ramp = [] {
    std::vector<double> v(30);
    for (int i = 0; i < 30; ++i) v[i] = i;
    return v;
  }();
  EXPECT_THROW(sync_proxy_score(flat, ramp), DomainError);
  EXPECT_THROW(sync_proxy_score(ramp, flat), DomainError);
  EXPECT_THROW(sync_proxy_score(ramp, ramp, -1), DomainError);
  EXPECT_THROW(sync_proxy_score(std::vector<double>(ramp.begin(), ramp.begin() + 6), ramp, 5), DomainError);
}

// ---------------------------------------------------------------------------
// Distributions.

TEST(Distribution, SingleScoreOneBinAndStepCdf) {
  ScratchDir dir("dist");
  const auto h = emit_distribution({{"m", {0.33}}}, dir.path());
  int occupied = 0;
  for (auto c : h.at("m").counts) occupied += c > 0;
  EXPECT_EQ(occupied, 1);
  const auto cdf = read_lines(dir / "cdf_m.csv");
  ASSERT_EQ(cdf.size(), 2u);
  EXPECT_EQ(cdf[0], "score,cdf");
  EXPECT_EQ(cdf[1], "0.33,1");
}

TEST(Distribution, MassEqualsScoreCount) {
  ScratchDir dir("dist");
  std::mt19937_64 rng(5);
  std::vector<double> s(900);
  for (auto& v : s) v = std::uniform_real_distribution<double>(-1.2, 1.2)(rng);  // some outside the range
  emit_distribution({{"m", s}}, dir.path());
  long long total = 0;
  const auto lines = read_lines(dir / "hist_m.csv");
  EXPECT_EQ(lines.front(), "bin_lo,bin_hi,count");
  for (std::size_t i = 1; i < lines.size(); ++i) total += std::stoll(lines[i].substr(lines[i].rfind(',') + 1));
  EXPECT_EQ(total, 900);
  EXPECT_EQ(read_lines(dir / "cdf_m.csv").back().substr(read_lines(dir / "cdf_m.csv").back().rfind(',') + 1), "1");
}

TEST(Distribution, IdenticalScoresGiveIdenticalCurves) {
  ScratchDir dir("dist");
  const std::vector<double> s = {0.1, -0.4, 0.1, 0.9, 0.25};
  emit_distribution({{"a", s}, {"b", s}}, dir.path());
  EXPECT_EQ(dlsync::testing::slurp(dir / "hist_a.csv"), dlsync::testing::slurp(dir / "hist_b.csv"));
  EXPECT_EQ(dlsync::testing::slurp(dir / "cdf_a.csv"), dlsync::testing::slurp(dir / "cdf_b.csv"));
  // Ties collapse into one CDF step.
  EXPECT_EQ(read_lines(dir / "cdf_a.csv").size(), 5u);
}

TEST(Distribution, EmptyInputsRejected) {
  ScratchDir dir("dist");
  EXPECT_THROW(emit_distribution({}, dir.path()), DomainError);
  EXPECT_THROW(emit_distribution({{"m", {}}}, dir.path()), DomainError);
}

TEST(Summary, Statistics) {
  const auto s = summarize({4, 1, 3, 2});
  EXPECT_EQ(s.count, 4u);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.median, 2.5);
  EXPECT_DOUBLE_EQ(s.stddev, std::sqrt(1.25));
  EXPECT_EQ(s.min, 1);
  EXPECT_EQ(s.max, 4);
  EXPECT_THROW(summarize({}), DomainError);
}

// ---------------------------------------------------------------------------
// End-to-end scoring on the fixture corpus.

TEST(ScorePairs, PairedBeatsUnpairedAndThreadsAgree) {
  ScratchDir dir("score");
  fixtures::write_all(dir.path());
  PreprocessOptions opt;
  opt.seed = 1;
  const auto res = preprocess(load_face_tracks(dir / "tracks.csv"), nullptr, dir / "videos", opt);
  const auto pairs = build_unpaired_pairs(res.manifest, 24, 4.0, 11);
  const auto one = score_pairs(res.manifest, pairs, {}, 1);
  const auto four = score_pairs(res.manifest, pairs, {}, 4);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(one.unpaired[i].score, four.unpaired[i].score);
    EXPECT_EQ(one.paired[i].best_lag, four.paired[i].best_lag);
  }
  EXPECT_GT(summarize(score_values(one.paired)).mean, summarize(score_values(one.unpaired)).mean + 0.3);
}
