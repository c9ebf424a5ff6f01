#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "dlsync/conditioning.hpp"
#include "fixture_gen.hpp"
#include "test_support.hpp"

using namespace dlsync;
using dlsync::testing::ScratchDir;

namespace {

Tensor3 random_tensor(std::mt19937_64& rng, int c, int h, int w) {
  Tensor3 t(c, h, w);
  t.values = dlsync::testing::normal_vector(rng, t.size());
  return t;
}

double inner(const Tensor3& a, const Tensor3& b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a.values[i]) * b.values[i];
  return static_cast<double>(s);
}

// Small clip with 10 frames, all depth maps covered inside the mouth.
ClipData tiny_clip(int frames = 10) {
  ClipData clip;
  clip.id = "tiny";
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int f = 0; f < frames; ++f) {
    ImageFrame img(16, 16);
    for (auto& v : img.values) v = u(rng);
    clip.frames.push_back(img);
    DepthMap d(16, 16, 1.0 + f);
    clip.depth.push_back(d);
    MouthPolygon m;
    m.points = {{4, 9}, {12, 9}, {12, 14}, {4, 14}};
    clip.mouths[f] = m;
  }
  clip.audio.frame_count = frames;
  clip.audio.band_count = 3;
  clip.audio.frame_rate = kVideoFps;
  for (int f = 0; f < frames * 3; ++f) clip.audio.values.push_back(0.1 * f);
  return clip;
}

}  // namespace

// ---------------------------------------------------------------------------
// Occlusion.

TEST(Occlusion, LowerHalfOfAllOnesFrameIsZero) {
  const auto out = occlude_mouth(ImageFrame(kStandardImageSize, kStandardImageSize, 1.0));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 256; ++y)
      for (int x = 0; x < 256; x += 17) EXPECT_EQ(out.at(c, y, x), y < 128 ? 1.0 : 0.0);
}

TEST(Occlusion, IsIdempotent) {
  std::mt19937_64 rng(1);
  const ImageFrame f(random_tensor(rng, 3, 24, 20));
  const auto once = occlude_mouth(f);
  EXPECT_EQ(occlude_mouth(once), once);
}

TEST(Occlusion, FourByFourZeroesEightPixelsPerChannel) {
  const auto out = occlude_mouth(ImageFrame(4, 4, 0.5));
  for (int c = 0; c < 3; ++c) {
    int zeros = 0;
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) zeros += out.at(c, y, x) == 0.0;
    EXPECT_EQ(zeros, 8);
  }
}

TEST(Occlusion, UpperHalfUntouchedForRandomFrames) {
  std::mt19937_64 rng(2);
  for (int h : {1, 2, 7, 16, 33}) {
    const ImageFrame f(random_tensor(rng, 3, h, 5));
    const auto out = occlude_mouth(f);
    double worst = 0;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h / 2; ++y)
        for (int x = 0; x < 5; ++x) worst = std::max(worst, std::abs(out.at(c, y, x) - f.at(c, y, x)));
    EXPECT_EQ(worst, 0.0);
  }
}

TEST(Occlusion, PolygonModeZeroesOnlyInsidePixels) {
  const ImageFrame f(10, 10, 1.0);
  MouthPolygon m;
  m.points = {{2, 2}, {6, 2}, {6, 5}, {2, 5}};
  const auto out = occlude_polygon(f, m);
  int zeros = 0;
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) {
      const bool inside = x >= 2 && x < 6 && y >= 2 && y < 5;
      EXPECT_EQ(out.at(1, y, x), inside ? 0.0 : 1.0);
      zeros += inside;
    }
  EXPECT_EQ(zeros, 12);
}

// ---------------------------------------------------------------------------
// Reference selection.

TEST(ReferenceSelection, FixedOffsetLandsOnEitherSide) {
  std::set<int> seen;
  for (std::uint64_t s = 0; s < 64; ++s) {
    const int r = select_reference(1000, 100, ReferencePolicy::fixed(5), s);
    EXPECT_TRUE(r == 95 || r == 105) << r;
    seen.insert(r);
  }
  EXPECT_EQ(seen.size(), 2u);
}

TEST(ReferenceSelection, NegativeSideReflectsAtClipStart) {
  for (std::uint64_t s = 0; s < 32; ++s) EXPECT_EQ(select_reference(1000, 0, ReferencePolicy::fixed(5), s), 5);
  for (std::uint64_t s = 0; s < 32; ++s) EXPECT_EQ(select_reference(1000, 999, ReferencePolicy::fixed(5), s), 994);
}

TEST(ReferenceSelection, UniformRangeDistancesAreUniform) {
  const auto policy = ReferencePolicy::uniform(5, 25);
  constexpr int draws = 10000, bins = 21;
  std::map<int, int> counts;
  int positive = 0;
  for (int s = 0; s < draws; ++s) {
    const int r = select_reference(1000, 500, policy, derive_seed(123, s));
    counts[std::abs(r - 500)]++;
    positive += r > 500;
  }
  ASSERT_EQ(counts.size(), static_cast<std::size_t>(bins));
  const double p = 1.0 / bins, mean = draws * p, sd = std::sqrt(draws * p * (1 - p));
  for (const auto& [d, n] : counts) {
    EXPECT_GE(d, 5);
    EXPECT_LE(d, 25);
    EXPECT_LE(std::abs(n - mean), 3 * sd) << "distance " << d;
  }
  EXPECT_LE(std::abs(positive - draws / 2.0), 3 * std::sqrt(draws * 0.25));
}

TEST(ReferenceSelection, NeverEqualsTargetAndRespectsMinimum) {
  for (int len : {2, 3, 10, 31})
    for (int t = 0; t < len; ++t)
      for (std::uint64_t s = 0; s < 20; ++s) {
        const auto policy = ReferencePolicy::uniform(1, 40);
        const int r = select_reference(len, t, policy, s);
        EXPECT_NE(r, t);
        EXPECT_GE(r, 0);
        EXPECT_LT(r, len);
      }
  for (int t = 0; t < 30; ++t)
    for (std::uint64_t s = 0; s < 20; ++s) {
      const int r = select_reference(30, t, ReferencePolicy::uniform(5, 25), s);
      EXPECT_GE(std::abs(r - t), 5);
    }
}

TEST(ReferenceSelection, DeterministicGivenSeed) {
  const auto policy = ReferencePolicy::uniform(5, 25);
  for (std::uint64_t s = 0; s < 50; ++s)
    EXPECT_EQ(select_reference(400, 200, policy, s), select_reference(400, 200, policy, s));
}

TEST(ReferenceSelection, RejectsInfeasibleRequests) {
  EXPECT_THROW(select_reference(1, 0, ReferencePolicy::fixed(1), 0), DomainError);
  EXPECT_THROW(select_reference(10, 10, ReferencePolicy::fixed(1), 0), DomainError);
  EXPECT_THROW(select_reference(10, -1, ReferencePolicy::fixed(1), 0), DomainError);
  EXPECT_THROW(select_reference(8, 4, ReferencePolicy::fixed(5), 0), DomainError);
  EXPECT_THROW(select_reference(100, 4, ReferencePolicy::fixed(0), 0), DomainError);
  EXPECT_THROW(select_reference(100, 4, ReferencePolicy::uniform(9, 3), 0), DomainError);
}

TEST(ReferencePolicyParse, AcceptsBothForms) {
  const auto f = parse_reference_policy("fixed:7");
  EXPECT_EQ(f.mode, ReferencePolicy::Mode::fixed_offset);
  EXPECT_EQ(f.offset, 7);
  const auto u = parse_reference_policy("uniform:5,25");
  EXPECT_EQ(u.mode, ReferencePolicy::Mode::uniform_range);
  EXPECT_EQ(u.min_offset, 5);
  EXPECT_EQ(u.max_offset, 25);
  for (const char* bad : {"fixed", "fixed:", "fixed:0", "uniform:5", "uniform:9,3", "gauss:1", "fixed:x"})
    EXPECT_THROW(parse_reference_policy(bad), Error) << bad;
}

// ---------------------------------------------------------------------------
// Encoder and decoder.

TEST(LatentEncoder, ConstantImageGivesLiftedConstant) {
  Tensor3 img(3, 32, 24);
  const double rgb[3] = {0.2, 0.7, -0.4};
  for (int c = 0; c < 3; ++c)
    for (auto& v : img.channel(c)) v = rgb[c];
  const auto z = encode_latent(img);
  EXPECT_EQ(z.channels, kLatentChannels);
  EXPECT_EQ(z.height, 4);
  EXPECT_EQ(z.width, 3);
  for (int k = 0; k < 4; ++k) {
    const double expect = kChannelLift[k][0] * rgb[0] + kChannelLift[k][1] * rgb[1] + kChannelLift[k][2] * rgb[2];
    for (double v : z.channel(k)) EXPECT_NEAR(v, expect, 1e-15);
  }
  // Orthonormal lift preserves the per-cell energy of the pooled constant.
  double e_in = 0, e_out = 0;
  for (double v : rgb) e_in += v * v;
  for (int k = 0; k < 4; ++k) e_out += z.at(k, 0, 0) * z.at(k, 0, 0);
  EXPECT_NEAR(e_out, e_in, 1e-14);
}

TEST(LatentEncoder, StandardResolutionShape) {
  const auto z = encode_latent(ImageFrame(256, 256, 0.5));
  EXPECT_EQ(z.channels, 4);
  EXPECT_EQ(z.height, 32);
  EXPECT_EQ(z.width, 32);
}

TEST(LatentEncoder, LiftColumnsAreOrthonormal) {
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += kChannelLift[k][a] * kChannelLift[k][b];
      EXPECT_DOUBLE_EQ(s, a == b ? 1.0 : 0.0);
    }
}

TEST(LatentEncoder, IsLinear) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_tensor(rng, 3, 16, 24), y = random_tensor(rng, 3, 16, 24);
    const double a = 1.7, b = -0.3;
    Tensor3 mix(3, 16, 24);
    for (std::size_t i = 0; i < mix.size(); ++i) mix.values[i] = a * x.values[i] + b * y.values[i];
    const auto zx = encode_latent(x), zy = encode_latent(y), zm = encode_latent(mix);
    for (std::size_t i = 0; i < zm.size(); ++i) EXPECT_NEAR(zm.values[i], a * zx.values[i] + b * zy.values[i], 1e-10);
  }
}

TEST(LatentEncoder, RejectsBadDimensions) {
  EXPECT_THROW(encode_latent(Tensor3(3, 12, 16)), ShapeError);
  EXPECT_THROW(encode_latent(Tensor3(3, 16, 20)), ShapeError);
  EXPECT_THROW(encode_latent(Tensor3(1, 16, 16)), ShapeError);
  DepthMap unmasked(16, 16);  // infinite background
  EXPECT_THROW(encode_latent(unmasked), DomainError);
}

TEST(LatentEncoder, DepthIsReplicatedAcrossChannels) {
  DepthMap d(16, 8, 0.0);
  std::mt19937_64 rng(4);
  for (auto& v : d.values) v = std::uniform_real_distribution<double>(0, 3)(rng);
  Tensor3 img(3, 8, 16);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 16; ++x) img.at(c, y, x) = d.at(x, y);
  EXPECT_EQ(encode_latent(d), encode_latent(img));
}

TEST(LatentDecoder, DecodeOfEncodeIsBlockMean) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor(rng, 3, 16, 16);
  const auto back = decode_latent(encode_latent(x));
  for (int c = 0; c < 3; ++c)
    for (int by = 0; by < 2; ++by)
      for (int bx = 0; bx < 2; ++bx) {
        double mean = 0;
        for (int dy = 0; dy < 8; ++dy)
          for (int dx = 0; dx < 8; ++dx) mean += x.at(c, by * 8 + dy, bx * 8 + dx) / 64.0;
        for (int dy = 0; dy < 8; ++dy)
          for (int dx = 0; dx < 8; ++dx) EXPECT_NEAR(back.at(c, by * 8 + dy, bx * 8 + dx), mean, 1e-12);
      }
}

TEST(LatentDecoder, TransposeSatisfiesAdjointIdentity) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const auto z = random_tensor(rng, 4, 3, 2);
    const auto g = random_tensor(rng, 3, 24, 16);
    EXPECT_NEAR(inner(decode_latent(z), g), inner(z, decode_latent_transpose(g)), 1e-9);
  }
}

// ---------------------------------------------------------------------------
// Concatenation.

TEST(Assemble, TaggedConstantsLandInOrder) {
  const Tensor3 a(4, 32, 32, 1.0), b(4, 32, 32, 2.0), c(4, 32, 32, 3.0);
  const auto abc = assemble_unet_input(a, b, c);
  EXPECT_EQ(abc.channels, 12);
  EXPECT_EQ(abc.height, 32);
  const auto parts = split_unet_input(abc);
  EXPECT_EQ(parts[0], a);
  EXPECT_EQ(parts[1], b);
  EXPECT_EQ(parts[2], c);
  const auto cab = split_unet_input(assemble_unet_input(c, a, b));
  EXPECT_EQ(cab[0], c);
  EXPECT_EQ(cab[1], a);
  EXPECT_EQ(cab[2], b);
}

TEST(Assemble, RoundTripIsBitwiseForRandomLatents) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const int c = 1 + static_cast<int>(rng() % 6), h = 1 + static_cast<int>(rng() % 5);
    const int w = 1 + static_cast<int>(rng() % 5);
    const auto m = random_tensor(rng, c, h, w), r = random_tensor(rng, c, h, w), l = random_tensor(rng, c, h, w);
    const auto in = assemble_unet_input(m, r, l);
    EXPECT_EQ(in.channels, 3 * c);
    const auto parts = split_unet_input(in);
    EXPECT_EQ(parts[0], m);
    EXPECT_EQ(parts[1], r);
    EXPECT_EQ(parts[2], l);
  }
}

TEST(Assemble, RejectsMismatchedShapes) {
  EXPECT_THROW(assemble_unet_input(Tensor3(4, 2, 2), Tensor3(4, 2, 2), Tensor3(4, 2, 3)), ShapeError);
  EXPECT_THROW(assemble_unet_input(Tensor3(4, 2, 2), Tensor3(3, 2, 2), Tensor3(4, 2, 2)), ShapeError);
  EXPECT_THROW(split_unet_input(Tensor3(4, 2, 2)), ShapeError);
}

// ---------------------------------------------------------------------------
// Bundles.

TEST(Bundle, ProvenanceValidForEveryTarget) {
  const auto clip = tiny_clip();
  BundleConfig cfg;
  cfg.policy = ReferencePolicy::uniform(1, 4);
  cfg.max_shift = 1;
  for (int t = 0; t < clip.length(); ++t) {
    const auto b = build_bundle(clip, t, cfg, BundleSeeds::from(t));
    EXPECT_EQ(b.provenance.target, t);
    EXPECT_NE(b.provenance.reference, t);
    EXPECT_GE(b.provenance.reference, 0);
    EXPECT_LT(b.provenance.reference, clip.length());
    EXPECT_EQ(b.unet_input.channels, 3 * kLatentChannels);
    EXPECT_EQ(b.audio.height, 1);
    EXPECT_EQ(b.audio.width, 3);
  }
}

TEST(Bundle, SlicesMatchIndependentlyEncodedInputs) {
  const auto clip = tiny_clip();
  BundleConfig cfg;
  cfg.policy = ReferencePolicy::fixed(3);
  cfg.augment = false;
  const auto b = build_bundle(clip, 4, cfg, BundleSeeds::from(9));
  const auto parts = split_unet_input(b.unet_input);
  EXPECT_EQ(parts[0], encode_latent(occlude_mouth(clip.frames[4])));
  EXPECT_EQ(parts[1], encode_latent(clip.frames[b.provenance.reference]));
  EXPECT_EQ(parts[2], encode_latent(mask_mouth_region(clip.depth[4], clip.mouths.at(4))));
  EXPECT_EQ(b.target_latent, encode_latent(clip.frames[4]));
}

TEST(Bundle, DroppedDepthGivesZeroLipSlice) {
  const auto clip = tiny_clip();
  BundleConfig cfg;
  cfg.policy = ReferencePolicy::fixed(3);
  cfg.dropout_p = 1.0;
  const auto b = build_bundle(clip, 5, cfg, BundleSeeds::from(1));
  EXPECT_TRUE(b.provenance.depth_dropped);
  EXPECT_EQ(split_unet_input(b.unet_input)[2], encode_latent(DepthMap(16, 16, 0.0)));
}

TEST(Bundle, WithoutAugmentationDependsOnlyOnReferenceSeed) {
  const auto clip = tiny_clip();
  BundleConfig cfg;
  cfg.augment = false;
  cfg.policy = ReferencePolicy::uniform(1, 4);
  const auto a = build_bundle(clip, 5, cfg, {42, 1, 2});
  const auto b = build_bundle(clip, 5, cfg, {42, 999, 12345});
  EXPECT_EQ(a.unet_input, b.unet_input);
  EXPECT_EQ(a.provenance.reference, b.provenance.reference);
}

TEST(Bundle, AudioWindowIsCenteredOnTarget) {
  const auto clip = tiny_clip();
  BundleConfig cfg;
  cfg.augment = false;
  cfg.policy = ReferencePolicy::fixed(2);
  cfg.audio_window = 3;
  const auto b = build_bundle(clip, 4, cfg, BundleSeeds::from(0));
  ASSERT_EQ(b.audio.height, 3);
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(b.audio.at(0, r, k), 0.1 * ((3 + r) * 3 + k));
}

TEST(Bundle, MissingModalitiesAreReported) {
  auto clip = tiny_clip();
  BundleConfig cfg;
  cfg.policy = ReferencePolicy::fixed(2);
  auto no_depth = clip;
  no_depth.depth.pop_back();
  EXPECT_THROW(build_bundle(no_depth, 0, cfg, {}), DomainError);
  auto short_audio = clip;
  short_audio.audio.frame_count = 5;
  EXPECT_THROW(build_bundle(short_audio, 0, cfg, {}), DomainError);
  EXPECT_THROW(build_bundle(clip, 10, cfg, {}), DomainError);
  EXPECT_THROW(build_bundle(ClipData{}, 0, cfg, {}), DomainError);
}

TEST(Bundle, FileRoundTripKeepsSlicesAndProvenance) {
  ScratchDir dir("bundle");
  const auto clip = tiny_clip();
  BundleConfig cfg;
  cfg.policy = ReferencePolicy::fixed(3);
  const auto b = build_bundle(clip, 6, cfg, BundleSeeds::from(5));
  write_tensor_file(bundle_to_file(b), dir / "b.dlt");
  const auto file = read_tensor_file(dir / "b.dlt");
  const auto back = bundle_from_file(file);
  // Payload is f32; compare against the f32-rounded original.
  auto rounded = b.unet_input;
  for (auto& v : rounded.values) v = static_cast<float>(v);
  EXPECT_EQ(back.unet_input, rounded);
  EXPECT_EQ(back.provenance.reference, b.provenance.reference);
  EXPECT_EQ(back.provenance.target, 6);
  EXPECT_EQ(back.provenance.depth_dropped, b.provenance.depth_dropped);
  EXPECT_EQ(back.provenance.clip_id, "tiny");
  const auto parts = split_unet_input(back.unet_input);
  EXPECT_EQ(file.get("masked"), parts[0]);
  EXPECT_EQ(file.get("ref"), parts[1]);
  EXPECT_EQ(file.get("lip"), parts[2]);
}

TEST(Bundle, FixtureClipBuildsAtFixtureResolution) {
  const auto clip = fixtures::toy_clip();
  BundleConfig cfg;
  const auto b = build_bundle(clip, 20, cfg, BundleSeeds::from(20));
  EXPECT_EQ(b.unet_input.height, fixtures::kImageSize / 8);
  EXPECT_EQ(b.unet_input.channels, 12);
  EXPECT_TRUE(b.unet_input.all_finite());
}
