#pragma once

// Assembly of the single-step UNet input: occluded target frame, reference
// frame and mouth depth map, each encoded to latent space and concatenated
// along channels, plus the target's audio feature rows.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dlsync/audio_features.hpp"
#include "dlsync/depth_renderer.hpp"
#include "dlsync/error.hpp"
#include "dlsync/image.hpp"
#include "dlsync/random.hpp"
#include "dlsync/tensor.hpp"
#include "dlsync/tensor_io.hpp"

namespace dlsync {

inline constexpr int kLatentChannels = 4;
inline constexpr int kLatentStride = 8;

// ---------------------------------------------------------------------------
// Occlusion.

/// Zeroes rows y >= height / 2 in every channel.
inline ImageFrame occlude_mouth(const ImageFrame& frame) {
  ImageFrame out = frame;
  for (int c = 0; c < out.channels; ++c)
    for (int y = out.height / 2; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) out.at(c, y, x) = 0.0;
  return out;
}

/// Alternative occlusion: zero the pixels whose centers lie inside the mouth
/// polygon.
inline ImageFrame occlude_polygon(const ImageFrame& frame, const MouthPolygon& mouth) {
  mouth.validate();
  ImageFrame out = frame;
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      if (point_in_polygon(mouth, x + 0.5, y + 0.5))
        for (int c = 0; c < out.channels; ++c) out.at(c, y, x) = 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Reference frame selection.

struct ReferencePolicy {
  enum class Mode { fixed_offset, uniform_range };
  Mode mode = Mode::uniform_range;
  int offset = 5;  // fixed_offset
  int min_offset = 5;
  int max_offset = 25;

  static ReferencePolicy fixed(int t) { return {Mode::fixed_offset, t, t, t}; }
  static ReferencePolicy uniform(int lo, int hi) { return {Mode::uniform_range, lo, lo, hi}; }

  int minimum() const { return mode == Mode::fixed_offset ? offset : min_offset; }

  void validate() const {
    if (mode == Mode::fixed_offset && offset < 1) throw DomainError("reference offset T must be >= 1");
    if (mode == Mode::uniform_range && (min_offset < 1 || min_offset > max_offset))
      throw DomainError("reference range needs 1 <= T_min <= T_max");
  }
};

/// Parses "fixed:T" or "uniform:TMIN,TMAX".
inline ReferencePolicy parse_reference_policy(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw DomainError("policy must be 'fixed:T' or 'uniform:TMIN,TMAX'");
  const auto kind = text.substr(0, colon);
  const auto args = io::split(text.substr(colon + 1));
  ReferencePolicy p;
  if (kind == "fixed" && args.size() == 1) {
    p = ReferencePolicy::fixed(static_cast<int>(io::parse_int(args[0], "policy")));
  } else if (kind == "uniform" && args.size() == 2) {
    p = ReferencePolicy::uniform(static_cast<int>(io::parse_int(args[0], "policy")),
                                 static_cast<int>(io::parse_int(args[1], "policy")));
  } else {
    throw DomainError("policy must be 'fixed:T' or 'uniform:TMIN,TMAX', got '" + text + "'");
  }
  p.validate();
  return p;
}

/// Picks a reference index at least the policy's minimum offset away from
/// the target. The distance and direction are drawn from the seed; a
/// candidate falling off the clip is reflected to the other side of the
/// target, and if both sides are out of range the distance is clamped to
/// the farther clip boundary.
inline int select_reference(int clip_length, int target, const ReferencePolicy& policy, std::uint64_t seed) {
  policy.validate();
  if (clip_length < 2) throw DomainError("reference selection needs a clip of at least 2 frames");
  if (target < 0 || target >= clip_length) throw DomainError("target index out of range");
  const int reach_before = target;
  const int reach_after = clip_length - 1 - target;
  if (std::max(reach_before, reach_after) < policy.minimum())
    throw DomainError("no reference frame at least " + std::to_string(policy.minimum()) +
                      " frames from target " + std::to_string(target));

  std::mt19937_64 rng(seed);
  int distance = policy.offset;
  if (policy.mode == ReferencePolicy::Mode::uniform_range)
    distance = std::uniform_int_distribution<int>(policy.min_offset, policy.max_offset)(rng);
  const int sign = std::uniform_int_distribution<int>(0, 1)(rng) == 0 ? -1 : 1;

  auto in_range = [&](int r) { return r >= 0 && r < clip_length; };
  int r = target + sign * distance;
  if (in_range(r)) return r;
  r = target - sign * distance;
  if (in_range(r)) return r;
  return reach_before >= reach_after ? 0 : clip_length - 1;
}

// ---------------------------------------------------------------------------
// Latent encoder stub and its adjoint decoder.

/// Fixed 4x3 channel lift with orthonormal columns (first three columns of
/// a normalized 4x4 Hadamard matrix).
inline constexpr std::array<std::array<double, 3>, kLatentChannels> kChannelLift{{
    {0.5, 0.5, 0.5},
    {0.5, -0.5, 0.5},
    {0.5, 0.5, -0.5},
    {0.5, -0.5, -0.5},
}};

/// 8x8 average pooling per channel, then the fixed orthonormal lift from 3
/// to 4 channels. Linear.
inline LatentTensor encode_latent(const Tensor3& image) {
  if (image.channels != 3) throw ShapeError("encoder expects 3-channel input");
  if (image.height % kLatentStride != 0 || image.width % kLatentStride != 0 || image.height == 0 ||
      image.width == 0)
    throw ShapeError("encoder input dimensions must be positive multiples of 8");
  const int h = image.height / kLatentStride, w = image.width / kLatentStride;
  Tensor3 pooled(3, h, w);
  constexpr double inv = 1.0 / (kLatentStride * kLatentStride);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double s = 0;
        for (int dy = 0; dy < kLatentStride; ++dy)
          for (int dx = 0; dx < kLatentStride; ++dx)
            s += image.at(c, i * kLatentStride + dy, j * kLatentStride + dx);
        pooled.at(c, i, j) = s * inv;
      }
  LatentTensor latent(kLatentChannels, h, w);
  for (int k = 0; k < kLatentChannels; ++k)
    for (std::size_t p = 0; p < latent.plane(); ++p) {
      double s = 0;
      for (int c = 0; c < 3; ++c) s += kChannelLift[k][c] * pooled.values[c * pooled.plane() + p];
      latent.values[k * latent.plane() + p] = s;
    }
  return latent;
}

/// Depth maps are replicated to three channels and encoded like images.
/// Uncovered (infinite) pixels must be masked to 0 first.
inline LatentTensor encode_latent(const DepthMap& depth) {
  Tensor3 img(3, depth.height, depth.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < depth.height; ++y)
      for (int x = 0; x < depth.width; ++x) {
        const double d = depth.at(x, y);
        if (!std::isfinite(d)) throw DomainError("depth map must be masked before encoding");
        img.at(c, y, x) = d;
      }
  return encode_latent(img);
}

/// Stub decoder: the encoder's adjoint under the per-pixel mean inner
/// product, i.e. transpose channel lift followed by 8x nearest upsampling.
/// decode(encode(x)) is the 8x8 block mean of x.
inline Tensor3 decode_latent(const LatentTensor& latent) {
  if (latent.channels != kLatentChannels) throw ShapeError("decoder expects a 4-channel latent");
  Tensor3 img(3, latent.height * kLatentStride, latent.width * kLatentStride);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < latent.height; ++i)
      for (int j = 0; j < latent.width; ++j) {
        double s = 0;
        for (int k = 0; k < kLatentChannels; ++k) s += kChannelLift[k][c] * latent.at(k, i, j);
        for (int dy = 0; dy < kLatentStride; ++dy)
          for (int dx = 0; dx < kLatentStride; ++dx) img.at(c, i * kLatentStride + dy, j * kLatentStride + dx) = s;
      }
  return img;
}

/// Transpose of decode_latent: block sums followed by the channel lift.
inline LatentTensor decode_latent_transpose(const Tensor3& image_grad) {
  if (image_grad.channels != 3 || image_grad.height % kLatentStride || image_grad.width % kLatentStride)
    throw ShapeError("decoder transpose expects a 3-channel image with dims divisible by 8");
  const int h = image_grad.height / kLatentStride, w = image_grad.width / kLatentStride;
  LatentTensor out(kLatentChannels, h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double sums[3] = {0, 0, 0};
      for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < kLatentStride; ++dy)
          for (int dx = 0; dx < kLatentStride; ++dx)
            sums[c] += image_grad.at(c, i * kLatentStride + dy, j * kLatentStride + dx);
      for (int k = 0; k < kLatentChannels; ++k)
        out.at(k, i, j) = kChannelLift[k][0] * sums[0] + kChannelLift[k][1] * sums[1] + kChannelLift[k][2] * sums[2];
    }
  return out;
}

// ---------------------------------------------------------------------------
// Channel concatenation.

/// Concatenates along channels in the order [masked | ref | lip].
inline LatentTensor assemble_unet_input(const LatentTensor& masked, const LatentTensor& ref,
                                        const LatentTensor& lip) {
  if (!masked.same_shape(ref) || !masked.same_shape(lip))
    throw ShapeError("latents must share channel count and spatial dims to be concatenated");
  LatentTensor out(3 * masked.channels, masked.height, masked.width);
  auto it = out.values.begin();
  for (const auto* part : {&masked, &ref, &lip}) it = std::copy(part->values.begin(), part->values.end(), it);
  return out;
}

/// Inverse of assemble_unet_input: returns {masked, ref, lip}.
inline std::array<LatentTensor, 3> split_unet_input(const LatentTensor& input) {
  if (input.channels % 3 != 0) throw ShapeError("UNet input channel count must be a multiple of 3");
  const int c = input.channels / 3;
  std::array<LatentTensor, 3> parts;
  for (int s = 0; s < 3; ++s) {
    parts[s] = LatentTensor(c, input.height, input.width);
    const auto offset = static_cast<std::ptrdiff_t>(s) * c * input.plane();
    std::copy_n(input.values.begin() + offset, parts[s].size(), parts[s].values.begin());
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Bundles.

struct Provenance {
  std::string clip_id;
  int target = 0;
  int reference = 0;
  bool depth_dropped = false;
  PixelShift shift{};
};

struct ConditioningBundle {
  LatentTensor unet_input;    // 3C x h x w
  Tensor3 audio;              // 1 x rows x K
  Provenance provenance;
  LatentTensor target_latent;  // encode(target frame), training target
  Tensor3 target_image;        // target frame, pixel-space training target
};

/// Everything build_bundle needs for one clip. Depth maps are raw
/// rasterizer output or already mouth-masked; masking is idempotent.
struct ClipData {
  std::string id;
  std::vector<ImageFrame> frames;
  MouthTrack mouths;
  std::vector<DepthMap> depth;
  AudioFeatures audio;  // aligned to the video frame rate

  int length() const { return static_cast<int>(frames.size()); }
};

struct BundleConfig {
  enum class Occlusion { lower_half, mouth_polygon };
  ReferencePolicy policy{};
  Occlusion occlusion = Occlusion::lower_half;
  bool augment = true;
  int max_shift = kDefaultMaxShift;
  double dropout_p = 0.5;
  int audio_window = 1;  // audio rows attached per target, centered on it
};

struct BundleSeeds {
  std::uint64_t reference = 0;
  std::uint64_t shift = 0;
  std::uint64_t dropout = 0;

  static BundleSeeds from(std::uint64_t seed) {
    return {derive_seed(seed, 0), derive_seed(seed, 1), derive_seed(seed, 2)};
  }
};

inline ConditioningBundle build_bundle(const ClipData& clip, int target, const BundleConfig& cfg,
                                       const BundleSeeds& seeds) {
  if (clip.frames.empty()) throw DomainError("clip " + clip.id + " has no frames");
  if (static_cast<int>(clip.depth.size()) != clip.length())
    throw DomainError("clip " + clip.id + " is missing depth maps (" + std::to_string(clip.depth.size()) +
                      " for " + std::to_string(clip.length()) + " frames)");
  if (clip.audio.frame_count < clip.length())
    throw DomainError("clip " + clip.id + " has fewer aligned audio rows than frames");
  if (target < 0 || target >= clip.length()) throw DomainError("target index out of range");
  if (cfg.audio_window < 1) throw DomainError("audio window must be >= 1");

  const ImageFrame& target_frame = clip.frames[target];
  const MouthPolygon& mouth = mouth_for_frame(clip.mouths, target);
  const int reference = select_reference(clip.length(), target, cfg.policy, seeds.reference);

  const ImageFrame masked_frame = cfg.occlusion == BundleConfig::Occlusion::lower_half
                                      ? occlude_mouth(target_frame)
                                      : occlude_polygon(target_frame, mouth);

  ConditioningBundle b;
  b.provenance.clip_id = clip.id;
  b.provenance.target = target;
  b.provenance.reference = reference;

  DepthMap lip = mask_mouth_region(clip.depth[target], mouth);
  if (cfg.augment) {
    b.provenance.shift = random_shift(seeds.shift, cfg.max_shift);
    lip = perturb_depth(lip, b.provenance.shift, cfg.max_shift);
    auto dropped = dropout_depth(lip, seeds.dropout, cfg.dropout_p);
    lip = std::move(dropped.depth);
    b.provenance.depth_dropped = dropped.dropped;
  }

  b.unet_input = assemble_unet_input(encode_latent(masked_frame), encode_latent(clip.frames[reference]),
                                     encode_latent(lip));
  const auto rows = feature_window(clip.audio, target - (cfg.audio_window - 1) / 2, cfg.audio_window);
  b.audio = Tensor3(1, cfg.audio_window, clip.audio.band_count);
  b.audio.values = rows;
  b.target_latent = encode_latent(target_frame);
  b.target_image = target_frame;
  return b;
}

inline TensorFile bundle_to_file(const ConditioningBundle& b) {
  TensorFile f;
  const auto parts = split_unet_input(b.unet_input);
  f.add("masked", parts[0]);
  f.add("ref", parts[1]);
  f.add("lip", parts[2]);
  f.add("unet_input", b.unet_input);
  f.add("audio", b.audio);
  if (b.target_latent.size() > 0) f.add("target", b.target_latent);
  if (b.target_image.size() > 0) f.add("target_image", b.target_image);
  f.attributes["clip"] = b.provenance.clip_id.empty() ? "-" : b.provenance.clip_id;
  f.attributes["target"] = std::to_string(b.provenance.target);
  f.attributes["reference"] = std::to_string(b.provenance.reference);
  f.attributes["depth_dropped"] = b.provenance.depth_dropped ? "1" : "0";
  f.attributes["shift"] = std::to_string(b.provenance.shift.dx) + "," + std::to_string(b.provenance.shift.dy);
  return f;
}

inline ConditioningBundle bundle_from_file(const TensorFile& f) {
  ConditioningBundle b;
  b.unet_input = f.get("unet_input");
  b.audio = f.get("audio");
  if (f.has("target")) b.target_latent = f.get("target");
  if (f.has("target_image")) b.target_image = f.get("target_image");
  if (f.attributes.count("clip")) b.provenance.clip_id = f.attr("clip");
  if (f.attributes.count("target")) b.provenance.target = static_cast<int>(io::parse_int(f.attr("target"), "bundle target"));
  if (f.attributes.count("reference"))
    b.provenance.reference = static_cast<int>(io::parse_int(f.attr("reference"), "bundle reference"));
  if (f.attributes.count("depth_dropped")) b.provenance.depth_dropped = f.attr("depth_dropped") == "1";
  if (b.unet_input.channels % 3 != 0) throw ShapeError("bundle unet_input channels must be a multiple of 3");
  return b;
}

// ---------------------------------------------------------------------------
// Clip directories: frames/NNNNNN.ppm, depth/NNNNNN.pfm, mouth.csv, audio.wav.

inline std::string frame_name(int index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06d.%s", index, ext);
  return buf;
}

inline ClipData load_clip(const std::filesystem::path& dir, const std::filesystem::path& depth_dir = {},
                          double fps = kVideoFps, const LogMelConfig& logmel = {}) {
  namespace fs = std::filesystem;
  ClipData clip;
  clip.id = dir.filename().string();
  if (clip.id.empty()) clip.id = dir.parent_path().filename().string();
  const fs::path frames_dir = dir / "frames";
  if (!fs::is_directory(frames_dir)) throw FormatError("clip has no frames directory: " + frames_dir.string());
  for (int i = 0;; ++i) {
    const auto p = frames_dir / frame_name(i, "ppm");
    if (!fs::exists(p)) break;
    clip.frames.push_back(read_ppm(p));
  }
  if (clip.frames.empty()) throw FormatError("clip has no frames: " + frames_dir.string());
  clip.mouths = load_mouth_csv(dir / "mouth.csv");
  const fs::path ddir = depth_dir.empty() ? dir / "depth" : depth_dir;
  for (int i = 0; i < clip.length(); ++i) {
    const auto p = ddir / frame_name(i, "pfm");
    if (!fs::exists(p)) throw FormatError("missing depth map " + p.string());
    clip.depth.push_back(read_pfm(p));
  }
  clip.audio = align_to_video(compute_logmel(load_wav(dir / "audio.wav"), logmel), fps);
  return clip;
}

}  // namespace dlsync
