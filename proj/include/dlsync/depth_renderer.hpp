#pragma once

// Weak-perspective z-buffer rasterization of face meshes into depth maps,
// mouth-region masking and the training-time depth augmentations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dlsync/error.hpp"
#include "dlsync/io_util.hpp"
#include "dlsync/morphable_model.hpp"
#include "dlsync/parallel.hpp"

namespace dlsync {

inline constexpr int kStandardMouthPoints = 80;
inline constexpr int kDefaultMaxShift = 5;
inline constexpr float kPfmSentinel = 3.4e38f;

/// Orthographic projection with uniform scale and 2D translation:
/// u = scale * x + tx, v = scale * y + ty, depth = z + depth_offset.
/// Pixel (i, j) has its center at (i + 0.5, j + 0.5).
struct Camera {
  double scale = 1.0;
  double tx = 0.0;
  double ty = 0.0;
  double depth_offset = 0.0;
};

struct DepthMap {
  static constexpr double kNoHit = std::numeric_limits<double>::infinity();

  int width = 0;
  int height = 0;
  std::vector<double> values;  // row-major

  DepthMap() = default;
  DepthMap(int w, int h, double fill = kNoHit) : width(w), height(h) {
    if (w <= 0 || h <= 0) throw DomainError("depth map dimensions must be positive");
    values.assign(static_cast<std::size_t>(w) * h, fill);
  }

  double& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  bool in_bounds(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  friend bool operator==(const DepthMap&, const DepthMap&) = default;
};

struct Point2 {
  double x = 0, y = 0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

/// Closed loop of mouth keypoints in pixel coordinates.
struct MouthPolygon {
  std::vector<Point2> points;

  void validate() const {
    if (points.size() < 3) throw DomainError("mouth polygon needs at least 3 points");
    for (const auto& p : points)
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw DomainError("mouth polygon has non-finite points");
  }
};

// ---------------------------------------------------------------------------
// Rasterization.

namespace detail {

struct ScreenTriangle {
  double x[3], y[3], z[3];
  double area2;
  bool top_left[3];  // per edge: edge k runs from vertex (k+1)%3 to (k+2)%3
  int min_x, max_x, min_y, max_y;
};

inline double edge_fn(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

/// Projects triangles, orients them to positive area, and drops degenerate
/// ones and any lying entirely outside the image.
inline std::vector<ScreenTriangle> setup_triangles(const FaceMesh& mesh, const Camera& cam, int width,
                                                   int height) {
  std::vector<ScreenTriangle> out;
  out.reserve(mesh.triangles.size());
  for (const auto& tri : mesh.triangles) {
    ScreenTriangle st{};
    for (int k = 0; k < 3; ++k) {
      if (tri[k] >= mesh.vertices.size()) throw ShapeError("triangle index out of range");
      const auto& v = mesh.vertices[tri[k]];
      st.x[k] = cam.scale * v.x + cam.tx;
      st.y[k] = cam.scale * v.y + cam.ty;
      st.z[k] = v.z + cam.depth_offset;
    }
    st.area2 = edge_fn(st.x[0], st.y[0], st.x[1], st.y[1], st.x[2], st.y[2]);
    if (!(std::abs(st.area2) > 0) || !std::isfinite(st.area2)) continue;
    if (st.area2 < 0) {
      std::swap(st.x[1], st.x[2]);
      std::swap(st.y[1], st.y[2]);
      std::swap(st.z[1], st.z[2]);
      st.area2 = -st.area2;
    }
    for (int k = 0; k < 3; ++k) {
      const int a = (k + 1) % 3, b = (k + 2) % 3;
      const double dx = st.x[b] - st.x[a], dy = st.y[b] - st.y[a];
      // With positive area in y-down image space: top edges are horizontal
      // running in +x, left edges run upward.
      st.top_left[k] = (dy == 0 && dx > 0) || dy < 0;
    }
    const double lo_x = std::min({st.x[0], st.x[1], st.x[2]});
    const double hi_x = std::max({st.x[0], st.x[1], st.x[2]});
    const double lo_y = std::min({st.y[0], st.y[1], st.y[2]});
    const double hi_y = std::max({st.y[0], st.y[1], st.y[2]});
    // Pixel i is a candidate when its center i + 0.5 lies within [lo, hi].
    st.min_x = std::max(0, static_cast<int>(std::ceil(lo_x - 0.5)));
    st.max_x = std::min(width - 1, static_cast<int>(std::floor(hi_x - 0.5)));
    st.min_y = std::max(0, static_cast<int>(std::ceil(lo_y - 0.5)));
    st.max_y = std::min(height - 1, static_cast<int>(std::floor(hi_y - 0.5)));
    if (st.min_x > st.max_x || st.min_y > st.max_y) continue;
    out.push_back(st);
  }
  return out;
}

}  // namespace detail

/// Nearest-surface depth per pixel. A pixel is covered when its center is
/// inside a projected triangle (top-left rule on edges); its value is the
/// minimum barycentrically interpolated depth over covering triangles.
/// Fragments with depth <= 0 lie behind the camera and are discarded.
/// Rows are split across `threads` workers; each pixel is owned by one
/// worker and reduced with min, so the result does not depend on the
/// schedule or on triangle order.
inline DepthMap rasterize_depth(const FaceMesh& mesh, const Camera& camera, int width, int height,
                                int threads = 1) {
  if (!(camera.scale > 0) || !std::isfinite(camera.scale)) throw DomainError("camera scale must be positive");
  DepthMap depth(width, height);
  const auto tris = detail::setup_triangles(mesh, camera, width, height);

  parallel_for(static_cast<std::size_t>(height), threads, [&](std::size_t row_begin, std::size_t row_end) {
    for (const auto& t : tris) {
      const int y0 = std::max<int>(t.min_y, static_cast<int>(row_begin));
      const int y1 = std::min<int>(t.max_y, static_cast<int>(row_end) - 1);
      for (int py = y0; py <= y1; ++py) {
        const double cy = py + 0.5;
        for (int px = t.min_x; px <= t.max_x; ++px) {
          const double cx = px + 0.5;
          double w[3];
          bool inside = true;
          for (int k = 0; k < 3 && inside; ++k) {
            const int a = (k + 1) % 3, b = (k + 2) % 3;
            w[k] = detail::edge_fn(t.x[a], t.y[a], t.x[b], t.y[b], cx, cy);
            inside = w[k] > 0 || (w[k] == 0 && t.top_left[k]);
          }
          if (!inside) continue;
          const double z = (w[0] * t.z[0] + w[1] * t.z[1] + w[2] * t.z[2]) / t.area2;
          if (!(z > 0)) continue;
          double& dst = depth.at(px, py);
          if (z < dst) dst = z;
        }
      }
    }
  });
  return depth;
}

// ---------------------------------------------------------------------------
// Mouth masking.

/// Even-odd rule containment test.
inline bool point_in_polygon(const MouthPolygon& poly, double px, double py) {
  bool inside = false;
  const auto& p = poly.points;
  for (std::size_t i = 0, j = p.size() - 1; i < p.size(); j = i++) {
    if ((p[i].y > py) != (p[j].y > py)) {
      const double x_cross = p[i].x + (py - p[i].y) * (p[j].x - p[i].x) / (p[j].y - p[i].y);
      if (px < x_cross) inside = !inside;
    }
  }
  return inside;
}

/// Keeps depth only for pixels whose centers fall inside the mouth polygon;
/// everything else, and uncovered pixels inside it, become exactly 0.
inline DepthMap mask_mouth_region(const DepthMap& depth, const MouthPolygon& mouth) {
  mouth.validate();
  DepthMap out(depth.width, depth.height, 0.0);
  for (int y = 0; y < depth.height; ++y)
    for (int x = 0; x < depth.width; ++x) {
      if (!point_in_polygon(mouth, x + 0.5, y + 0.5)) continue;
      const double d = depth.at(x, y);
      out.at(x, y) = std::isfinite(d) ? d : 0.0;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentations.

struct PixelShift {
  int dx = 0;
  int dy = 0;
};

/// output(x, y) = input(x - dx, y - dy) where that source is in bounds, else 0.
inline DepthMap perturb_depth(const DepthMap& depth, PixelShift shift, int max_shift = kDefaultMaxShift) {
  if (max_shift < 0) throw DomainError("max_shift must be non-negative");
  if (std::abs(shift.dx) > max_shift || std::abs(shift.dy) > max_shift)
    throw DomainError("depth shift (" + std::to_string(shift.dx) + "," + std::to_string(shift.dy) +
                      ") exceeds max_shift " + std::to_string(max_shift));
  DepthMap out(depth.width, depth.height, 0.0);
  for (int y = 0; y < depth.height; ++y)
    for (int x = 0; x < depth.width; ++x) {
      const int sx = x - shift.dx, sy = y - shift.dy;
      if (depth.in_bounds(sx, sy)) out.at(x, y) = depth.at(sx, sy);
    }
  return out;
}

/// Uniform integer shift in [-max_shift, max_shift]^2, drawn per sample.
inline PixelShift random_shift(std::uint64_t seed, int max_shift = kDefaultMaxShift) {
  if (max_shift < 0) throw DomainError("max_shift must be non-negative");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(-max_shift, max_shift);
  const int dx = dist(rng);
  const int dy = dist(rng);
  return {dx, dy};
}

struct DropoutResult {
  DepthMap depth;
  bool dropped = false;
};

/// Whole-map dropout: with probability p (decided from the seed alone) the
/// map is replaced by zeros.
inline DropoutResult dropout_depth(const DepthMap& depth, std::uint64_t seed, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("dropout probability must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (u < p) return {DepthMap(depth.width, depth.height, 0.0), true};
  return {depth, false};
}

// ---------------------------------------------------------------------------
// Inference-time sequence rendering.

inline std::vector<DepthMap> render_track(const BasisSet& basis, const IdentityCoeffs& alpha,
                                          const ExpressionTrack& track, const Camera& camera, int width,
                                          int height, int threads = 1) {
  track.validate();
  std::vector<DepthMap> maps;
  maps.reserve(track.frames.size());
  for (const auto& beta : track.frames)
    maps.push_back(rasterize_depth(swap_expression(basis, alpha, beta), camera, width, height, threads));
  return maps;
}

// ---------------------------------------------------------------------------
// PFM I/O: "Pf", "W H", "-1.0", rows bottom-to-top, little-endian f32.
// Uncovered pixels are stored as 3.4e38.

inline void write_pfm(const DepthMap& depth, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << "Pf\n" << depth.width << ' ' << depth.height << "\n-1.0\n";
  for (int y = depth.height - 1; y >= 0; --y)
    for (int x = 0; x < depth.width; ++x) {
      const double d = depth.at(x, y);
      io::write_le<float>(out, std::isfinite(d) ? static_cast<float>(d) : kPfmSentinel);
    }
  if (!out) throw FormatError("failed writing " + path.string());
}

inline DepthMap read_pfm(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  if (io::trim(io::read_line(in, "PFM magic")) != "Pf") throw FormatError("not a grayscale PFM: " + path.string());
  const auto dims = io::split(io::trim(io::read_line(in, "PFM dimensions")), ' ');
  if (dims.size() != 2) throw FormatError("bad PFM dimension line");
  const int w = static_cast<int>(io::parse_int(dims[0], "PFM width"));
  const int h = static_cast<int>(io::parse_int(dims[1], "PFM height"));
  const double scale = io::parse_double(io::trim(io::read_line(in, "PFM scale")), "PFM scale");
  if (!(scale < 0)) throw FormatError("only little-endian PFM (negative scale) is supported");
  DepthMap depth(w, h);
  for (int y = h - 1; y >= 0; --y)
    for (int x = 0; x < w; ++x) {
      const float v = io::read_le<float>(in, "PFM payload");
      depth.at(x, y) = v >= kPfmSentinel ? DepthMap::kNoHit : static_cast<double>(v);
    }
  return depth;
}

// ---------------------------------------------------------------------------
// Mouth keypoint CSV: "frame_idx, x0, y0, x1, y1, ..." per row.

using MouthTrack = std::map<int, MouthPolygon>;

inline MouthTrack load_mouth_csv(const std::filesystem::path& path, int expected_points = 0) {
  MouthTrack track;
  for (const auto& row : io::read_numeric_csv(path)) {
    if (row.size() < 7 || (row.size() - 1) % 2 != 0)
      throw FormatError("mouth row must be frame index followed by x,y pairs: " + path.string());
    const int frame = static_cast<int>(row[0]);
    if (row[0] != frame || frame < 0) throw FormatError("mouth frame index must be a non-negative integer");
    MouthPolygon poly;
    for (std::size_t i = 1; i + 1 < row.size(); i += 2) poly.points.push_back({row[i], row[i + 1]});
    if (expected_points > 0 && poly.points.size() != static_cast<std::size_t>(expected_points))
      throw ShapeError("mouth row has " + std::to_string(poly.points.size()) + " points, expected " +
                       std::to_string(expected_points));
    poly.validate();
    if (!track.emplace(frame, std::move(poly)).second)
      throw FormatError("duplicate mouth frame index " + std::to_string(frame));
  }
  return track;
}

inline void write_mouth_csv(const MouthTrack& track, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  for (const auto& [frame, poly] : track) {
    out << frame;
    for (const auto& p : poly.points) out << ',' << io::format_double(p.x) << ',' << io::format_double(p.y);
    out << '\n';
  }
}

inline const MouthPolygon& mouth_for_frame(const MouthTrack& track, int frame) {
  const auto it = track.find(frame);
  if (it == track.end()) throw FormatError("no mouth keypoints for frame " + std::to_string(frame));
  return it->second;
}

}  // namespace dlsync
