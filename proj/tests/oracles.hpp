#pragma once

// Independent reference implementations used to check the library. Each
// one is written from the mathematical definition, not from the library
// code it is compared against.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "dlsync/dlsync.hpp"

namespace dlsync::oracle {

// ---------------------------------------------------------------------------
// Morphable model.

inline BasisSet random_basis(std::mt19937_64& rng, int vertices, int id_dims, int exp_dims, int triangles = 0) {
  std::normal_distribution<double> n01(0.0, 1.0);
  BasisSet b;
  b.vertex_count = vertices;
  b.identity_dims = id_dims;
  b.expression_dims = exp_dims;
  const std::size_t rows = b.rows();
  for (std::size_t i = 0; i < rows; ++i) b.mean_shape.push_back(static_cast<float>(n01(rng)));
  for (std::size_t i = 0; i < rows * id_dims; ++i) b.identity_basis.push_back(static_cast<float>(n01(rng)));
  for (std::size_t i = 0; i < rows * exp_dims; ++i) b.expression_basis.push_back(static_cast<float>(n01(rng)));
  std::uniform_int_distribution<std::uint32_t> idx(0, static_cast<std::uint32_t>(vertices - 1));
  for (int t = 0; t < triangles; ++t) b.triangles.push_back({idx(rng), idx(rng), idx(rng)});
  return b;
}

/// Shape as one dense (3N x (1 + D_id + D_exp)) matrix times [1; alpha; beta].
inline std::vector<double> dense_shape(const BasisSet& b, const std::vector<double>& alpha,
                                       const std::vector<double>& beta) {
  const std::size_t rows = b.rows(), cols = 1 + alpha.size() + beta.size();
  std::vector<double> m(rows * cols), coeff(cols);
  coeff[0] = 1.0;
  for (std::size_t r = 0; r < rows; ++r) m[r * cols] = b.mean_shape[r];
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    coeff[1 + k] = alpha[k];
    for (std::size_t r = 0; r < rows; ++r) m[r * cols + 1 + k] = b.identity_basis[k * rows + r];
  }
  for (std::size_t k = 0; k < beta.size(); ++k) {
    coeff[1 + alpha.size() + k] = beta[k];
    for (std::size_t r = 0; r < rows; ++r) m[r * cols + 1 + alpha.size() + k] = b.expression_basis[k * rows + r];
  }
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    long double s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += static_cast<long double>(m[r * cols + c]) * coeff[c];
    out[r] = static_cast<double>(s);
  }
  return out;
}

/// Relative error scaled by the magnitude of the terms being summed, so
/// cancellation near zero is judged against the size of its inputs.
inline double shape_relative_error(const BasisSet& b, const FaceMesh& mesh, const std::vector<double>& alpha,
                                   const std::vector<double>& beta) {
  const auto ref = dense_shape(b, alpha, beta);
  const std::size_t rows = b.rows();
  double worst = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double mag = std::abs(b.mean_shape[r]);
    for (std::size_t k = 0; k < alpha.size(); ++k) mag += std::abs(alpha[k] * b.identity_basis[k * rows + r]);
    for (std::size_t k = 0; k < beta.size(); ++k) mag += std::abs(beta[k] * b.expression_basis[k * rows + r]);
    const auto& v = mesh.vertices[r / 3];
    const double got = r % 3 == 0 ? v.x : (r % 3 == 1 ? v.y : v.z);
    worst = std::max(worst, std::abs(got - ref[r]) / std::max(mag, 1e-300));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Depth by ray casting: for each pixel center, a ray along +z in object
// space, intersected with every triangle (Moller-Trumbore).

inline DepthMap ray_cast_depth(const FaceMesh& mesh, const Camera& cam, int width, int height) {
  DepthMap out(width, height);
  for (int py = 0; py < height; ++py)
    for (int px = 0; px < width; ++px) {
      const double ox = (px + 0.5 - cam.tx) / cam.scale, oy = (py + 0.5 - cam.ty) / cam.scale;
      double best = std::numeric_limits<double>::infinity();
      for (const auto& t : mesh.triangles) {
        const auto& a = mesh.vertices[t[0]];
        const auto& b = mesh.vertices[t[1]];
        const auto& c = mesh.vertices[t[2]];
        const double e1[3] = {b.x - a.x, b.y - a.y, b.z - a.z};
        const double e2[3] = {c.x - a.x, c.y - a.y, c.z - a.z};
        // direction d = (0, 0, 1): p = d x e2, det = e1 . p
        const double p[3] = {-e2[1], e2[0], 0.0};
        const double det = e1[0] * p[0] + e1[1] * p[1];
        if (det == 0) continue;
        const double s[3] = {ox - a.x, oy - a.y, -a.z};
        const double u = (s[0] * p[0] + s[1] * p[1]) / det;
        if (u < 0 || u > 1) continue;
        const double q[3] = {s[1] * e1[2] - s[2] * e1[1], s[2] * e1[0] - s[0] * e1[2], s[0] * e1[1] - s[1] * e1[0]};
        const double v = q[2] / det;  // d . q
        if (v < 0 || u + v > 1) continue;
        const double z = (e2[0] * q[0] + e2[1] * q[1] + e2[2] * q[2]) / det;  // ray parameter from z = 0
        const double depth = z + cam.depth_offset;
        if (depth > 0) best = std::min(best, depth);
      }
      out.at(px, py) = best;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Polygon containment by winding-free crossing count along -x, using a
// half-open vertex convention.

inline bool inside_even_odd(const std::vector<Point2>& poly, double x, double y) {
  int crossings = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    Point2 a = poly[i], b = poly[(i + 1) % poly.size()];
    if (a.y > b.y) std::swap(a, b);
    if (!(a.y <= y && y < b.y)) continue;  // half-open in y
    const double t = (y - a.y) / (b.y - a.y);
    const double cx = a.x + t * (b.x - a.x);
    if (cx > x) ++crossings;
  }
  return crossings % 2 == 1;
}

inline std::vector<std::pair<int, int>> outside_pixels(const MouthPolygon& poly, int width, int height) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (!inside_even_odd(poly.points, x + 0.5, y + 0.5)) out.emplace_back(x, y);
  return out;
}

// ---------------------------------------------------------------------------
// Shifts.

inline DepthMap index_shift(const DepthMap& in, int dx, int dy) {
  DepthMap out(in.width, in.height, 0.0);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const int x = static_cast<int>(i % in.width), y = static_cast<int>(i / in.width);
    const int sx = x - dx, sy = y - dy;
    if (sx >= 0 && sy >= 0 && sx < in.width && sy < in.height) out.values[i] = in.values[sy * in.width + sx];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite differences on the UNet loss.

struct GradCheck {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

namespace detail {

/// Signs of every L1 residual that feeds the loss; a coordinate is on a
/// kink when any sign differs between the two probe points.
inline std::vector<signed char> residual_signs(const UNetParams& p, const TrainingSample& s) {
  const auto pred = forward(p, s.input, s.audio);
  std::vector<signed char> out;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = pred.values[i] - s.target_latent.values[i];
    out.push_back(static_cast<signed char>((r > 0) - (r < 0)));
  }
  const auto img = decode_latent(pred);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double r = img.values[i] - s.target_image.values[i];
    out.push_back(static_cast<signed char>((r > 0) - (r < 0)));
  }
  return out;
}

}  // namespace detail

/// Central differences over every parameter. Relative error uses
/// max(|g|, |fd|, floor) in the denominator so coordinates whose gradient
/// is numerically zero are judged on an absolute scale.
inline GradCheck check_gradients(const UNetParams& params, const TrainingSample& s, const LossConfig& cfg,
                                 double step = 1e-5, double floor = 1e-6) {
  GradCheck r;
  const auto g = backward(params, s, cfg);
  UNetParams p = params;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p.values[i];
    p.values[i] = orig + step;
    const double up = evaluate_loss(p, s, cfg).total;
    const auto sign_up = detail::residual_signs(p, s);
    p.values[i] = orig - step;
    const double down = evaluate_loss(p, s, cfg).total;
    const auto sign_down = detail::residual_signs(p, s);
    p.values[i] = orig;
    if (sign_up != sign_down) {
      ++r.skipped_kinks;
      continue;
    }
    const double fd = (up - down) / (2 * step);
    const double denom = std::max({std::abs(g.values[i]), std::abs(fd), floor});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(g.values[i] - fd) / denom);
    ++r.checked;
  }
  return r;
}

/// Sample with random inputs and targets whose image is block-noisy, so
/// pixel residuals are far from zero.
inline TrainingSample random_sample(std::mt19937_64& rng, const UNetConfig& cfg, int h, int w, int audio_rows) {
  std::normal_distribution<double> n01(0.0, 1.0);
  TrainingSample s;
  s.input = LatentTensor(cfg.in_channels(), h, w);
  for (auto& v : s.input.values) v = n01(rng);
  s.audio = Matrix(audio_rows, cfg.audio_dim);
  for (auto& v : s.audio.values) v = n01(rng);
  s.target_latent = LatentTensor(cfg.latent_channels, h, w);
  for (auto& v : s.target_latent.values) v = n01(rng);
  s.target_image = Tensor3(3, h * kLatentStride, w * kLatentStride);
  for (auto& v : s.target_image.values) v = n01(rng);
  return s;
}

}  // namespace dlsync::oracle
