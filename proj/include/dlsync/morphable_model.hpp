#pragma once

// Linear morphable face model: S = mean + U_id * alpha + U_exp * beta.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dlsync/error.hpp"
#include "dlsync/io_util.hpp"

namespace dlsync {

inline constexpr int kStandardIdentityDims = 80;
inline constexpr int kStandardExpressionDims = 64;

using Triangle = std::array<std::uint32_t, 3>;

/// Mean shape plus identity and expression PCA bases. Bases are dense,
/// column-major 3N x D matrices; vertex i occupies rows 3i..3i+2 (x, y, z).
struct BasisSet {
  int vertex_count = 0;
  int identity_dims = 0;
  int expression_dims = 0;
  std::vector<float> mean_shape;      // 3N
  std::vector<float> identity_basis;  // 3N * D_id, column-major
  std::vector<float> expression_basis;  // 3N * D_exp, column-major
  std::vector<Triangle> triangles;

  std::size_t rows() const { return 3 * static_cast<std::size_t>(vertex_count); }

  std::span<const float> identity_column(int k) const {
    return {identity_basis.data() + k * rows(), rows()};
  }
  std::span<const float> expression_column(int k) const {
    return {expression_basis.data() + k * rows(), rows()};
  }

  /// Throws ShapeError/FormatError when any invariant is broken.
  void validate(bool strict = false) const {
    if (vertex_count <= 0) throw ShapeError("basis vertex count must be positive");
    if (identity_dims < 0 || expression_dims < 0) throw ShapeError("negative basis dimension");
    if (mean_shape.size() != rows()) throw ShapeError("mean shape length must be 3N");
    if (identity_basis.size() != rows() * identity_dims)
      throw ShapeError("identity basis size must be 3N * D_id");
    if (expression_basis.size() != rows() * expression_dims)
      throw ShapeError("expression basis size must be 3N * D_exp");
    if (strict && (identity_dims != kStandardIdentityDims || expression_dims != kStandardExpressionDims))
      throw ShapeError("strict mode requires 80 identity and 64 expression dimensions");
    for (const auto& t : triangles)
      for (auto idx : t)
        if (idx >= static_cast<std::uint32_t>(vertex_count))
          throw ShapeError("triangle index out of range");
    auto finite = [](const std::vector<float>& v) {
      for (float x : v)
        if (!std::isfinite(x)) return false;
      return true;
    };
    if (!finite(mean_shape) || !finite(identity_basis) || !finite(expression_basis))
      throw FormatError("basis contains non-finite values");
  }

  friend bool operator==(const BasisSet&, const BasisSet&) = default;
};

struct IdentityCoeffs {
  std::vector<double> values;
};

struct ExpressionCoeffs {
  std::vector<double> values;
};

struct Vertex {
  double x = 0, y = 0, z = 0;
  friend bool operator==(const Vertex&, const Vertex&) = default;
};

struct FaceMesh {
  std::vector<Vertex> vertices;
  std::vector<Triangle> triangles;
  friend bool operator==(const FaceMesh&, const FaceMesh&) = default;
};

/// Per-frame expression coefficients, e.g. the output of an external
/// audio-to-motion model.
struct ExpressionTrack {
  std::vector<ExpressionCoeffs> frames;
  double frame_rate = 25.0;

  void validate() const {
    if (!(frame_rate > 0)) throw DomainError("expression track frame rate must be positive");
    for (const auto& f : frames)
      if (f.values.size() != frames.front().values.size())
        throw ShapeError("expression track frames differ in dimension");
  }
};

// ---------------------------------------------------------------------------
// Basis file: "DLB1\n", "N D_id D_exp\n", f32 mean, f32 id basis, f32 exp
// basis (both column-major), "<T>\n", T triples of u32.

inline void write_basis(const BasisSet& basis, const std::filesystem::path& path) {
  basis.validate();
  auto out = io::open_out(path);
  out << "DLB1\n" << basis.vertex_count << ' ' << basis.identity_dims << ' '
      << basis.expression_dims << '\n';
  for (float v : basis.mean_shape) io::write_le(out, v);
  for (float v : basis.identity_basis) io::write_le(out, v);
  for (float v : basis.expression_basis) io::write_le(out, v);
  out << basis.triangles.size() << '\n';
  for (const auto& t : basis.triangles)
    for (auto idx : t) io::write_le(out, idx);
  if (!out) throw FormatError("failed writing " + path.string());
}

inline BasisSet load_basis(const std::filesystem::path& path, bool strict = false) {
  auto in = io::open_in(path);
  if (io::read_line(in, "basis magic") != "DLB1") throw FormatError("bad basis magic in " + path.string());
  const auto dims = io::split(io::read_line(in, "basis header"), ' ');
  if (dims.size() != 3) throw FormatError("basis header must be 'N D_id D_exp'");
  BasisSet b;
  b.vertex_count = static_cast<int>(io::parse_int(dims[0], "basis header"));
  b.identity_dims = static_cast<int>(io::parse_int(dims[1], "basis header"));
  b.expression_dims = static_cast<int>(io::parse_int(dims[2], "basis header"));
  if (b.vertex_count <= 0 || b.identity_dims < 0 || b.expression_dims < 0)
    throw ShapeError("basis header dimensions out of range");

  // Sanity-check payload length before allocating.
  const auto payload_start = in.tellg();
  in.seekg(0, std::ios::end);
  const auto file_end = in.tellg();
  in.seekg(payload_start);
  const std::uintmax_t floats = b.rows() * (1 + static_cast<std::uintmax_t>(b.identity_dims) + b.expression_dims);
  if (static_cast<std::uintmax_t>(file_end - payload_start) < floats * sizeof(float))
    throw ShapeError("basis payload shorter than header dimensions imply");

  auto read_block = [&](std::vector<float>& dst, std::size_t n) {
    dst.resize(n);
    if (!in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(n * sizeof(float))))
      throw ShapeError("basis payload truncated");
  };
  read_block(b.mean_shape, b.rows());
  read_block(b.identity_basis, b.rows() * b.identity_dims);
  read_block(b.expression_basis, b.rows() * b.expression_dims);

  const auto tri_count = io::parse_int(io::trim(io::read_line(in, "triangle count")), "triangle count");
  if (tri_count < 0) throw FormatError("negative triangle count");
  b.triangles.resize(static_cast<std::size_t>(tri_count));
  for (auto& t : b.triangles)
    for (auto& idx : t) idx = io::read_le<std::uint32_t>(in, "triangle indices");
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after basis triangles");
  b.validate(strict);
  return b;
}

// ---------------------------------------------------------------------------
// Reconstruction.

namespace detail {

inline void check_coeff_dims(const BasisSet& basis, std::size_t id_len, std::size_t exp_len) {
  if (id_len != static_cast<std::size_t>(basis.identity_dims))
    throw ShapeError("identity coefficient count " + std::to_string(id_len) +
                     " does not match basis (" + std::to_string(basis.identity_dims) + ")");
  if (exp_len != static_cast<std::size_t>(basis.expression_dims))
    throw ShapeError("expression coefficient count " + std::to_string(exp_len) +
                     " does not match basis (" + std::to_string(basis.expression_dims) + ")");
}

}  // namespace detail

/// Evaluates the morphable model for the given coefficients. Accumulation
/// runs column by column in a fixed order, so results are bitwise
/// reproducible.
inline FaceMesh reconstruct_shape(const BasisSet& basis, const IdentityCoeffs& alpha,
                                  const ExpressionCoeffs& beta) {
  detail::check_coeff_dims(basis, alpha.values.size(), beta.values.size());
  const std::size_t rows = basis.rows();
  std::vector<double> shape(basis.mean_shape.begin(), basis.mean_shape.end());
  for (int k = 0; k < basis.identity_dims; ++k) {
    const double a = alpha.values[k];
    if (a == 0.0) continue;
    const auto col = basis.identity_column(k);
    for (std::size_t r = 0; r < rows; ++r) shape[r] += a * col[r];
  }
  for (int k = 0; k < basis.expression_dims; ++k) {
    const double b = beta.values[k];
    if (b == 0.0) continue;
    const auto col = basis.expression_column(k);
    for (std::size_t r = 0; r < rows; ++r) shape[r] += b * col[r];
  }
  FaceMesh mesh;
  mesh.triangles = basis.triangles;
  mesh.vertices.resize(basis.vertex_count);
  for (int i = 0; i < basis.vertex_count; ++i)
    mesh.vertices[i] = {shape[3 * i], shape[3 * i + 1], shape[3 * i + 2]};
  for (const auto& v : mesh.vertices)
    if (!std::isfinite(v.x) || !std::isfinite(v.y) || !std::isfinite(v.z))
      throw NumericError("reconstructed mesh has non-finite vertices");
  return mesh;
}

/// Inference-time entry point: keep the identity fixed and drive the mesh
/// with a new set of expression coefficients.
inline FaceMesh swap_expression(const BasisSet& basis, const IdentityCoeffs& alpha,
                                const ExpressionCoeffs& beta_new) {
  return reconstruct_shape(basis, alpha, beta_new);
}

// ---------------------------------------------------------------------------
// Coefficient CSVs.

inline IdentityCoeffs load_identity_csv(const std::filesystem::path& path, int expected_dims) {
  const auto rows = io::read_numeric_csv(path);
  if (rows.size() != 1) throw FormatError("identity file must contain exactly one row: " + path.string());
  if (rows[0].size() != static_cast<std::size_t>(expected_dims))
    throw ShapeError("identity row has " + std::to_string(rows[0].size()) + " values, expected " +
                     std::to_string(expected_dims));
  return {rows[0]};
}

inline ExpressionTrack load_expression_csv(const std::filesystem::path& path, int expected_dims,
                                           double frame_rate = 25.0) {
  const auto rows = io::read_numeric_csv(path);
  if (rows.empty()) throw FormatError("expression file has no rows: " + path.string());
  ExpressionTrack track;
  track.frame_rate = frame_rate;
  for (const auto& r : rows) {
    if (r.size() != static_cast<std::size_t>(expected_dims))
      throw ShapeError("expression row has " + std::to_string(r.size()) + " values, expected " +
                       std::to_string(expected_dims));
    track.frames.push_back({r});
  }
  track.validate();
  return track;
}

inline void write_coeff_rows(const std::filesystem::path& path,
                             const std::vector<std::vector<double>>& rows) {
  auto out = io::open_out(path);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << io::format_double(r[i]);
    out << '\n';
  }
}

}  // namespace dlsync
