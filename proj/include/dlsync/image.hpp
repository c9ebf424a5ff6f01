#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "dlsync/error.hpp"
#include "dlsync/io_util.hpp"
#include "dlsync/tensor.hpp"

namespace dlsync {

inline constexpr int kStandardImageSize = 256;

/// RGB frame, channel-major, values in [0, 1].
struct ImageFrame : Tensor3 {
  ImageFrame() = default;
  ImageFrame(int width, int height, double fill = 0.0) : Tensor3(3, height, width, fill) {
    if (width <= 0 || height <= 0) throw DomainError("image dimensions must be positive");
  }
  explicit ImageFrame(Tensor3 t) : Tensor3(std::move(t)) {
    if (channels != 3) throw ShapeError("image frames have 3 channels");
  }

  void validate(bool strict = false) const {
    if (channels != 3 || width <= 0 || height <= 0) throw ShapeError("invalid image frame shape");
    if (!all_finite()) throw DomainError("image frame has non-finite values");
    if (strict && (width != kStandardImageSize || height != kStandardImageSize))
      throw ShapeError("strict mode expects 256x256 frames");
  }
};

/// Binary PPM (P6, maxval 255).
inline ImageFrame read_ppm(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  auto token = [&]() {
    std::string t;
    while (true) {
      int c = in.get();
      if (c == EOF) throw FormatError("truncated PPM header: " + path.string());
      if (c == '#') {
        while (c != '\n' && c != EOF) c = in.get();
        continue;
      }
      if (std::isspace(c)) {
        if (!t.empty()) return t;
        continue;
      }
      t.push_back(static_cast<char>(c));
    }
  };
  if (token() != "P6") throw FormatError("not a binary PPM (P6): " + path.string());
  const int w = static_cast<int>(io::parse_int(token(), "PPM width"));
  const int h = static_cast<int>(io::parse_int(token(), "PPM height"));
  const int maxval = static_cast<int>(io::parse_int(token(), "PPM maxval"));
  if (maxval != 255) throw FormatError("only 8-bit PPM is supported");
  ImageFrame img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = io::read_le<std::uint8_t>(in, "PPM pixels") / 255.0;
  return img;
}

inline void write_ppm(const ImageFrame& img, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        io::write_le<std::uint8_t>(
            out, static_cast<std::uint8_t>(std::lround(std::clamp(img.at(c, y, x), 0.0, 1.0) * 255.0)));
  if (!out) throw FormatError("failed writing " + path.string());
}

}  // namespace dlsync
