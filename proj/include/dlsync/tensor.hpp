#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dlsync/error.hpp"

namespace dlsync {

/// Dense channels x height x width grid of doubles, channel-major.
struct Tensor3 {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Tensor3() = default;
  Tensor3(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w),
        values(static_cast<std::size_t>(c) * h * w, fill) {
    if (c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor dimension");
  }

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return values.size(); }

  double& at(int c, int y, int x) {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  const double& at(int c, int y, int x) const {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::span<double> channel(int c) { return {values.data() + c * plane(), plane()}; }
  std::span<const double> channel(int c) const { return {values.data() + c * plane(), plane()}; }

  bool same_shape(const Tensor3& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
  friend bool operator==(const Tensor3&, const Tensor3&) = default;
};

/// Latent-space tensor produced by the encoder stub and consumed by the UNet.
using LatentTensor = Tensor3;

}  // namespace dlsync
