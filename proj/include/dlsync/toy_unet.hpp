#pragma once

// Desk-scale single-step UNet over conditioning latents with audio
// cross-attention at the bottleneck. Forward and reverse passes are written
// out by hand in double precision.
//
// Layout for depth L and base width B (D = B << L at the bottleneck):
//   enc0   : conv3x3(3C -> B), SiLU
//   enc_l  : avgpool2, conv3x3(B<<(l-1) -> B<<l), SiLU          l = 1..L
//   attn   : tokens + Wo * softmax(Q K^T / sqrt(dh)) V, Q from image
//            tokens, K/V from audio rows
//   dec_l  : upsample2, concat skip enc_{l-1}, conv3x3 -> B<<(l-1), SiLU
//                                                               l = L..1
//   out    : conv1x1(B -> C)

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dlsync/conditioning.hpp"
#include "dlsync/error.hpp"
#include "dlsync/io_util.hpp"
#include "dlsync/parallel.hpp"
#include "dlsync/tensor.hpp"

namespace dlsync {

struct UNetConfig {
  int latent_channels = kLatentChannels;  // C; the network consumes 3C channels
  int base_width = 16;
  int depth = 2;
  int audio_dim = 80;
  int heads = 1;
  std::uint64_t seed = 0;

  int in_channels() const { return 3 * latent_channels; }
  int width_at(int level) const { return base_width << level; }
  int bottleneck_width() const { return width_at(depth); }

  void validate() const {
    if (latent_channels <= 0 || base_width <= 0 || depth <= 0 || audio_dim <= 0 || heads <= 0)
      throw DomainError("UNet config values must all be positive");
    if (depth > 8) throw DomainError("UNet depth above 8 is not supported");
    if (bottleneck_width() % heads != 0) throw DomainError("bottleneck width must be divisible by the head count");
  }
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

struct ParamSlot {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

/// Flat parameter vector with named slots. Gradients share the layout.
struct UNetParams {
  UNetConfig config;
  std::vector<ParamSlot> slots;
  std::vector<double> values;

  const ParamSlot& slot(const std::string& name) const {
    for (const auto& s : slots)
      if (s.name == name) return s;
    throw DomainError("no parameter named " + name);
  }
  std::span<double> operator[](const std::string& name) {
    const auto& s = slot(name);
    return {values.data() + s.offset, s.count};
  }
  std::span<const double> operator[](const std::string& name) const {
    const auto& s = slot(name);
    return {values.data() + s.offset, s.count};
  }
  /// Slot containing flat index i.
  const ParamSlot& slot_of(std::size_t i) const {
    for (const auto& s : slots)
      if (i >= s.offset && i < s.offset + s.count) return s;
    throw DomainError("parameter index out of range");
  }
  std::size_t size() const { return values.size(); }
};

using Gradients = UNetParams;

inline std::vector<ParamSlot> unet_layout(const UNetConfig& cfg) {
  cfg.validate();
  std::vector<ParamSlot> slots;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    slots.push_back({std::move(name), std::move(shape), offset, n});
    offset += n;
  };
  const int D = cfg.bottleneck_width();
  add("enc0.weight", {cfg.width_at(0), cfg.in_channels(), 3, 3});
  add("enc0.bias", {cfg.width_at(0)});
  for (int l = 1; l <= cfg.depth; ++l) {
    add("enc" + std::to_string(l) + ".weight", {cfg.width_at(l), cfg.width_at(l - 1), 3, 3});
    add("enc" + std::to_string(l) + ".bias", {cfg.width_at(l)});
  }
  add("attn.wq", {D, D});
  add("attn.wk", {D, cfg.audio_dim});
  add("attn.wv", {D, cfg.audio_dim});
  add("attn.wo", {D, D});
  for (int l = cfg.depth; l >= 1; --l) {
    add("dec" + std::to_string(l) + ".weight", {cfg.width_at(l - 1), cfg.width_at(l) + cfg.width_at(l - 1), 3, 3});
    add("dec" + std::to_string(l) + ".bias", {cfg.width_at(l - 1)});
  }
  add("out.weight", {cfg.latent_channels, cfg.width_at(0), 1, 1});
  add("out.bias", {cfg.latent_channels});
  return slots;
}

inline UNetParams zero_params(const UNetConfig& cfg) {
  UNetParams p;
  p.config = cfg;
  p.slots = unet_layout(cfg);
  p.values.assign(p.slots.back().offset + p.slots.back().count, 0.0);
  return p;
}

// ---------------------------------------------------------------------------
// Dense row-major matrix used for token sequences.

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, fill) {}
  double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

/// Views a 1 x rows x K audio tensor (or any tensor with a single channel)
/// as a token matrix.
inline Matrix audio_tokens(const Tensor3& audio) {
  if (audio.channels != 1 || audio.height < 1) throw ShapeError("audio tensor must be 1 x rows x K");
  Matrix m(audio.height, audio.width);
  m.values = audio.values;
  return m;
}

// ---------------------------------------------------------------------------
// Cross-attention.

struct AttentionWeights {
  std::span<const double> wq, wk, wv, wo;  // D x D, D x K, D x K, D x D
  int heads = 1;
};

struct AttentionResult {
  Matrix output;         // image tokens + attended audio
  Matrix pre_residual;   // Wo * concat_h(P_h V_h)
  Matrix queries, keys, values, mixed;  // Q, K, V and concat_h(P_h V_h)
  std::vector<Matrix> probs;  // per head, tokens x audio tokens
};

inline AttentionResult cross_attention(const Matrix& image, const Matrix& audio, const AttentionWeights& w) {
  const int n = image.rows, D = image.cols, m = audio.rows, K = audio.cols;
  if (m < 1) throw ShapeError("cross-attention needs at least one audio token");
  if (w.heads < 1 || D % w.heads != 0) throw ShapeError("feature width must be divisible by head count");
  if (w.wq.size() != static_cast<std::size_t>(D) * D || w.wo.size() != static_cast<std::size_t>(D) * D ||
      w.wk.size() != static_cast<std::size_t>(D) * K || w.wv.size() != static_cast<std::size_t>(D) * K)
    throw ShapeError("attention projection shapes do not match feature/audio dims");
  const int dh = D / w.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  AttentionResult r;
  r.queries = Matrix(n, D);
  r.keys = Matrix(m, D);
  r.values = Matrix(m, D);
  for (int t = 0; t < n; ++t)
    for (int e = 0; e < D; ++e) {
      double s = 0;
      for (int d = 0; d < D; ++d) s += w.wq[e * D + d] * image.at(t, d);
      r.queries.at(t, e) = s;
    }
  for (int a = 0; a < m; ++a)
    for (int e = 0; e < D; ++e) {
      double sk = 0, sv = 0;
      for (int k = 0; k < K; ++k) {
        sk += w.wk[e * K + k] * audio.at(a, k);
        sv += w.wv[e * K + k] * audio.at(a, k);
      }
      r.keys.at(a, e) = sk;
      r.values.at(a, e) = sv;
    }
  r.mixed = Matrix(n, D);
  for (int h = 0; h < w.heads; ++h) {
    Matrix p(n, m);
    for (int t = 0; t < n; ++t) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < m; ++a) {
        double s = 0;
        for (int e = h * dh; e < (h + 1) * dh; ++e) s += r.queries.at(t, e) * r.keys.at(a, e);
        p.at(t, a) = s * scale;
        mx = std::max(mx, p.at(t, a));
      }
      double z = 0;
      for (int a = 0; a < m; ++a) z += (p.at(t, a) = std::exp(p.at(t, a) - mx));
      for (int a = 0; a < m; ++a) p.at(t, a) /= z;
      for (int e = h * dh; e < (h + 1) * dh; ++e) {
        double s = 0;
        for (int a = 0; a < m; ++a) s += p.at(t, a) * r.values.at(a, e);
        r.mixed.at(t, e) = s;
      }
    }
    r.probs.push_back(std::move(p));
  }
  r.pre_residual = Matrix(n, D);
  r.output = image;
  for (int t = 0; t < n; ++t)
    for (int d = 0; d < D; ++d) {
      double s = 0;
      for (int e = 0; e < D; ++e) s += w.wo[d * D + e] * r.mixed.at(t, e);
      r.pre_residual.at(t, d) = s;
      r.output.at(t, d) += s;
    }
  return r;
}

struct AttentionGrads {
  std::span<double> wq, wk, wv, wo;
};

/// Accumulates weight gradients into `g` and returns d(loss)/d(image tokens).
inline Matrix cross_attention_backward(const Matrix& image, const Matrix& audio, const AttentionWeights& w,
                                       const AttentionResult& fwd, const Matrix& d_out, AttentionGrads g) {
  const int n = image.rows, D = image.cols, m = audio.rows, K = audio.cols;
  const int dh = D / w.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix d_image = d_out;  // residual path
  Matrix d_mixed(n, D);
  for (int d = 0; d < D; ++d)
    for (int e = 0; e < D; ++e) {
      double s = 0;
      for (int t = 0; t < n; ++t) s += d_out.at(t, d) * fwd.mixed.at(t, e);
      g.wo[d * D + e] += s;
    }
  for (int t = 0; t < n; ++t)
    for (int e = 0; e < D; ++e) {
      double s = 0;
      for (int d = 0; d < D; ++d) s += d_out.at(t, d) * w.wo[d * D + e];
      d_mixed.at(t, e) = s;
    }
  Matrix dq(n, D), dk(m, D), dv(m, D);
  for (int h = 0; h < w.heads; ++h) {
    const Matrix& p = fwd.probs[h];
    const int e0 = h * dh, e1 = (h + 1) * dh;
    for (int t = 0; t < n; ++t) {
      std::vector<double> dp(m);
      double dot = 0;
      for (int a = 0; a < m; ++a) {
        double s = 0;
        for (int e = e0; e < e1; ++e) s += d_mixed.at(t, e) * fwd.values.at(a, e);
        dp[a] = s;
        dot += s * p.at(t, a);
      }
      for (int a = 0; a < m; ++a) {
        const double ds = p.at(t, a) * (dp[a] - dot) * scale;
        for (int e = e0; e < e1; ++e) {
          dq.at(t, e) += ds * fwd.keys.at(a, e);
          dk.at(a, e) += ds * fwd.queries.at(t, e);
          dv.at(a, e) += p.at(t, a) * d_mixed.at(t, e);
        }
      }
    }
  }
  for (int e = 0; e < D; ++e) {
    for (int d = 0; d < D; ++d) {
      double s = 0;
      for (int t = 0; t < n; ++t) s += dq.at(t, e) * image.at(t, d);
      g.wq[e * D + d] += s;
    }
    for (int k = 0; k < K; ++k) {
      double sk = 0, sv = 0;
      for (int a = 0; a < m; ++a) {
        sk += dk.at(a, e) * audio.at(a, k);
        sv += dv.at(a, e) * audio.at(a, k);
      }
      g.wk[e * K + k] += sk;
      g.wv[e * K + k] += sv;
    }
  }
  for (int t = 0; t < n; ++t)
    for (int d = 0; d < D; ++d) {
      double s = 0;
      for (int e = 0; e < D; ++e) s += dq.at(t, e) * w.wq[e * D + d];
      d_image.at(t, d) += s;
    }
  return d_image;
}

// ---------------------------------------------------------------------------
// Layer primitives.

namespace detail {

inline Tensor3 conv_forward(const Tensor3& x, std::span<const double> weight, std::span<const double> bias,
                            int out_channels, int k) {
  const int H = x.height, W = x.width, cin = x.channels, pad = k / 2;
  Tensor3 y(out_channels, H, W);
  for (int o = 0; o < out_channels; ++o) {
    std::fill(y.channel(o).begin(), y.channel(o).end(), bias[o]);
    for (int i = 0; i < cin; ++i)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double w = weight[((static_cast<std::size_t>(o) * cin + i) * k + ky) * k + kx];
          if (w == 0.0) continue;
          const int dy = ky - pad, dx = kx - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          for (int yy = y0; yy < y1; ++yy) {
            double* out = &y.at(o, yy, 0);
            const double* in = &x.at(i, yy + dy, 0);
            for (int xx = x0; xx < x1; ++xx) out[xx] += w * in[xx + dx];
          }
        }
  }
  return y;
}

inline Tensor3 conv_backward(const Tensor3& x, std::span<const double> weight, const Tensor3& dy, int k,
                             std::span<double> d_weight, std::span<double> d_bias) {
  const int H = x.height, W = x.width, cin = x.channels, pad = k / 2;
  Tensor3 dx(cin, H, W);
  for (int o = 0; o < dy.channels; ++o) {
    double sb = 0;
    for (double v : dy.channel(o)) sb += v;
    d_bias[o] += sb;
    for (int i = 0; i < cin; ++i)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const std::size_t widx = ((static_cast<std::size_t>(o) * cin + i) * k + ky) * k + kx;
          const double w = weight[widx];
          const int oy = ky - pad, ox = kx - pad;
          const int y0 = std::max(0, -oy), y1 = std::min(H, H - oy);
          const int x0 = std::max(0, -ox), x1 = std::min(W, W - ox);
          double sw = 0;
          for (int yy = y0; yy < y1; ++yy) {
            const double* g = &dy.at(o, yy, 0);
            const double* in = &x.at(i, yy + oy, 0);
            double* din = &dx.at(i, yy + oy, 0);
            for (int xx = x0; xx < x1; ++xx) {
              sw += g[xx] * in[xx + ox];
              din[xx + ox] += w * g[xx];
            }
          }
          d_weight[widx] += sw;
        }
  }
  return dx;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline Tensor3 silu(const Tensor3& x) {
  Tensor3 y = x;
  for (auto& v : y.values) v = v * sigmoid(v);
  return y;
}

inline Tensor3 silu_backward(const Tensor3& pre, const Tensor3& dy) {
  Tensor3 dx = dy;
  for (std::size_t i = 0; i < dx.values.size(); ++i) {
    const double z = pre.values[i], s = sigmoid(z);
    dx.values[i] *= s * (1.0 + z * (1.0 - s));
  }
  return dx;
}

inline Tensor3 avgpool2(const Tensor3& x) {
  Tensor3 y(x.channels, x.height / 2, x.width / 2);
  for (int c = 0; c < x.channels; ++c)
    for (int i = 0; i < y.height; ++i)
      for (int j = 0; j < y.width; ++j)
        y.at(c, i, j) = 0.25 * (x.at(c, 2 * i, 2 * j) + x.at(c, 2 * i, 2 * j + 1) + x.at(c, 2 * i + 1, 2 * j) +
                                x.at(c, 2 * i + 1, 2 * j + 1));
  return y;
}

inline Tensor3 avgpool2_backward(const Tensor3& dy) {
  Tensor3 dx(dy.channels, dy.height * 2, dy.width * 2);
  for (int c = 0; c < dy.channels; ++c)
    for (int i = 0; i < dx.height; ++i)
      for (int j = 0; j < dx.width; ++j) dx.at(c, i, j) = 0.25 * dy.at(c, i / 2, j / 2);
  return dx;
}

inline Tensor3 upsample2(const Tensor3& x) {
  Tensor3 y(x.channels, x.height * 2, x.width * 2);
  for (int c = 0; c < x.channels; ++c)
    for (int i = 0; i < y.height; ++i)
      for (int j = 0; j < y.width; ++j) y.at(c, i, j) = x.at(c, i / 2, j / 2);
  return y;
}

inline Tensor3 upsample2_backward(const Tensor3& dy) {
  Tensor3 dx(dy.channels, dy.height / 2, dy.width / 2);
  for (int c = 0; c < dy.channels; ++c)
    for (int i = 0; i < dy.height; ++i)
      for (int j = 0; j < dy.width; ++j) dx.at(c, i / 2, j / 2) += dy.at(c, i, j);
  return dx;
}

inline Tensor3 concat_channels(const Tensor3& a, const Tensor3& b) {
  Tensor3 y(a.channels + b.channels, a.height, a.width);
  std::copy(a.values.begin(), a.values.end(), y.values.begin());
  std::copy(b.values.begin(), b.values.end(), y.values.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return y;
}

inline Matrix to_tokens(const Tensor3& x) {
  Matrix m(static_cast<int>(x.plane()), x.channels);
  for (int c = 0; c < x.channels; ++c)
    for (std::size_t p = 0; p < x.plane(); ++p) m.at(static_cast<int>(p), c) = x.values[c * x.plane() + p];
  return m;
}

inline Tensor3 from_tokens(const Matrix& m, int height, int width) {
  Tensor3 x(m.cols, height, width);
  for (int c = 0; c < m.cols; ++c)
    for (std::size_t p = 0; p < x.plane(); ++p) x.values[c * x.plane() + p] = m.at(static_cast<int>(p), c);
  return x;
}

inline void check_finite(const Tensor3& t, const std::string& where) {
  if (!t.all_finite()) throw NumericError("non-finite activation at " + where);
}

inline std::atomic<long long>& forward_counter() {
  static std::atomic<long long> counter{0};
  return counter;
}

}  // namespace detail

/// Number of UNet forward passes executed in this process.
inline long long forward_pass_count() { return detail::forward_counter().load(); }

// ---------------------------------------------------------------------------
// Forward / backward.

struct ForwardCache {
  std::vector<Tensor3> enc_in, enc_pre, enc_act;  // index by level 0..L
  Matrix tokens, audio;
  AttentionResult attention;
  Tensor3 bottleneck;  // attention output as a feature map
  std::vector<Tensor3> dec_in, dec_pre, dec_act;  // index by level 1..L (0 unused)
  Tensor3 output;
};

inline AttentionWeights attention_weights(const UNetParams& p) {
  return {p["attn.wq"], p["attn.wk"], p["attn.wv"], p["attn.wo"], p.config.heads};
}

inline void check_inputs(const UNetConfig& cfg, const LatentTensor& input, const Matrix& audio) {
  if (input.channels != cfg.in_channels())
    throw ShapeError("UNet expects " + std::to_string(cfg.in_channels()) + " input channels, got " +
                     std::to_string(input.channels));
  const int m = 1 << cfg.depth;
  if (input.height <= 0 || input.width <= 0 || input.height % m || input.width % m)
    throw ShapeError("UNet input spatial dims must be positive multiples of " + std::to_string(m));
  if (audio.cols != cfg.audio_dim)
    throw ShapeError("UNet expects audio rows of width " + std::to_string(cfg.audio_dim) + ", got " +
                     std::to_string(audio.cols));
  if (audio.rows < 1) throw ShapeError("UNet needs at least one audio row");
}

/// One deterministic pass; fills `cache` for the reverse pass.
inline LatentTensor forward(const UNetParams& p, const LatentTensor& input, const Matrix& audio, ForwardCache& cache) {
  const auto& cfg = p.config;
  check_inputs(cfg, input, audio);
  ++detail::forward_counter();
  const int L = cfg.depth;
  cache.enc_in.assign(L + 1, {});
  cache.enc_pre.assign(L + 1, {});
  cache.enc_act.assign(L + 1, {});
  for (int l = 0; l <= L; ++l) {
    const std::string name = "enc" + std::to_string(l);
    cache.enc_in[l] = l == 0 ? input : detail::avgpool2(cache.enc_act[l - 1]);
    cache.enc_pre[l] = detail::conv_forward(cache.enc_in[l], p[name + ".weight"], p[name + ".bias"], cfg.width_at(l), 3);
    cache.enc_act[l] = detail::silu(cache.enc_pre[l]);
    detail::check_finite(cache.enc_act[l], name);
  }
  cache.tokens = detail::to_tokens(cache.enc_act[L]);
  cache.audio = audio;
  cache.attention = cross_attention(cache.tokens, audio, attention_weights(p));
  cache.bottleneck = detail::from_tokens(cache.attention.output, cache.enc_act[L].height, cache.enc_act[L].width);
  detail::check_finite(cache.bottleneck, "attn");

  cache.dec_in.assign(L + 1, {});
  cache.dec_pre.assign(L + 1, {});
  cache.dec_act.assign(L + 1, {});
  const Tensor3* x = &cache.bottleneck;
  for (int l = L; l >= 1; --l) {
    const std::string name = "dec" + std::to_string(l);
    cache.dec_in[l] = detail::concat_channels(detail::upsample2(*x), cache.enc_act[l - 1]);
    cache.dec_pre[l] = detail::conv_forward(cache.dec_in[l], p[name + ".weight"], p[name + ".bias"], cfg.width_at(l - 1), 3);
    cache.dec_act[l] = detail::silu(cache.dec_pre[l]);
    detail::check_finite(cache.dec_act[l], name);
    x = &cache.dec_act[l];
  }
  cache.output = detail::conv_forward(*x, p["out.weight"], p["out.bias"], cfg.latent_channels, 1);
  detail::check_finite(cache.output, "out");
  return cache.output;
}

inline LatentTensor forward(const UNetParams& p, const LatentTensor& input, const Matrix& audio) {
  ForwardCache cache;
  return forward(p, input, audio, cache);
}

/// Reverse pass from d(loss)/d(output); accumulates into `grads`.
inline void backward_from_output(const UNetParams& p, const ForwardCache& cache, const LatentTensor& d_output,
                                 Gradients& grads) {
  const auto& cfg = p.config;
  const int L = cfg.depth;
  const Tensor3& top = cache.dec_act[1];
  Tensor3 dx = detail::conv_backward(top, p["out.weight"], d_output, 1, grads["out.weight"], grads["out.bias"]);

  std::vector<Tensor3> d_enc(L + 1);
  for (int l = 0; l <= L; ++l) d_enc[l] = Tensor3(cache.enc_act[l].channels, cache.enc_act[l].height, cache.enc_act[l].width);

  for (int l = 1; l <= L; ++l) {
    const std::string name = "dec" + std::to_string(l);
    const Tensor3 d_pre = detail::silu_backward(cache.dec_pre[l], dx);
    const Tensor3 d_in = detail::conv_backward(cache.dec_in[l], p[name + ".weight"], d_pre, 3, grads[name + ".weight"],
                                               grads[name + ".bias"]);
    const int up_channels = cfg.width_at(l);
    Tensor3 d_up(up_channels, d_in.height, d_in.width);
    std::copy_n(d_in.values.begin(), d_up.size(), d_up.values.begin());
    auto& skip = d_enc[l - 1];
    for (std::size_t i = 0; i < skip.size(); ++i) skip.values[i] += d_in.values[d_up.size() + i];
    dx = detail::upsample2_backward(d_up);
  }

  const Matrix d_tokens = cross_attention_backward(
      cache.tokens, cache.audio, attention_weights(p), cache.attention, detail::to_tokens(dx),
      {grads["attn.wq"], grads["attn.wk"], grads["attn.wv"], grads["attn.wo"]});
  const Tensor3 d_bottom = detail::from_tokens(d_tokens, cache.enc_act[L].height, cache.enc_act[L].width);
  for (std::size_t i = 0; i < d_bottom.size(); ++i) d_enc[L].values[i] += d_bottom.values[i];

  for (int l = L; l >= 0; --l) {
    const std::string name = "enc" + std::to_string(l);
    const Tensor3 d_pre = detail::silu_backward(cache.enc_pre[l], d_enc[l]);
    const Tensor3 d_in = detail::conv_backward(cache.enc_in[l], p[name + ".weight"], d_pre, 3, grads[name + ".weight"],
                                               grads[name + ".bias"]);
    if (l > 0) {
      const Tensor3 d_prev = detail::avgpool2_backward(d_in);
      for (std::size_t i = 0; i < d_prev.size(); ++i) d_enc[l - 1].values[i] += d_prev.values[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Loss.

struct LossConfig {
  enum class PixelRegion { full, lower_half };
  double lambda1 = 2.0;  // latent-space weight
  double lambda2 = 1.0;  // pixel-space weight
  PixelRegion pixel_region = PixelRegion::full;

  void validate() const {
    if (!(lambda1 >= 0) || !(lambda2 >= 0)) throw DomainError("loss weights must be non-negative");
  }
};

struct LossReport {
  double latent_l1 = 0;
  double pixel_l1 = 0;
  double total = 0;
};

inline LossReport make_report(double latent_l1, double pixel_l1, const LossConfig& cfg) {
  return {latent_l1, pixel_l1, cfg.lambda1 * latent_l1 + cfg.lambda2 * pixel_l1};
}

namespace detail {

inline void check_loss_shapes(const LatentTensor& pred, const LatentTensor& gt_latent, const Tensor3& gt_image) {
  if (!pred.same_shape(gt_latent)) throw ShapeError("predicted and ground-truth latents differ in shape");
  if (gt_image.channels != 3 || gt_image.height != pred.height * kLatentStride ||
      gt_image.width != pred.width * kLatentStride)
    throw ShapeError("ground-truth image does not match the decoded latent shape");
}

inline double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

inline int pixel_row_start(const Tensor3& img, LossConfig::PixelRegion region) {
  return region == LossConfig::PixelRegion::lower_half ? img.height / 2 : 0;
}

}  // namespace detail

/// L1 in latent space plus L1 between the stub-decoded prediction and the
/// ground-truth image, weighted by lambda1 and lambda2.
inline LossReport compute_loss(const LatentTensor& pred, const LatentTensor& gt_latent, const Tensor3& gt_image,
                               const LossConfig& cfg) {
  cfg.validate();
  detail::check_loss_shapes(pred, gt_latent, gt_image);
  // Long double sums keep evaluation noise well below finite-difference
  // resolution on losses of order 1.
  long double lat = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) lat += std::abs(pred.values[i] - gt_latent.values[i]);
  lat /= static_cast<long double>(pred.size());
  const Tensor3 decoded = decode_latent(pred);
  const int y0 = detail::pixel_row_start(gt_image, cfg.pixel_region);
  long double pix = 0;
  std::size_t n = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = y0; y < gt_image.height; ++y)
      for (int x = 0; x < gt_image.width; ++x, ++n) pix += std::abs(decoded.at(c, y, x) - gt_image.at(c, y, x));
  pix /= static_cast<long double>(n);
  return make_report(static_cast<double>(lat), static_cast<double>(pix), cfg);
}

/// d(total)/d(pred). The L1 subgradient at 0 is taken as 0.
inline LatentTensor loss_gradient(const LatentTensor& pred, const LatentTensor& gt_latent, const Tensor3& gt_image,
                                  const LossConfig& cfg) {
  detail::check_loss_shapes(pred, gt_latent, gt_image);
  LatentTensor g(pred.channels, pred.height, pred.width);
  const double wl = cfg.lambda1 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) g.values[i] = wl * detail::sign(pred.values[i] - gt_latent.values[i]);
  const Tensor3 decoded = decode_latent(pred);
  const int y0 = detail::pixel_row_start(gt_image, cfg.pixel_region);
  const double wp = cfg.lambda2 / (3.0 * (gt_image.height - y0) * gt_image.width);
  Tensor3 d_img(3, gt_image.height, gt_image.width);
  for (int c = 0; c < 3; ++c)
    for (int y = y0; y < gt_image.height; ++y)
      for (int x = 0; x < gt_image.width; ++x) d_img.at(c, y, x) = wp * detail::sign(decoded.at(c, y, x) - gt_image.at(c, y, x));
  const LatentTensor back = decode_latent_transpose(d_img);
  for (std::size_t i = 0; i < g.size(); ++i) g.values[i] += back.values[i];
  return g;
}

// ---------------------------------------------------------------------------
// Training samples.

struct TrainingSample {
  LatentTensor input;     // 3C x h x w
  Matrix audio;           // rows x K
  LatentTensor target_latent;
  Tensor3 target_image;
};

inline TrainingSample sample_from_bundle(const ConditioningBundle& b) {
  if (b.target_latent.size() == 0 || b.target_image.size() == 0)
    throw FormatError("bundle carries no training targets");
  return {b.unet_input, audio_tokens(b.audio), b.target_latent, b.target_image};
}

/// Gradient of the sample's total loss with respect to every parameter.
/// Throws NumericError naming the first parameter with a non-finite entry.
inline Gradients backward(const UNetParams& p, const TrainingSample& s, const LossConfig& cfg,
                          LossReport* report = nullptr) {
  ForwardCache cache;
  const LatentTensor pred = forward(p, s.input, s.audio, cache);
  if (report) *report = compute_loss(pred, s.target_latent, s.target_image, cfg);
  Gradients g = zero_params(p.config);
  backward_from_output(p, cache, loss_gradient(pred, s.target_latent, s.target_image, cfg), g);
  for (const auto& slot : g.slots)
    for (std::size_t i = 0; i < slot.count; ++i)
      if (!std::isfinite(g.values[slot.offset + i]))
        throw NumericError("non-finite gradient in " + slot.name + "[" + std::to_string(i) + "]");
  return g;
}

inline LossReport evaluate_loss(const UNetParams& p, const TrainingSample& s, const LossConfig& cfg) {
  return compute_loss(forward(p, s.input, s.audio), s.target_latent, s.target_image, cfg);
}

/// Single prediction: exactly one forward pass, no iterative refinement.
inline LatentTensor predict(const UNetParams& p, const LatentTensor& unet_input, const Matrix& audio) {
  return forward(p, unet_input, audio);
}

// ---------------------------------------------------------------------------
// Initialization.

/// Per-level activations recorded by a forward pass, in network order.
inline std::vector<std::pair<std::string, const Tensor3*>> level_activations(const ForwardCache& c) {
  std::vector<std::pair<std::string, const Tensor3*>> out;
  const int L = static_cast<int>(c.enc_act.size()) - 1;
  for (int l = 0; l <= L; ++l) out.emplace_back("enc" + std::to_string(l), &c.enc_act[l]);
  out.emplace_back("attn", &c.bottleneck);
  for (int l = L; l >= 1; --l) out.emplace_back("dec" + std::to_string(l), &c.dec_act[l]);
  return out;
}

inline double variance(std::span<const double> v) {
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  return var / static_cast<double>(v.size());
}

/// Seeded Gaussian init followed by a layer-sequential rescaling pass on a
/// unit-variance probe so every level's activations start near unit
/// variance (the attention residual branch is scaled to a quarter of it).
inline UNetParams init_params(const UNetConfig& cfg, std::uint64_t seed) {
  UNetParams p = zero_params(cfg);
  std::mt19937_64 rng(seed);
  auto fill = [&](const std::string& name, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : p[name]) v = dist(rng);
  };
  constexpr double kSiluGain = 2.6;
  for (const auto& slot : p.slots) {
    if (slot.shape.size() != 4) continue;
    const double fan_in = static_cast<double>(slot.shape[1]) * slot.shape[2] * slot.shape[3];
    const bool out_layer = slot.name.rfind("out.", 0) == 0;
    fill(slot.name, std::sqrt((out_layer ? 1.0 : kSiluGain) / fan_in));
  }
  const int D = cfg.bottleneck_width();
  fill("attn.wq", std::sqrt(1.0 / D));
  fill("attn.wk", std::sqrt(1.0 / cfg.audio_dim));
  fill("attn.wv", std::sqrt(1.0 / cfg.audio_dim));
  fill("attn.wo", std::sqrt(0.25 / D));

  // Probe batch.
  const int side = 4 << cfg.depth;
  std::mt19937_64 probe_rng(derive_seed(seed, 17));
  std::normal_distribution<double> unit(0.0, 1.0);
  LatentTensor probe(cfg.in_channels(), side, side);
  for (auto& v : probe.values) v = unit(probe_rng);
  Matrix audio(4, cfg.audio_dim);
  for (auto& v : audio.values) v = unit(probe_rng);

  auto rescale = [&](const std::string& weight, auto measure, double target) {
    for (int iter = 0; iter < 4; ++iter) {
      ForwardCache c;
      forward(p, probe, audio, c);
      const double var = measure(c);
      if (!(var > 1e-12) || !std::isfinite(var)) return;
      const double f = std::sqrt(target / var);
      for (auto& v : p[weight]) v *= f;
    }
  };
  for (int l = 0; l <= cfg.depth; ++l)
    rescale("enc" + std::to_string(l) + ".weight",
            [l](const ForwardCache& c) { return variance(c.enc_act[l].values); }, 1.0);
  rescale("attn.wo", [](const ForwardCache& c) { return variance(c.attention.pre_residual.values); }, 0.25);
  for (int l = cfg.depth; l >= 1; --l)
    rescale("dec" + std::to_string(l) + ".weight",
            [l](const ForwardCache& c) { return variance(c.dec_act[l].values); }, 1.0);
  p.config.seed = seed;
  return p;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  enum class Optimizer { sgd, adam };
  Optimizer optimizer = Optimizer::adam;
  double lr = 1e-5;
  int steps = 100;
  std::uint64_t seed = 0;
  int batch_size = 0;  // 0: full batch
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int threads = 1;
};

struct TrainResult {
  UNetParams params;
  std::vector<LossReport> curve;  // one report per step, before its update
};

namespace detail {

/// Pairwise sum with a fixed topology that depends only on the count.
inline void tree_reduce(std::vector<std::vector<double>>& parts) {
  for (std::size_t stride = 1; stride < parts.size(); stride *= 2)
    for (std::size_t i = 0; i + stride < parts.size(); i += 2 * stride)
      for (std::size_t k = 0; k < parts[i].size(); ++k) parts[i][k] += parts[i + stride][k];
}

}  // namespace detail

/// Mean loss and gradient over a batch. Per-sample work may run on several
/// threads; results are combined in a fixed order.
inline std::pair<LossReport, std::vector<double>> batch_gradient(const UNetParams& p,
                                                                 const std::vector<const TrainingSample*>& batch,
                                                                 const LossConfig& cfg, int threads) {
  std::vector<std::vector<double>> grads(batch.size());
  std::vector<LossReport> reports(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) grads[i] = backward(p, *batch[i], cfg, &reports[i]).values;
  });
  detail::tree_reduce(grads);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& v : grads[0]) v *= inv;
  double lat = 0, pix = 0;
  for (const auto& r : reports) {
    lat += r.latent_l1;
    pix += r.pixel_l1;
  }
  return {make_report(lat * inv, pix * inv, cfg), std::move(grads[0])};
}

inline TrainResult train_loop(const std::vector<TrainingSample>& dataset, const UNetConfig& net, const LossConfig& loss,
                              const TrainConfig& tc) {
  if (dataset.empty()) throw DomainError("training dataset is empty");
  if (tc.steps < 0) throw DomainError("step count must be non-negative");
  if (!(tc.lr >= 0)) throw DomainError("learning rate must be non-negative");
  loss.validate();
  TrainResult result{init_params(net, tc.seed), {}};
  UNetParams& p = result.params;
  std::vector<double> m(p.size(), 0.0), v(p.size(), 0.0);
  std::mt19937_64 rng(derive_seed(tc.seed, 99));
  const std::size_t batch = tc.batch_size <= 0 ? dataset.size()
                                               : std::min<std::size_t>(tc.batch_size, dataset.size());
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();

  for (int step = 1; step <= tc.steps; ++step) {
    std::vector<const TrainingSample*> items;
    if (batch == dataset.size()) {
      for (const auto& s : dataset) items.push_back(&s);
    } else {
      for (std::size_t k = 0; k < batch; ++k) {
        if (cursor == order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        items.push_back(&dataset[order[cursor++]]);
      }
    }
    auto [report, grad] = batch_gradient(p, items, loss, tc.threads);
    if (!std::isfinite(report.total))
      throw NumericError("training diverged at step " + std::to_string(step) + ": non-finite loss");
    result.curve.push_back(report);
    if (tc.optimizer == TrainConfig::Optimizer::sgd) {
      for (std::size_t i = 0; i < p.size(); ++i) p.values[i] -= tc.lr * grad[i];
    } else {
      const double c1 = 1.0 - std::pow(tc.beta1, step), c2 = 1.0 - std::pow(tc.beta2, step);
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * grad[i];
        v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * grad[i] * grad[i];
        p.values[i] -= tc.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + tc.eps);
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: "DLC1", a key=value config block, then named f64 sections.

inline void write_checkpoint(const UNetParams& p, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  const auto& c = p.config;
  out << "DLC1\nconfig\n"
      << "latent_channels=" << c.latent_channels << "\nbase_width=" << c.base_width << "\ndepth=" << c.depth
      << "\naudio_dim=" << c.audio_dim << "\nheads=" << c.heads << "\nseed=" << c.seed << "\nend\n";
  for (const auto& s : p.slots) {
    out << "param " << s.name << ' ' << s.count << '\n';
    for (std::size_t i = 0; i < s.count; ++i) io::write_le<double>(out, p.values[s.offset + i]);
  }
  out << "end\n";
  if (!out) throw FormatError("failed writing " + path.string());
}

inline UNetParams read_checkpoint(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  if (io::read_line(in, "checkpoint magic") != "DLC1") throw FormatError("bad checkpoint magic in " + path.string());
  if (io::read_line(in, "config block") != "config") throw FormatError("checkpoint lacks a config block");
  std::map<std::string, std::string> kv;
  for (std::string line; (line = io::read_line(in, "config entry")) != "end";) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("bad checkpoint config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("checkpoint config missing ") + key);
    return io::parse_int(it->second, key);
  };
  UNetConfig cfg;
  cfg.latent_channels = static_cast<int>(get("latent_channels"));
  cfg.base_width = static_cast<int>(get("base_width"));
  cfg.depth = static_cast<int>(get("depth"));
  cfg.audio_dim = static_cast<int>(get("audio_dim"));
  cfg.heads = static_cast<int>(get("heads"));
  if (!kv.count("seed")) throw FormatError("checkpoint config missing seed");
  cfg.seed = io::parse_u64(kv["seed"], "seed");
  UNetParams p = zero_params(cfg);
  for (const auto& s : p.slots) {
    const auto fields = io::split(io::read_line(in, "param header"), ' ');
    if (fields.size() != 3 || fields[0] != "param" || fields[1] != s.name ||
        io::parse_int(fields[2], "param count") != static_cast<long long>(s.count))
      throw FormatError("checkpoint parameter section mismatch at " + s.name);
    for (std::size_t i = 0; i < s.count; ++i) p.values[s.offset + i] = io::read_le<double>(in, "param payload");
  }
  if (io::read_line(in, "checkpoint end") != "end") throw FormatError("checkpoint has trailing sections");
  return p;
}

}  // namespace dlsync
