#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "care/params.hpp"
#include "care/tasks.hpp"
#include "care/tensor.hpp"

// Toy modality encoders: learned text-token table, image patchify +
// projection, mask occupancy projection, and the frozen block-transform
// codec producing the diffusion target latents. compose() is pure
// concatenation in the fixed segment order.

namespace care {

enum class Segment { Text = 0, Base = 1, Reference = 2, Mask = 3, Target = 4 };
constexpr int kNumSegments = 5;

inline const char* segment_name(Segment s) {
  switch (s) {
    case Segment::Text: return "text";
    case Segment::Base: return "base";
    case Segment::Reference: return "reference";
    case Segment::Mask: return "mask";
    case Segment::Target: return "target";
  }
  return "text";
}

// Flattens the p x p patches of an image into rows: one row per grid cell
// in row-major grid order, pixels row-major within the patch, channels
// innermost. Values are the raw [0,1] intensities.
inline std::vector<float> patchify(const Image& img, int p) {
  if (img.h % p != 0 || img.w % p != 0)
    throw TensorError("patchify", "image size not divisible by patch");
  const int gy = img.h / p, gx = img.w / p;
  std::vector<float> rows((size_t)gy * gx * p * p * 3);
  size_t i = 0;
  for (int cy = 0; cy < gy; ++cy)
    for (int cx = 0; cx < gx; ++cx)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int c = 0; c < 3; ++c)
            rows[i++] = img.at(cy * p + dy, cx * p + dx, c);
  return rows;
}

// Per-patch mean occupancy of a mask, one value per grid cell.
inline std::vector<float> patch_occupancy(const Mask& m, int p) {
  if (m.h % p != 0 || m.w % p != 0)
    throw TensorError("patch_occupancy", "mask size not divisible by patch");
  const int gy = m.h / p, gx = m.w / p;
  std::vector<float> occ((size_t)gy * gx);
  for (int cy = 0; cy < gy; ++cy)
    for (int cx = 0; cx < gx; ++cx) {
      float acc = 0;
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx) {
          float v = m.at(cy * p + dy, cx * p + dx);
          if (v < 0.0f || v > 1.0f)
            throw TensorError("patch_occupancy", "mask value outside [0,1]");
          acc += v;
        }
      occ[(size_t)cy * gx + cx] = acc / (float)(p * p);
    }
  return occ;
}

template <class S>
struct TextEncoder {
  Tensor<S> table;  // {V, d}
  Tensor<S> pos;    // {n_text, d}, zero-init so a zero table encodes to zero

  TextEncoder() = default;
  TextEncoder(ParamSet<S>& ps, const std::string& prefix, int n_text, int d) {
    table = ps.randn(prefix + ".table", {vocab_size(), d}, 0.3);
    pos = ps.zeros(prefix + ".pos", {n_text, d});
  }

  Tensor<S> encode(const std::vector<int>& ids) const {
    for (int id : ids)
      if (id < 0 || id >= vocab_size())
        throw TensorError("encode_text", "id outside vocabulary");
    return add(embed_rows(table, ids), pos);
  }
};

template <class S>
struct ImageEncoder {
  int patch = 4;
  Tensor<S> w;       // {p*p*3, d}
  Tensor<S> b;       // {d}, zero-init
  Tensor<S> no_ref;  // {d} flag embedding for an absent reference

  ImageEncoder() = default;
  ImageEncoder(ParamSet<S>& ps, const std::string& prefix, int p, int d)
      : patch(p) {
    w = ps.randn(prefix + ".w", {p * p * 3, d}, 1.0 / std::sqrt(p * p * 3.0));
    b = ps.zeros(prefix + ".b", {d});
    no_ref = ps.randn(prefix + ".no_ref", {d}, 0.3);
  }

  Tensor<S> encode(const Image& img) const {
    auto rows = patchify(img, patch);
    const int n_v = (img.h / patch) * (img.w / patch);
    std::vector<S> vals(rows.begin(), rows.end());
    auto x = Tensor<S>::from({n_v, patch * patch * 3}, std::move(vals));
    return add(matmul(x, w), b);
  }

  // Absent reference: all-zero tokens plus the learned flag on each row.
  Tensor<S> encode_absent(int n_v) const {
    auto zero = Tensor<S>::zeros({n_v, w.dim(1)});
    return add(zero, no_ref);
  }
};

template <class S>
struct MaskEncoder {
  int patch = 4;
  Tensor<S> w;  // {1, d}
  Tensor<S> b;  // {d}

  MaskEncoder() = default;
  MaskEncoder(ParamSet<S>& ps, const std::string& prefix, int p, int d)
      : patch(p) {
    w = ps.randn(prefix + ".w", {1, d}, 1.0);
    b = ps.zeros(prefix + ".b", {d});
  }

  Tensor<S> encode(const Mask& m) const {
    auto occ = patch_occupancy(m, patch);
    std::vector<S> vals(occ.begin(), occ.end());
    auto x = Tensor<S>::from({(int)occ.size(), 1}, std::move(vals));
    return add(matmul(x, w), b);
  }
};

// Frozen target codec: per-channel orthonormal 4x4 block cosine transform,
// keeping the 11/11/10 lowest zigzag coefficients per channel (32 dims per
// patch). The DC coefficient is recentered so mid-gray maps to zero and the
// latent is roughly unit-scale. Deterministic, parameter-free, and exactly
// invertible on patches whose dropped coefficients are zero (flat patches).
class TargetCodec {
 public:
  static constexpr int kPatch = 4;
  static constexpr int kDims = 32;

  explicit TargetCodec(int) {}
  TargetCodec() = default;

  // {N_v * 32} row-major latent rows for an image.
  std::vector<float> encode(const Image& img) const {
    const int g = img.h / kPatch;
    std::vector<float> out((size_t)g * g * kDims);
    std::array<float, 16> patch, coef;
    for (int cy = 0; cy < g; ++cy)
      for (int cx = 0; cx < g; ++cx) {
        float* dst = out.data() + ((size_t)cy * g + cx) * kDims;
        int off = 0;
        for (int c = 0; c < 3; ++c) {
          for (int dy = 0; dy < kPatch; ++dy)
            for (int dx = 0; dx < kPatch; ++dx)
              patch[(size_t)dy * kPatch + dx] =
                  img.at(cy * kPatch + dy, cx * kPatch + dx, c);
          dct4x4(patch, coef);
          coef[0] = (coef[0] - 2.0f) * 0.5f;
          const int keep = kept(c);
          for (int k = 0; k < keep; ++k) dst[off + k] = coef[zigzag(k)];
          off += keep;
        }
      }
    return out;
  }

  Image decode(const std::vector<float>& latent, int g) const {
    Image img = blank_image(g * kPatch, g * kPatch, {0, 0, 0});
    std::array<float, 16> patch, coef;
    for (int cy = 0; cy < g; ++cy)
      for (int cx = 0; cx < g; ++cx) {
        const float* src = latent.data() + ((size_t)cy * g + cx) * kDims;
        int off = 0;
        for (int c = 0; c < 3; ++c) {
          coef.fill(0.0f);
          const int keep = kept(c);
          for (int k = 0; k < keep; ++k) coef[zigzag(k)] = src[off + k];
          off += keep;
          coef[0] = coef[0] * 2.0f + 2.0f;
          idct4x4(coef, patch);
          for (int dy = 0; dy < kPatch; ++dy)
            for (int dx = 0; dx < kPatch; ++dx) {
              float v = patch[(size_t)dy * kPatch + dx];
              img.at(cy * kPatch + dy, cx * kPatch + dx, c) =
                  std::min(1.0f, std::max(0.0f, v));
            }
        }
      }
    return img;
  }

 private:
  static int kept(int channel) { return channel == 2 ? 10 : 11; }

  static int zigzag(int k) {
    static constexpr int kOrder[16] = {0, 1,  4,  8, 5, 2,  3,  6,
                                       9, 12, 13, 10, 7, 11, 14, 15};
    return kOrder[k];
  }

  static const std::array<float, 16>& basis() {
    static const std::array<float, 16> b = [] {
      std::array<float, 16> m{};
      for (int k = 0; k < 4; ++k) {
        const double s = k == 0 ? 0.5 : std::sqrt(0.5);
        for (int n = 0; n < 4; ++n)
          m[(size_t)k * 4 + n] =
              (float)(s * std::cos(std::numbers::pi * (2 * n + 1) * k / 8.0));
      }
      return m;
    }();
    return b;
  }

  static void dct4x4(const std::array<float, 16>& p,
                     std::array<float, 16>& out) {
    const auto& B = basis();
    std::array<float, 16> tmp;  // rows transformed
    for (int y = 0; y < 4; ++y)
      for (int u = 0; u < 4; ++u) {
        float acc = 0;
        for (int x = 0; x < 4; ++x)
          acc += B[(size_t)u * 4 + x] * p[(size_t)y * 4 + x];
        tmp[(size_t)y * 4 + u] = acc;
      }
    for (int u = 0; u < 4; ++u)
      for (int v = 0; v < 4; ++v) {
        float acc = 0;
        for (int y = 0; y < 4; ++y)
          acc += B[(size_t)v * 4 + y] * tmp[(size_t)y * 4 + u];
        out[(size_t)v * 4 + u] = acc;
      }
  }

  static void idct4x4(const std::array<float, 16>& coef,
                      std::array<float, 16>& out) {
    const auto& B = basis();
    std::array<float, 16> tmp;
    for (int u = 0; u < 4; ++u)
      for (int y = 0; y < 4; ++y) {
        float acc = 0;
        for (int v = 0; v < 4; ++v)
          acc += B[(size_t)v * 4 + y] * coef[(size_t)v * 4 + u];
        tmp[(size_t)y * 4 + u] = acc;
      }
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        float acc = 0;
        for (int u = 0; u < 4; ++u)
          acc += B[(size_t)u * 4 + x] * tmp[(size_t)y * 4 + u];
        out[(size_t)y * 4 + x] = acc;
      }
  }
};

// Composed token sequence with its segment bookkeeping. Segment spans are
// contiguous in the order [text; base; reference; mask; target?].
template <class S>
struct TokenSequence {
  Tensor<S> tokens;  // {N, d}
  int n_text = 0;
  int n_visual = 0;  // per visual segment
  int grid = 0;      // g, with n_visual = g*g
  bool has_target = false;

  int total() const { return n_text + (has_target ? 4 : 3) * n_visual; }

  std::pair<int, int> span(Segment s) const {
    switch (s) {
      case Segment::Text: return {0, n_text};
      case Segment::Base: return {n_text, n_visual};
      case Segment::Reference: return {n_text + n_visual, n_visual};
      case Segment::Mask: return {n_text + 2 * n_visual, n_visual};
      case Segment::Target:
        if (!has_target)
          throw TensorError("segment", "sequence has no target segment");
        return {n_text + 3 * n_visual, n_visual};
    }
    return {0, 0};
  }

  Segment segment_of(int token) const {
    if (token < n_text) return Segment::Text;
    const int v = (token - n_text) / n_visual;
    return (Segment)(1 + v);
  }

  // Grid coordinate of a visual token; text tokens have none.
  std::pair<int, int> grid_of(int token) const {
    if (token < n_text)
      throw TensorError("segment", "text tokens have no grid coordinate");
    const int r = (token - n_text) % n_visual;
    return {r / grid, r % grid};
  }

  Tensor<S> slice_segment(const Tensor<S>& h, Segment s) const {
    auto [start, len] = span(s);
    return slice(h, 0, start, len);
  }
};

// Pure concatenation in segment order; width must agree across inputs.
template <class S>
TokenSequence<S> compose(const Tensor<S>& text, const Tensor<S>& base,
                         const Tensor<S>& reference, const Tensor<S>& mask,
                         const Tensor<S>* target = nullptr) {
  const int d = text.dim(1);
  for (const Tensor<S>* t : {&base, &reference, &mask})
    if (t->dim(1) != d)
      throw TensorError("compose", "width mismatch", text.shape(),
                        t->shape());
  if (base.dim(0) != reference.dim(0) || base.dim(0) != mask.dim(0))
    throw TensorError("compose", "visual segment length mismatch",
                      base.shape(), mask.shape());
  TokenSequence<S> seq;
  seq.n_text = text.dim(0);
  seq.n_visual = base.dim(0);
  seq.grid = (int)std::lround(std::sqrt((double)seq.n_visual));
  if (seq.grid * seq.grid != seq.n_visual)
    throw TensorError("compose", "visual tokens are not a square grid",
                      base.shape());
  std::vector<Tensor<S>> parts = {text, base, reference, mask};
  if (target) {
    if (target->dim(1) != d || target->dim(0) != seq.n_visual)
      throw TensorError("compose", "target segment mismatch", text.shape(),
                        target->shape());
    parts.push_back(*target);
    seq.has_target = true;
  }
  seq.tokens = concat(parts, 0);
  return seq;
}

}  // namespace care
