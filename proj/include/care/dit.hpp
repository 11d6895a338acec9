#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "care/params.hpp"
#include "care/tensor.hpp"

// Small pre-norm transformer backbone: sinusoidal step encoding, linear
// layers with optional low-rank adapters, and blocks whose normalizations
// are modulated by a learned shift/scale derived from the timestep. All
// residual-branch output projections start at zero, so an untrained block
// is exactly the identity.

namespace care {

// Interleaved sin/cos at geometric frequencies spanning [1, 1/10000].
template <class S>
Tensor<S> timestep_embed(int s, int dim, int total) {
  if (s < 0 || s >= total)
    throw TensorError("timestep_embed", "step outside schedule");
  if (dim % 2 != 0) throw TensorError("timestep_embed", "dim must be even");
  const int half = dim / 2;
  std::vector<S> v((size_t)dim);
  for (int j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * j / half);
    v[(size_t)2 * j] = S(std::sin(s * freq));
    v[(size_t)2 * j + 1] = S(std::cos(s * freq));
  }
  return Tensor<S>::from({dim}, std::move(v));
}

// Linear layer with a rank-r bottleneck side path: y = xW + b + scale·(xA)U.
// scale 0 skips the side path entirely, so the output is bit-identical to
// the plain layer no matter what the adapter holds.
template <class S>
struct LoraLinear {
  Tensor<S> w, b;
  Tensor<S> a, up;
  double scale = 0.0;

  LoraLinear() = default;
  LoraLinear(ParamSet<S>& ps, const std::string& prefix, int d_in, int d_out,
             int rank, double scale_, bool train_base, bool zero_base = false)
      : scale(scale_) {
    w = zero_base ? ps.zeros(prefix + ".w", {d_in, d_out}, train_base)
                  : ps.randn(prefix + ".w", {d_in, d_out},
                             1.0 / std::sqrt((double)d_in), train_base);
    b = ps.zeros(prefix + ".b", {d_out}, train_base);
    a = ps.randn(prefix + ".a", {d_in, rank}, 1.0 / std::sqrt((double)d_in));
    up = ps.zeros(prefix + ".up", {rank, d_out});
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    auto y = add(matmul(x, w), b);
    if (scale != 0.0)
      y = add(y, mul_scalar(matmul(matmul(x, a), up), scale));
    return y;
  }
};

// Shared timestep conditioning: ψ(s) through one gelu layer, width d.
template <class S>
struct TimestepMlp {
  int d = 0;
  int total = 0;
  Tensor<S> w, b;

  TimestepMlp() = default;
  TimestepMlp(ParamSet<S>& ps, const std::string& prefix, int width,
              int total_steps, bool train = true)
      : d(width), total(total_steps) {
    w = ps.randn(prefix + ".w", {width, width}, 1.0 / std::sqrt((double)width),
                 train);
    b = ps.zeros(prefix + ".b", {width}, train);
  }

  Tensor<S> hidden(int s) const {
    auto psi = timestep_embed<S>(s, d, total);
    return gelu(add(reshape(matmul(reshape(psi, {1, d}), w), {d}), b));
  }
};

// Pre-norm block: modulated attention and feed-forward with residuals.
// The per-block modulation head (d -> 4d) and both residual output
// projections are zero-initialized.
template <class S>
struct DitBlock {
  int d = 0;
  LoraLinear<S> wq, wk, wv, wo;
  Tensor<S> ff_w1, ff_b1, ff_w2, ff_b2;
  Tensor<S> ada_w, ada_b;

  DitBlock() = default;
  DitBlock(ParamSet<S>& ps, const std::string& prefix, int width, int rank,
           double lora_scale, bool train_base)
      : d(width),
        wq(ps, prefix + ".attn.q", width, width, rank, lora_scale, train_base),
        wk(ps, prefix + ".attn.k", width, width, rank, lora_scale, train_base),
        wv(ps, prefix + ".attn.v", width, width, rank, lora_scale, train_base),
        wo(ps, prefix + ".attn.o", width, width, rank, lora_scale, train_base,
           /*zero_base=*/true) {
    ff_w1 = ps.randn(prefix + ".ff.w1", {width, 4 * width},
                     1.0 / std::sqrt((double)width), train_base);
    ff_b1 = ps.zeros(prefix + ".ff.b1", {4 * width}, train_base);
    ff_w2 = ps.zeros(prefix + ".ff.w2", {4 * width, width}, train_base);
    ff_b2 = ps.zeros(prefix + ".ff.b2", {width}, train_base);
    ada_w = ps.zeros(prefix + ".ada.w", {width, 4 * width}, train_base);
    ada_b = ps.zeros(prefix + ".ada.b", {4 * width}, train_base);
  }

  // tcond: shared timestep hidden state, width d. attn_map receives the
  // detached (N,N) attention weights when requested.
  Tensor<S> forward(const Tensor<S>& h, const Tensor<S>& tcond,
                    Tensor<S>* attn_map = nullptr) const {
    if (h.rank() != 2 || h.dim(1) != d)
      throw TensorError("dit_block", "expected width-d input", h.shape());
    auto tvec =
        reshape(add(matmul(reshape(tcond, {1, d}), ada_w), ada_b), {4 * d});
    auto scale1 = slice(tvec, 0, 0, d);
    auto shift1 = slice(tvec, 0, d, d);
    auto scale2 = slice(tvec, 0, 2 * d, d);
    auto shift2 = slice(tvec, 0, 3 * d, d);

    auto x1 = modulate(layer_norm(h), scale1, shift1);
    auto q = wq.forward(x1);
    auto k = wk.forward(x1);
    auto v = wv.forward(x1);
    auto att = softmax(
        mul_scalar(matmul(q, transpose2d(k)), 1.0 / std::sqrt((double)d)), 1);
    if (attn_map) *attn_map = detach(att);
    auto h1 = add(h, wo.forward(matmul(att, v)));

    auto x2 = modulate(layer_norm(h1), scale2, shift2);
    auto ff = add(matmul(gelu(add(matmul(x2, ff_w1), ff_b1)), ff_w2), ff_b2);
    return add(h1, ff);
  }

 private:
  static Tensor<S> modulate(const Tensor<S>& x, const Tensor<S>& sc,
                            const Tensor<S>& sh) {
    return add(mul(x, add_scalar(sc, 1.0)), sh);
  }
};

}  // namespace care
