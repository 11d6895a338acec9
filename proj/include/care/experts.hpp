#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "care/params.hpp"
#include "care/tensor.hpp"

// The heterogeneous expert bank: four modality experts plus the shared
// expert. Every expert is residual with a zero-initialized per-token
// adapter (layer normalization followed by a linear projection), so each
// one is the identity until trained. aggregate() blends them with routed
// weights.

namespace care {

// Detached inspection maps one expert pass can emit: cross-attention
// weights for the text and base experts, the affine modulation vectors of
// the reference expert, and the mask expert's gated latents.
template <class S>
struct ExpertCapture {
  Tensor<S> text_att, base_att;      // {N, n_text}, {N, n_v}
  Tensor<S> film_gamma, film_beta;   // {1, d}
  Tensor<S> mask_gate;               // {n_v, d}
};

// Adapter tail shared by all experts: h + Linear(LN(core)).
template <class S>
struct ExpertAdapter {
  Tensor<S> w, b;

  ExpertAdapter() = default;
  ExpertAdapter(ParamSet<S>& ps, const std::string& prefix, int d) {
    w = ps.zeros(prefix + ".aw", {d, d});
    b = ps.zeros(prefix + ".ab", {d});
  }

  Tensor<S> apply(const Tensor<S>& h, const Tensor<S>& core) const {
    return add(h, add(matmul(layer_norm(core), w), b));
  }
};

// Single-head cross-attention of h (queries) over a condition segment
// (keys/values); used by the text and base experts.
template <class S>
struct CrossAttnExpert {
  int d = 0;
  Tensor<S> wq, wk, wv;
  ExpertAdapter<S> adapter;

  CrossAttnExpert() = default;
  CrossAttnExpert(ParamSet<S>& ps, const std::string& prefix, int width)
      : d(width), adapter(ps, prefix, width) {
    const double sigma = 1.0 / std::sqrt((double)width);
    wq = ps.randn(prefix + ".wq", {width, width}, sigma);
    wk = ps.randn(prefix + ".wk", {width, width}, sigma);
    wv = ps.randn(prefix + ".wv", {width, width}, sigma);
  }

  Tensor<S> forward(const Tensor<S>& h, const Tensor<S>& cond,
                    Tensor<S>* att_map = nullptr) const {
    auto q = matmul(h, wq);
    auto k = matmul(cond, wk);
    auto v = matmul(cond, wv);
    auto att = softmax(
        mul_scalar(matmul(q, transpose2d(k)), 1.0 / std::sqrt((double)d)), 1);
    if (att_map) *att_map = detach(att);
    return adapter.apply(h, matmul(att, v));
  }
};

// Feature-wise affine modulation from the pooled condition: the core is
// h·(1+γ) + β with γ, β predicted from mean-pooled tokens.
template <class S>
struct FilmExpert {
  Tensor<S> w_gamma, w_beta;
  ExpertAdapter<S> adapter;

  FilmExpert() = default;
  FilmExpert(ParamSet<S>& ps, const std::string& prefix, int width)
      : adapter(ps, prefix, width) {
    const double sigma = 1.0 / std::sqrt((double)width);
    w_gamma = ps.randn(prefix + ".wgamma", {width, width}, sigma);
    w_beta = ps.randn(prefix + ".wbeta", {width, width}, sigma);
  }

  Tensor<S> forward(const Tensor<S>& h, const Tensor<S>& cond,
                    Tensor<S>* gamma_out = nullptr,
                    Tensor<S>* beta_out = nullptr) const {
    auto pooled = mean_axis(cond, 0, true);
    auto gam = matmul(pooled, w_gamma);
    auto bet = matmul(pooled, w_beta);
    if (gamma_out) *gamma_out = detach(gam);
    if (beta_out) *beta_out = detach(bet);
    auto core = add(mul(h, add_scalar(gam, 1.0)), bet);
    return adapter.apply(h, core);
  }
};

// Spatial expert: each visual segment is gated by the mask latents scaled
// with the current soft mask, viewed as a d-channel g×g grid, and passed
// through one shared 3×3 convolution. Text tokens pass through unchanged.
// Mask latents already live at grid resolution, so no upsampling step is
// needed before gating.
template <class S>
struct MaskExpert {
  int d = 0, g = 0;
  Tensor<S> conv_w, conv_b;
  ExpertAdapter<S> adapter;

  MaskExpert() = default;
  MaskExpert(ParamSet<S>& ps, const std::string& prefix, int width, int grid)
      : d(width), g(grid), adapter(ps, prefix, width) {
    conv_w = ps.randn(prefix + ".convw", {width, width, 3, 3},
                      1.0 / std::sqrt(9.0 * width));
    conv_b = ps.zeros(prefix + ".convb", {width});
  }

  // m_hat: {g*g, 1} soft mask on the latent grid, entries in [0,1].
  Tensor<S> forward(const Tensor<S>& h, const Tensor<S>& z_m,
                    const Tensor<S>& m_hat, int n_text,
                    Tensor<S>* gate_out = nullptr) const {
    const int n_v = g * g;
    const int n_visual_total = h.dim(0) - n_text;
    if (n_visual_total <= 0 || n_visual_total % n_v != 0)
      throw TensorError("mask_expert", "visual tokens do not fill grids",
                        h.shape());
    if (m_hat.dim(0) != n_v)
      throw TensorError("mask_expert", "soft mask grid mismatch",
                        m_hat.shape());
    for (S v : m_hat.value())
      if (v < S(0) || v > S(1))
        throw TensorError("mask_expert", "soft mask outside [0,1]");

    auto gate = mul(z_m, m_hat);  // {n_v,d} ⊙ {n_v,1}
    if (gate_out) *gate_out = detach(gate);
    std::vector<Tensor<S>> deltas;
    const int segments = n_visual_total / n_v;
    for (int s = 0; s < segments; ++s) {
      auto seg = slice(h, 0, n_text + s * n_v, n_v);
      auto gated = mul(seg, gate);
      auto grid = reshape(transpose2d(gated), {d, g, g});
      auto conv = conv2d(grid, conv_w, conv_b);
      deltas.push_back(transpose2d(reshape(conv, {d, n_v})));
    }
    auto core = concat<S>(deltas, 0);
    auto adapted = add(matmul(layer_norm(core), adapter.w), adapter.b);
    std::vector<Tensor<S>> parts = {Tensor<S>::zeros({n_text, h.dim(1)}),
                                    adapted};
    return add(h, concat<S>(parts, 0));
  }
};

// Plain feed-forward d → d with a gelu, same adapter tail.
template <class S>
struct SharedExpert {
  Tensor<S> w1, b1;
  ExpertAdapter<S> adapter;

  SharedExpert() = default;
  SharedExpert(ParamSet<S>& ps, const std::string& prefix, int width)
      : adapter(ps, prefix, width) {
    w1 = ps.randn(prefix + ".w1", {width, width},
                  1.0 / std::sqrt((double)width));
    b1 = ps.zeros(prefix + ".b1", {width});
  }

  Tensor<S> forward(const Tensor<S>& h) const {
    return adapter.apply(h, gelu(add(matmul(h, w1), b1)));
  }
};

template <class S>
struct ExpertBank {
  CrossAttnExpert<S> text;
  CrossAttnExpert<S> base;
  FilmExpert<S> ref;
  MaskExpert<S> mask;
  SharedExpert<S> shared;

  ExpertBank() = default;
  ExpertBank(ParamSet<S>& ps, const std::string& prefix, int width, int grid)
      : text(ps, prefix + ".text", width),
        base(ps, prefix + ".base", width),
        ref(ps, prefix + ".ref", width),
        mask(ps, prefix + ".mask", width, grid),
        shared(ps, prefix + ".shared", width) {}

  // Expert outputs in routing column order: text, base, ref, mask, shared.
  std::vector<Tensor<S>> forward_all(const Tensor<S>& h, const Tensor<S>& c_p,
                                     const Tensor<S>& z_b,
                                     const Tensor<S>& z_r,
                                     const Tensor<S>& z_m,
                                     const Tensor<S>& m_hat, int n_text,
                                     ExpertCapture<S>* cap = nullptr) const {
    return {text.forward(h, c_p, cap ? &cap->text_att : nullptr),
            base.forward(h, z_b, cap ? &cap->base_att : nullptr),
            ref.forward(h, z_r, cap ? &cap->film_gamma : nullptr,
                        cap ? &cap->film_beta : nullptr),
            mask.forward(h, z_m, m_hat, n_text,
                         cap ? &cap->mask_gate : nullptr),
            shared.forward(h)};
  }
};

// Residual blend: h + Σ_e w_e · (f_e − h). Requires each weight row to sum
// to 1; with that precondition the result equals the convex combination
// Σ_e w_e · f_e.
template <class S>
Tensor<S> aggregate(const Tensor<S>& h, const std::vector<Tensor<S>>& outs,
                    const Tensor<S>& weights) {
  const int n = weights.dim(0), e = weights.dim(1);
  if ((int)outs.size() != e)
    throw TensorError("aggregate", "expert count mismatch", weights.shape());
  const S* wv = weights.value().data();
  for (int r = 0; r < n; ++r) {
    double sum = 0;
    for (int c = 0; c < e; ++c) sum += (double)wv[(size_t)r * e + c];
    if (std::abs(sum - 1.0) > 1e-6)
      throw TensorError("aggregate", "weight rows must sum to 1",
                        weights.shape());
  }
  auto acc = h;
  for (int c = 0; c < e; ++c)
    acc = add(acc, mul(slice(weights, 1, c, 1), sub(outs[(size_t)c], h)));
  return acc;
}

}  // namespace care
