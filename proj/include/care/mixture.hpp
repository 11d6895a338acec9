#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "care/dit.hpp"
#include "care/params.hpp"
#include "care/tensor.hpp"

// Latent mixture: fuse expert outputs as a convex combination with the
// routing weights broadcast across channels, then blend the fused state
// against the base expert with a timestep-adaptive sigmoid gate. A total
// variation penalty keeps per-expert weight maps spatially coherent over
// the visual grid.

namespace care {

// h_fuse = Σ_e w_e ⊙ f_e with token weights broadcast across channels.
// Requires each weight row to sum to 1; matches the residual blend of
// expert aggregation exactly under that precondition.
template <class S>
Tensor<S> fuse(const std::vector<Tensor<S>>& outs, const Tensor<S>& weights) {
  const int n = weights.dim(0), e = weights.dim(1);
  if ((int)outs.size() != e)
    throw TensorError("fuse", "expert count mismatch", weights.shape());
  const S* wv = weights.value().data();
  for (int r = 0; r < n; ++r) {
    double sum = 0;
    for (int c = 0; c < e; ++c) sum += (double)wv[(size_t)r * e + c];
    if (std::abs(sum - 1.0) > 1e-6)
      throw TensorError("fuse", "weight rows must sum to 1", weights.shape());
  }
  Tensor<S> acc;
  for (int c = 0; c < e; ++c) {
    auto term = mul(slice(weights, 1, c, 1), outs[c]);
    acc = c == 0 ? term : add(acc, term);
  }
  return acc;
}

// Timestep-adaptive gate: one scalar per (sample, step) from the pooled
// base-expert state and the sinusoidal step embedding. Zero-init weights
// give gamma = 0.5, so fused and base states start evenly blended.
template <class S>
struct MixGate {
  int d = 0, total = 0;
  Tensor<S> w, b;

  MixGate() = default;
  MixGate(ParamSet<S>& ps, const std::string& prefix, int width,
          int total_steps)
      : d(width), total(total_steps) {
    w = ps.zeros(prefix + ".w", {2 * width, 1});
    b = ps.zeros(prefix + ".b", {1});
  }

  Tensor<S> gate(const Tensor<S>& h_base, int s) const {
    auto pooled = mean_axis(h_base, 0, true);  // {1,d}
    auto psi = reshape(timestep_embed<S>(s, d, total), {1, d});
    auto feat = concat<S>({pooled, psi}, 1);  // {1,2d}
    return reshape(sigmoid(add(matmul(feat, w), b)), {1});
  }
};

// h_mix = (1-gamma)·h_fuse + gamma·h_base.
template <class S>
Tensor<S> mix(const Tensor<S>& h_fuse, const Tensor<S>& h_base,
              const Tensor<S>& gamma) {
  if (h_fuse.shape() != h_base.shape())
    throw TensorError("mix", "shape mismatch", h_fuse.shape(),
                      h_base.shape());
  auto one_minus = add_scalar(mul_scalar(gamma, -1.0), 1.0);
  return add(mul(h_fuse, one_minus), mul(h_base, gamma));
}

// L1 total variation of one scalar map: forward differences along each
// axis, each term counted only where the difference fits inside the grid.
template <class S>
Tensor<S> tv_grid(const Tensor<S>& m) {
  if (m.rank() != 2)
    throw TensorError("tv_grid", "rank-2 map expected", m.shape());
  const int h = m.dim(0), w = m.dim(1);
  auto loss = Tensor<S>::zeros({1});
  if (w >= 2)
    loss = add(loss,
               sum_all(abs(sub(slice(m, 1, 1, w - 1), slice(m, 1, 0, w - 1)))));
  if (h >= 2)
    loss = add(loss,
               sum_all(abs(sub(slice(m, 0, 1, h - 1), slice(m, 0, 0, h - 1)))));
  return loss;
}

// Total variation over every weight column, one g×g map per visual
// segment. Text rows carry no spatial meaning and are skipped.
template <class S>
Tensor<S> tv_loss(const Tensor<S>& weights, int n_text, int g,
                  double lambda_tv) {
  const int n = weights.dim(0), cols = weights.dim(1);
  const int n_v = g * g, vis = n - n_text;
  if (n_text < 0 || vis <= 0 || vis % n_v != 0)
    throw TensorError("tv_loss", "visual tokens do not fill grids",
                      weights.shape());
  const int segments = vis / n_v;
  auto loss = Tensor<S>::zeros({1});
  for (int c = 0; c < cols; ++c) {
    auto col = slice(weights, 1, c, 1);
    for (int s = 0; s < segments; ++s) {
      auto seg = slice(col, 0, n_text + s * n_v, n_v);
      loss = add(loss, tv_grid(reshape(seg, {g, g})));
    }
  }
  return mul_scalar(loss, lambda_tv);
}

}  // namespace care
