#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "care/config.hpp"
#include "care/encoders.hpp"
#include "care/params.hpp"
#include "care/tensor.hpp"

// Soft-mask refinement: a small refiner (3x3 conv over the stacked target
// hidden state, reference latents, and previous mask, then a 1x1
// projection through a sigmoid) produces a residual field that updates the
// mask each denoising step, plus the boundary-consistency loss that
// supervises it. The 1x1 projection starts at zero, so an untrained
// refiner emits a flat field of 0.5.

namespace care {

// Initial soft mask: per-patch coverage of the coarse box, kept fractional.
template <class S>
Tensor<S> initial_soft_mask(const Mask& box, int p) {
  auto occ = patch_occupancy(box, p);
  std::vector<S> v(occ.begin(), occ.end());
  return Tensor<S>::from({(int)occ.size(), 1}, std::move(v));
}

// Supervision grid: per-patch coverage of the fine mask, thresholded at
// one half (a half-covered patch counts as masked).
template <class S>
Tensor<S> target_grid_mask(const Mask& fine, int p) {
  auto occ = patch_occupancy(fine, p);
  std::vector<S> v(occ.size());
  for (size_t i = 0; i < occ.size(); ++i) v[i] = occ[i] >= 0.5f ? S(1) : S(0);
  return Tensor<S>::from({(int)occ.size(), 1}, std::move(v));
}

template <class S>
struct MaskRepaint {
  static constexpr int kHidden = 8;
  int d = 0, g = 0;
  RepaintMode mode = RepaintMode::Centered;
  Tensor<S> conv_w, conv_b;  // {8, 2d+1, 3, 3}
  Tensor<S> proj_w, proj_b;  // 1x1 head, zero-init

  MaskRepaint() = default;
  MaskRepaint(ParamSet<S>& ps, const std::string& prefix, int width, int grid,
              RepaintMode m)
      : d(width), g(grid), mode(m) {
    conv_w = ps.randn(prefix + ".convw", {kHidden, 2 * width + 1, 3, 3},
                      1.0 / std::sqrt(9.0 * (2 * width + 1)));
    conv_b = ps.zeros(prefix + ".convb", {kHidden});
    proj_w = ps.zeros(prefix + ".projw", {1, kHidden, 1, 1});
    proj_b = ps.zeros(prefix + ".projb", {1});
  }

  // h_target: {g*g, d} hidden state of the target segment; z_r: {g*g, d}
  // reference latents; m_prev: {g*g, 1} current mask in [0,1].
  Tensor<S> step(const Tensor<S>& h_target, const Tensor<S>& z_r,
                 const Tensor<S>& m_prev) const {
    const int n_v = g * g;
    if (h_target.dim(0) != n_v || z_r.dim(0) != n_v || m_prev.dim(0) != n_v)
      throw TensorError("repaint_step", "grid mismatch", h_target.shape(),
                        m_prev.shape());
    for (S v : m_prev.value())
      if (v < S(0) || v > S(1))
        throw TensorError("repaint_step", "mask outside [0,1]");

    auto x_h = reshape(transpose2d(h_target), {d, g, g});
    auto x_r = reshape(transpose2d(z_r), {d, g, g});
    auto x_m = reshape(transpose2d(m_prev), {1, g, g});
    auto x = concat<S>({x_h, x_r, x_m}, 0);
    auto delta =
        sigmoid(conv2d(conv2d(x, conv_w, conv_b), proj_w, proj_b));
    auto dcol = transpose2d(reshape(delta, {1, n_v}));
    auto offset =
        mode == RepaintMode::Literal ? dcol : add_scalar(dcol, -0.5);
    return clip(add(m_prev, offset), 0.0, 1.0);
  }
};

// L1 mismatch of forward differences against the supervision mask plus a
// smoothness term: per-axis three-point second differences, each term
// counted only where its full stencil fits inside the grid.
template <class S>
Tensor<S> boundary_loss(const Tensor<S>& m_hat, const Tensor<S>& m_gt,
                        double lambda_smooth) {
  if (m_hat.rank() != 2 || m_hat.shape() != m_gt.shape())
    throw TensorError("boundary_loss", "grid mismatch", m_hat.shape(),
                      m_gt.shape());
  const int h = m_hat.dim(0), w = m_hat.dim(1);
  auto loss = Tensor<S>::zeros({1});
  if (w >= 2) {
    auto dx = [&](const Tensor<S>& m) {
      return sub(slice(m, 1, 1, w - 1), slice(m, 1, 0, w - 1));
    };
    loss = add(loss, sum_all(abs(sub(dx(m_hat), dx(m_gt)))));
  }
  if (h >= 2) {
    auto dy = [&](const Tensor<S>& m) {
      return sub(slice(m, 0, 1, h - 1), slice(m, 0, 0, h - 1));
    };
    loss = add(loss, sum_all(abs(sub(dy(m_hat), dy(m_gt)))));
  }
  if (lambda_smooth != 0.0) {
    auto smooth = Tensor<S>::zeros({1});
    if (w >= 3) {
      auto sxx = add(sub(slice(m_hat, 1, 0, w - 2),
                         mul_scalar(slice(m_hat, 1, 1, w - 2), 2.0)),
                     slice(m_hat, 1, 2, w - 2));
      smooth = add(smooth, sum_all(abs(sxx)));
    }
    if (h >= 3) {
      auto syy = add(sub(slice(m_hat, 0, 0, h - 2),
                         mul_scalar(slice(m_hat, 0, 1, h - 2), 2.0)),
                     slice(m_hat, 0, 2, h - 2));
      smooth = add(smooth, sum_all(abs(syy)));
    }
    loss = add(loss, mul_scalar(smooth, lambda_smooth));
  }
  return loss;
}

}  // namespace care
