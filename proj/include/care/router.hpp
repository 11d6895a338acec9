#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "care/params.hpp"
#include "care/tensor.hpp"

// Token-wise routing over the modality experts: per-token keys (centered
// across the sequence), per-expert scoring MLPs conditioned on a global
// query, temperature-annealed dense softmax, top-K sparsification with
// renormalization, a constant shared-expert column, and the load-balancing
// penalty on the dense probabilities.

namespace care {

template <class S>
struct RoutingDecision {
  Tensor<S> pi;              // {N,E} dense probabilities
  std::vector<int> selected;  // N*K active expert indices, row-major
  Tensor<S> sparse;          // {N,E}, zero off the selected set
  Tensor<S> mixed;           // {N,E+1}, trailing shared-expert column
  Tensor<S> logits;          // {N,E} detached instantaneous logits
  Tensor<S> smoothed;        // {N,E} detached logits after smoothing
};

// Cosine annealing from tau_start at step 0 to tau_end at anneal_steps.
inline double anneal_temperature(int step, int anneal_steps, double tau_start,
                                 double tau_end) {
  const double frac =
      anneal_steps <= 0 ? 1.0
                        : std::min(1.0, (double)step / (double)anneal_steps);
  const double c = std::cos(std::numbers::pi * 0.5 * frac);
  return tau_end + (tau_start - tau_end) * c * c;
}

// Renormalized softmax restricted to each row's selected columns. The
// row max over the selected set is subtracted as a constant, so entries
// never overflow and gradients flow only through the kept logits.
template <class S>
Tensor<S> masked_renorm_softmax(const Tensor<S>& z,
                                const std::vector<int>& selected, int k) {
  const int n = z.dim(0), e = z.dim(1);
  if ((int)selected.size() != n * k)
    throw TensorError("masked_renorm_softmax", "selection size mismatch",
                      z.shape());
  std::vector<S> mask_v((size_t)n * e, S(0));
  std::vector<S> max_v((size_t)n);
  const S* zv = z.value().data();
  for (int r = 0; r < n; ++r) {
    S m = zv[(size_t)r * e + selected[(size_t)r * k]];
    for (int j = 0; j < k; ++j) {
      const int c = selected[(size_t)r * k + j];
      mask_v[(size_t)r * e + c] = S(1);
      m = std::max(m, zv[(size_t)r * e + c]);
    }
    max_v[(size_t)r] = m;
  }
  auto mask = Tensor<S>::from({n, e}, std::move(mask_v));
  auto rowmax = Tensor<S>::from({n, 1}, std::move(max_v));
  auto ex = mul(exp(mul(sub(z, rowmax), mask)), mask);
  return div(ex, sum_axis(ex, 1, true));
}

// Scales the routed columns by (1 - lambda) and appends a constant shared
// column equal to lambda, keeping each row a distribution.
template <class S>
Tensor<S> apply_shared(const Tensor<S>& sparse, double lambda_shared) {
  if (lambda_shared < 0.0 || lambda_shared >= 1.0)
    throw TensorError("apply_shared", "lambda_shared outside [0,1)");
  auto scaled = mul_scalar(sparse, 1.0 - lambda_shared);
  auto col = Tensor<S>::full({sparse.dim(0), 1}, lambda_shared);
  return concat<S>({scaled, col}, 1);
}

// Sum of squared deviations of the per-expert mean dense probability from
// the uniform 1/E, on pre-top-K probabilities.
template <class S>
Tensor<S> load_balance_loss(const Tensor<S>& pi) {
  auto dev = add_scalar(mean_axis(pi, 0), -1.0 / pi.dim(1));
  return sum_all(mul(dev, dev));
}

// Global query: mean-pooled text embedding concatenated with a learned
// task-label embedding, through one tanh layer.
template <class S>
struct RouterQuery {
  int d = 0;
  Tensor<S> task_table;  // {n_tasks, d}
  Tensor<S> w, b;        // {2d, d}, {d}

  RouterQuery() = default;
  RouterQuery(ParamSet<S>& ps, const std::string& prefix, int width,
              int n_tasks) : d(width) {
    task_table = ps.randn(prefix + ".task", {n_tasks, width}, 0.3);
    w = ps.randn(prefix + ".w", {2 * width, width},
                 1.0 / std::sqrt(2.0 * width));
    b = ps.zeros(prefix + ".b", {width});
  }

  Tensor<S> forward(const Tensor<S>& text_tokens, int task_id) const {
    auto pooled = mean_axis(text_tokens, 0, true);          // {1,d}
    auto task = embed_rows(task_table, {task_id});          // {1,d}
    auto cat = concat<S>({pooled, task}, 1);                // {1,2d}
    return reshape(tanh(add(matmul(cat, w), b)), {d});
  }
};

template <class S>
struct Router {
  int d = 0;
  int n_experts = 0;
  int k_active = 0;
  double beta = 0.9;
  double lambda_shared = 0.1;

  Tensor<S> w_key;  // {d,d}
  // Per-expert scoring MLP: tanh(centered_key W_k + q W_q + b_h) . u + b.
  std::vector<Tensor<S>> w_k_e, w_q_e, b_h_e, u_e, b_e;

  // Positionwise logit smoothing buffer, plain training state: consumed as
  // a constant, refreshed once per step, bypassed at evaluation.
  std::vector<S> ema_buf;

  Router() = default;
  Router(ParamSet<S>& ps, const std::string& prefix, int width, int experts,
         int k, double beta_r, double lam_shared)
      : d(width),
        n_experts(experts),
        k_active(k),
        beta(beta_r),
        lambda_shared(lam_shared) {
    if (k > experts)
      throw TensorError("router", "K exceeds expert count");
    w_key = ps.randn(prefix + ".key", {width, width},
                     1.0 / std::sqrt((double)width));
    for (int e = 0; e < experts; ++e) {
      const std::string p = prefix + ".e" + std::to_string(e);
      // Query path and biases start at zero: untrained logits depend only
      // on the centered keys and stay near-symmetric across experts.
      w_k_e.push_back(ps.randn(p + ".wk", {width, width},
                               0.5 / std::sqrt((double)width)));
      w_q_e.push_back(ps.zeros(p + ".wq", {width, width}));
      b_h_e.push_back(ps.zeros(p + ".bh", {width}));
      u_e.push_back(ps.randn(p + ".u", {width}, 0.1));
      b_e.push_back(ps.zeros(p + ".b", {1}));
    }
  }

  Tensor<S> logits_of(const Tensor<S>& h, const Tensor<S>& q) const {
    auto key = matmul(h, w_key);
    auto centered = sub(key, mean_axis(key, 0, true));
    auto qrow = reshape(q, {1, d});
    std::vector<Tensor<S>> cols;
    cols.reserve(n_experts);
    for (int e = 0; e < n_experts; ++e) {
      auto hid = tanh(add(
          add(matmul(centered, w_k_e[e]), matmul(qrow, w_q_e[e])), b_h_e[e]));
      cols.push_back(add(matmul(hid, reshape(u_e[e], {d, 1})), b_e[e]));
    }
    return concat<S>(cols, 1);
  }

  // use_ema blends the stored buffer into the logits (training); without it
  // routing is stateless in the instantaneous logits (evaluation).
  RoutingDecision<S> route(const Tensor<S>& h, const Tensor<S>& q, double tau,
                           bool use_ema) const {
    if (tau <= 0.0) throw TensorError("route", "temperature must be positive");
    auto alpha = logits_of(h, q);
    Tensor<S> abar = alpha;
    if (use_ema) {
      std::vector<S> buf = ema_buf;
      if (buf.empty()) buf.assign(alpha.numel(), S(0));
      if ((int64_t)buf.size() != alpha.numel())
        throw TensorError("route", "smoothing buffer shape mismatch",
                          alpha.shape());
      auto prev = Tensor<S>::from(alpha.shape(), std::move(buf));
      abar = add(mul_scalar(prev, beta), mul_scalar(alpha, 1.0 - beta));
    }
    auto z = mul_scalar(abar, 1.0 / tau);
    RoutingDecision<S> dec;
    dec.pi = softmax(z, 1);
    dec.selected = top_k_rows(abar, k_active);
    dec.sparse = masked_renorm_softmax(z, dec.selected, k_active);
    dec.mixed = apply_shared(dec.sparse, lambda_shared);
    dec.logits = detach(alpha);
    dec.smoothed = detach(abar);
    return dec;
  }

  // Folds the batch-mean instantaneous logits into the buffer; call exactly
  // once per training step.
  void update_ema(const Tensor<S>& batch_mean_logits) {
    const auto& v = batch_mean_logits.value();
    if (ema_buf.empty()) ema_buf.assign(v.size(), S(0));
    if (ema_buf.size() != v.size())
      throw TensorError("router", "EMA buffer shape mismatch",
                        batch_mean_logits.shape());
    for (size_t i = 0; i < v.size(); ++i)
      ema_buf[i] = S(beta * ema_buf[i] + (1.0 - beta) * v[i]);
  }
};

}  // namespace care
