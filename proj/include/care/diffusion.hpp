#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <numbers>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "care/model.hpp"

// Denoising training and sampling: cosine noise schedule over t in [0, T],
// composite objective (noise MSE + weighted load-balance, mask-boundary,
// and fusion-smoothness terms), AdamW with decoupled weight decay and
// cosine learning-rate decay, a 0.999 parameter EMA, and a deterministic
// eta=0 sampler whose refined mask feeds the next step's routing. Every
// random draw is keyed by (seed, stream, step, index), so results are
// independent of evaluation order and thread count.

namespace care {

inline int thread_budget() {
  const char* env = std::getenv("CARE_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  return std::clamp(n, 1, 16);
}

// alpha_bar over integer timesteps 0..T: 1 at t=0, floored near zero at
// t=T, strictly decreasing in between.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int t_diff, double shift = 0.008,
                         double floor = 1e-4) {
    if (t_diff < 1)
      throw TensorError("schedule", "needs at least one step");
    auto sq_cos = [&](double t) {
      double c = std::cos((t / t_diff + shift) / (1.0 + shift) *
                          std::numbers::pi / 2.0);
      return c * c;
    };
    const double base = sq_cos(0.0);
    abar_.resize(t_diff + 1);
    for (int t = 0; t <= t_diff; ++t)
      abar_[t] = std::max(sq_cos((double)t) / base, floor);
  }

  int total() const { return (int)abar_.size() - 1; }
  double alpha_bar(int t) const {
    if (t < 0 || t >= (int)abar_.size())
      throw TensorError("schedule", "timestep out of range");
    return abar_[t];
  }

 private:
  std::vector<double> abar_;
};

template <class S>
Tensor<S> add_noise(const Tensor<S>& x0, const Tensor<S>& eps,
                    const NoiseSchedule& ns, int t) {
  if (x0.shape() != eps.shape())
    throw TensorError("add_noise", "shape mismatch", x0.shape(), eps.shape());
  const double ab = ns.alpha_bar(t);
  return add(mul_scalar(x0, std::sqrt(ab)),
             mul_scalar(eps, std::sqrt(1.0 - ab)));
}

// Linear temperature anneal from tau_start to tau_end over the first
// anneal_frac of training, then flat.
inline double anneal_tau(const RunConfig& cfg, int step) {
  const double span = cfg.anneal_frac * cfg.steps;
  if (span <= 0.0) return cfg.tau_end;
  const double f = std::min(1.0, (double)step / span);
  const double c = std::cos(std::numbers::pi / 2.0 * f);
  return cfg.tau_end + (cfg.tau_start - cfg.tau_end) * c * c;
}

inline double cosine_lr(const RunConfig& cfg, int step) {
  if (cfg.steps <= 1) return cfg.lr;
  const double f = (double)step / (double)(cfg.steps - 1);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * f));
}

// Composite objective for one sample. `total` stays attached to the graph;
// the per-term doubles are detached bookkeeping. The load and smoothness
// terms average over routed layers and vanish when routing is bypassed.
template <class S>
struct StepLosses {
  Tensor<S> total;
  double diff = 0.0, load = 0.0, mask = 0.0, mix = 0.0;
};

template <class S>
StepLosses<S> composite_loss(const CareModel<S>& model,
                             const EncodedSample<S>& enc,
                             const ForwardResult<S>& out,
                             const Tensor<S>& eps) {
  const auto& cfg = model.cfg;
  auto err = sub(out.eps_hat, eps);
  auto l_diff = mean_all(mul(err, err));

  auto l_load = Tensor<S>::zeros({1});
  auto l_mix = Tensor<S>::zeros({1});
  if (!out.layers.empty()) {
    for (const auto& layer : out.layers) {
      l_load = add(l_load, load_balance_loss(layer.decision.pi));
      l_mix = add(l_mix,
                  tv_loss(layer.decision.mixed, cfg.n_text, cfg.grid(), 1.0));
    }
    l_load = mul_scalar(l_load, 1.0 / (double)out.layers.size());
    l_mix = mul_scalar(l_mix, 1.0 / (double)out.layers.size());
  }

  const int g = cfg.grid();
  auto l_mask = boundary_loss(reshape(out.m_refined, {g, g}),
                              reshape(enc.m_gt, {g, g}), cfg.lambda_smooth);

  StepLosses<S> r;
  r.total = add(add(l_diff, mul_scalar(l_load, cfg.lambda_load)),
                add(mul_scalar(l_mask, cfg.lambda_mask),
                    mul_scalar(l_mix, cfg.lambda_mix)));
  r.diff = (double)l_diff.value()[0];
  r.load = (double)l_load.value()[0];
  r.mask = (double)l_mask.value()[0];
  r.mix = (double)l_mix.value()[0];
  return r;
}

// AdamW with decoupled weight decay over the trainable parameters. Moment
// state is indexed by registration order. step() assumes the caller already
// checked gradients for finiteness.
template <class S>
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
  int t = 0;
  std::vector<std::vector<S>> m, v;

  explicit AdamW(const ParamSet<S>& ps, double wd) : weight_decay(wd) {
    m.resize(ps.size());
    v.resize(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
      const auto& p = ps.items()[i].second;
      m[i].assign(p.numel(), S(0));
      v[i].assign(p.numel(), S(0));
    }
  }

  void step(ParamSet<S>& ps, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (size_t i = 0; i < ps.size(); ++i) {
      auto& p = ps.items()[i].second;
      if (!p.requires_grad()) continue;
      const auto& g = p.grad();
      auto& val = p.mutable_value();
      for (size_t j = 0; j < val.size(); ++j) {
        const S gj = g.empty() ? S(0) : g[j];
        m[i][j] = S(beta1) * m[i][j] + S(1.0 - beta1) * gj;
        v[i][j] = S(beta2) * v[i][j] + S(1.0 - beta2) * gj * gj;
        const double mh = (double)m[i][j] / bc1;
        const double vh = (double)v[i][j] / bc2;
        val[j] -= S(lr * (mh / (std::sqrt(vh) + eps) + weight_decay * val[j]));
      }
    }
  }
};

// Exponential moving average of every parameter, stored alongside the
// instantaneous values in checkpoints under an "ema." prefix.
template <class S>
struct ParamEma {
  double decay;
  std::vector<std::vector<S>> shadow;

  ParamEma(const ParamSet<S>& ps, double d) : decay(d) {
    shadow.reserve(ps.size());
    for (const auto& [name, p] : ps.items()) shadow.push_back(p.value());
  }

  void update(const ParamSet<S>& ps) {
    for (size_t i = 0; i < ps.size(); ++i) {
      const auto& val = ps.items()[i].second.value();
      for (size_t j = 0; j < val.size(); ++j)
        shadow[i][j] =
            S(decay) * shadow[i][j] + S(1.0 - decay) * val[j];
    }
  }
};

template <class S>
std::vector<NamedTensor> checkpoint_tensors(const ParamSet<S>& ps,
                                            const ParamEma<S>& ema) {
  auto out = ps.snapshot();
  const size_t n = out.size();
  for (size_t i = 0; i < n; ++i) {
    NamedTensor nt;
    nt.name = "ema." + out[i].name;
    nt.shape = out[i].shape;
    nt.data.assign(ema.shadow[i].begin(), ema.shadow[i].end());
    out.push_back(std::move(nt));
  }
  return out;
}

inline int curriculum_switch_step(const RunConfig& cfg) {
  return (int)std::floor(cfg.curriculum_frac * cfg.steps);
}

// One training step over a batch: per-sample tapes evaluated (possibly on
// worker threads), gradient buffers reduced in fixed sample order, router
// logit EMAs updated with the batch mean, then AdamW + parameter EMA.
// Non-finite losses or gradients abort the step without touching state.
template <class S>
class Trainer {
 public:
  explicit Trainer(CareModel<S>& model)
      : model_(model),
        sched_(model.cfg.t_diff),
        opt_(model.params, model.cfg.weight_decay),
        ema_(model.params, model.cfg.ema_decay),
        spec_{model.cfg.image_size, model.cfg.n_text} {}

  const NoiseSchedule& schedule() const { return sched_; }
  const ParamEma<S>& ema() const { return ema_; }

  nlohmann::json train_step(int step) {
    const auto& cfg = model_.cfg;
    const double tau = anneal_tau(cfg, step);
    const double lr = cosine_lr(cfg, step);
    const int batch = cfg.batch;

    struct SampleOut {
      bool ok = false;
      double diff = 0, load = 0, mask = 0, mix = 0, total = 0;
      int task = 0;
      std::vector<std::vector<S>> grads;   // per param, empty when absent
      std::vector<std::vector<S>> logits;  // per routed layer
      std::vector<std::vector<S>> mixed;   // per routed layer
    };
    std::vector<SampleOut> outs(batch);

    auto run_sample = [&](int i) {
      SampleOut& so = outs[i];
      try {
        auto s = corpus_sample(cfg.seed, step, i, cfg.steps,
                               cfg.curriculum_frac, spec_);
        so.task = (int)s.task;
        auto rng = rng_for(cfg.seed, "train-noise", (uint64_t)step,
                           (uint64_t)i);
        const int t = 1 + (int)(rng() % (uint64_t)cfg.t_diff);
        auto eps =
            Tensor<S>::randn({cfg.n_visual(), TargetCodec::kDims}, rng);

        // The tape must cover encoding too, or the encoder parameters
        // drop out of the gradient.
        Tape<S> tape;
        auto enc = model_.encode(s);
        auto x0 = Tensor<S>::from({cfg.n_visual(), TargetCodec::kDims},
                                  std::vector<S>(enc.target_latent.begin(),
                                                 enc.target_latent.end()));
        auto x_t = add_noise(x0, eps, sched_, t);
        auto fwd = model_.forward(enc, x_t, t, enc.m0, tau, true);
        auto loss = composite_loss(model_, enc, fwd, eps);
        so.diff = loss.diff;
        so.load = loss.load;
        so.mask = loss.mask;
        so.mix = loss.mix;
        so.total = loss.diff + cfg.lambda_load * loss.load +
                   cfg.lambda_mask * loss.mask + cfg.lambda_mix * loss.mix;
        tape.backward(mul_scalar(loss.total, 1.0 / batch), false);

        so.grads.resize(model_.params.size());
        for (size_t p = 0; p < model_.params.size(); ++p) {
          const auto& param = model_.params.items()[p].second;
          if (!param.requires_grad()) continue;
          if (const auto* g = tape.grad_of(param)) so.grads[p] = *g;
        }
        for (const auto& layer : fwd.layers) {
          so.logits.push_back(layer.decision.logits.value());
          so.mixed.push_back(layer.decision.mixed.value());
        }
        so.ok = true;
      } catch (const TensorError&) {
        so.ok = false;
      }
    };

    const int workers = std::min(thread_budget(), batch);
    if (workers <= 1) {
      for (int i = 0; i < batch; ++i) run_sample(i);
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          for (int i = w; i < batch; i += workers) run_sample(i);
        });
      for (auto& th : pool) th.join();
    }

    bool aborted = false;
    for (const auto& so : outs) {
      if (!so.ok) aborted = true;
      for (const auto& g : so.grads)
        for (S x : g)
          if (!std::isfinite((double)x)) aborted = true;
    }

    double diff = 0, load = 0, mask = 0, mix = 0;
    std::vector<std::vector<double>> task_mass((size_t)kNumTasks);
    std::vector<int> task_count((size_t)kNumTasks, 0);
    if (!aborted) {
      // Fixed sample order keeps the reduction deterministic under any
      // worker count.
      for (int i = 0; i < batch; ++i) {
        const auto& so = outs[i];
        diff += so.diff / batch;
        load += so.load / batch;
        mask += so.mask / batch;
        mix += so.mix / batch;
        for (size_t p = 0; p < so.grads.size(); ++p) {
          if (so.grads[p].empty()) continue;
          auto& acc = model_.params.items()[p].second.node()->g;
          for (size_t j = 0; j < acc.size(); ++j) acc[j] += so.grads[p][j];
        }
        ++task_count[(size_t)so.task];
        if (!so.mixed.empty()) {
          auto& tm = task_mass[(size_t)so.task];
          tm.resize((size_t)kNumExperts + 1, 0.0);
          const int n = cfg.n_text + 4 * cfg.n_visual();
          for (const auto& mx : so.mixed)
            for (int r = 0; r < n; ++r)
              for (int c = 0; c <= kNumExperts; ++c)
                tm[(size_t)c] +=
                    (double)mx[(size_t)r * (kNumExperts + 1) + c] /
                    ((double)n * so.mixed.size());
        }
      }

      const int captured = (int)outs[0].logits.size();
      for (int l = 0; l < captured; ++l) {
        std::vector<S> mean(outs[0].logits[(size_t)l].size(), S(0));
        for (const auto& so : outs)
          for (size_t j = 0; j < mean.size(); ++j)
            mean[j] += so.logits[(size_t)l][j] / S(batch);
        model_.routers[(size_t)l].update_ema(Tensor<S>::from(
            {cfg.n_text + 4 * cfg.n_visual(), kNumExperts}, mean));
      }
      opt_.step(model_.params, lr);
      ema_.update(model_.params);
    }
    model_.params.zero_grads();

    const double total = diff + cfg.lambda_load * load +
                         cfg.lambda_mask * mask + cfg.lambda_mix * mix;
    nlohmann::json rec;
    rec["step"] = step;
    rec["L_total"] = total;
    rec["L_diff"] = diff;
    rec["L_load"] = load;
    rec["L_mask"] = mask;
    rec["L_mix"] = mix;
    rec["tau"] = tau;
    rec["lr"] = lr;
    rec["stage"] = step < curriculum_switch_step(cfg) ? 1 : 2;
    rec["aborted"] = aborted;
    nlohmann::json mass = nlohmann::json::object();
    for (int k = 0; k < kNumTasks; ++k)
      if (task_count[(size_t)k] > 0 && !task_mass[(size_t)k].empty()) {
        auto arr = task_mass[(size_t)k];
        for (auto& x : arr) x /= task_count[(size_t)k];
        mass[task_name((Task)k)] = arr;
      }
    rec["mass"] = mass;
    return rec;
  }

  // Full run: one JSONL record per step.
  std::vector<std::string> run(
      const std::function<void(int, const nlohmann::json&)>& on_step = {}) {
    std::vector<std::string> lines;
    lines.reserve((size_t)model_.cfg.steps);
    for (int step = 0; step < model_.cfg.steps; ++step) {
      auto rec = train_step(step);
      if (on_step) on_step(step, rec);
      lines.push_back(rec.dump());
    }
    return lines;
  }

 private:
  CareModel<S>& model_;
  NoiseSchedule sched_;
  AdamW<S> opt_;
  ParamEma<S> ema_;
  TaskSpec spec_;
};

// Deterministic eta=0 sampling from pure noise on the target segment.
// The refined mask from each step gates the next step's routing. Returns
// the final clean latent plus per-step mask and fusion-weight traces.
template <class S>
struct SampleTrace {
  Tensor<S> x0;                                // {n_v, kDims}
  std::vector<std::vector<S>> masks;           // per step, n_v values
  std::vector<std::vector<std::vector<S>>> mixed;  // per step, per layer
  std::vector<std::vector<ExpertCapture<S>>> captures;  // when requested
};

template <class S>
SampleTrace<S> sample(const CareModel<S>& model, const EncodedSample<S>& enc,
                      const NoiseSchedule& sched, int steps,
                      uint64_t noise_seed, bool capture = false) {
  const auto& cfg = model.cfg;
  const int T = sched.total();
  steps = std::clamp(steps, 1, T);

  auto rng = rng_for(noise_seed, "sample-noise");
  auto x = Tensor<S>::randn({cfg.n_visual(), TargetCodec::kDims}, rng);
  auto m = detach(enc.m0);

  SampleTrace<S> trace;
  for (int i = 0; i < steps; ++i) {
    const int t_cur = T - (T * i) / steps;
    const int t_next = T - (T * (i + 1)) / steps;
    auto out =
        model.forward(enc, x, t_cur, m, cfg.tau_end, false, capture);
    auto eps_hat = detach(out.eps_hat);

    const double ab_cur = sched.alpha_bar(t_cur);
    const double ab_next = sched.alpha_bar(t_next);
    auto x0_hat = clip(
        mul_scalar(sub(x, mul_scalar(eps_hat, std::sqrt(1.0 - ab_cur))),
                   1.0 / std::sqrt(ab_cur)),
        -4.0, 4.0);
    x = detach(add(mul_scalar(x0_hat, std::sqrt(ab_next)),
                   mul_scalar(eps_hat, std::sqrt(1.0 - ab_next))));

    m = detach(out.m_refined);
    trace.masks.push_back(m.value());
    std::vector<std::vector<S>> layer_mixed;
    for (const auto& layer : out.layers)
      layer_mixed.push_back(layer.decision.mixed.value());
    trace.mixed.push_back(std::move(layer_mixed));
    if (capture) trace.captures.push_back(std::move(out.captures));
  }
  trace.x0 = x;
  return trace;
}

// Pixel-space edit quality on one held-out sample: L1 inside and outside
// the ground-truth edit region, plus cosine similarity between the sampled
// latent and the clean target latent.
struct EvalMetrics {
  double masked_l1 = 0.0;
  double unmasked_l1 = 0.0;
  double latent_cos = 0.0;
};

template <class S>
EvalMetrics eval_one(const CareModel<S>& model, const NoiseSchedule& sched,
                     const EditSample& s, int steps, uint64_t noise_seed) {
  auto enc = model.encode(s);
  auto trace = sample(model, enc, sched, steps, noise_seed);
  std::vector<float> latent(trace.x0.value().begin(), trace.x0.value().end());
  auto img = model.codec.decode(latent, model.cfg.grid());

  EvalMetrics m;
  double in_sum = 0, out_sum = 0;
  long in_n = 0, out_n = 0;
  for (int y = 0; y < s.target.h; ++y)
    for (int x = 0; x < s.target.w; ++x) {
      double d = 0;
      for (int c = 0; c < 3; ++c)
        d += std::abs((double)img.at(y, x, c) - (double)s.target.at(y, x, c));
      d /= 3.0;
      if (s.fine_mask.at(y, x) >= 0.5f) {
        in_sum += d;
        ++in_n;
      } else {
        out_sum += d;
        ++out_n;
      }
    }
  m.masked_l1 = in_n ? in_sum / in_n : 0.0;
  m.unmasked_l1 = out_n ? out_sum / out_n : 0.0;

  auto target = model.codec.encode(s.target);
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < target.size(); ++i) {
    dot += (double)latent[i] * target[i];
    na += (double)latent[i] * latent[i];
    nb += (double)target[i] * target[i];
  }
  m.latent_cos = dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
  return m;
}

}  // namespace care
