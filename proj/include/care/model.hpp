#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "care/config.hpp"
#include "care/dit.hpp"
#include "care/encoders.hpp"
#include "care/experts.hpp"
#include "care/mixture.hpp"
#include "care/repaint.hpp"
#include "care/router.hpp"
#include "care/tasks.hpp"

// Full editing model: modality encoders feed a token sequence (with
// segment-type and grid-position embeddings) through a small transformer
// backbone; routed layers interleave every `routed_interval` blocks and run
// the router, the expert bank, convex aggregation, and the timestep gate;
// one shared refiner updates the soft mask from the last routed layer's
// target features; a zero-initialized head reads the noise prediction off
// the target segment. Ablation variants bypass components in the forward
// pass but always build the identical parameter set, so checkpoints stay
// interchangeable.

namespace care {

constexpr int kNumExperts = 4;  // routed experts: text, base, ref, mask

// Per-sample encoder outputs plus supervision masks, computed once and
// reused across denoising steps. Condition latents are raw encoder outputs;
// identity embeddings are added when the backbone input is assembled.
template <class S>
struct EncodedSample {
  Tensor<S> c_p, z_b, z_r, z_m;  // {n_text,d}, {n_v,d} x3
  Tensor<S> m0;                  // {n_v,1} box-downsampled starting mask
  Tensor<S> m_gt;                // {n_v,1} thresholded fine-mask supervision
  int task_id = 0;
  std::vector<float> target_latent;  // n_v x 32 clean target rows
};

template <class S>
struct LayerTrace {
  RoutingDecision<S> decision;
  Tensor<S> gamma;  // {1}; detached zero when the gate is bypassed
};

template <class S>
struct ForwardResult {
  Tensor<S> eps_hat;    // {n_v, 32} predicted noise on the target segment
  Tensor<S> m_refined;  // {n_v, 1}; the input mask when refinement is off
  std::vector<LayerTrace<S>> layers;        // per routed layer
  std::vector<ExpertCapture<S>> captures;   // per routed layer, on request
};

template <class S>
struct CareModel {
  RunConfig cfg;
  ParamSet<S> params;

  TextEncoder<S> text_enc;
  ImageEncoder<S> img_enc;  // shared by the base and reference segments
  MaskEncoder<S> mask_enc;
  TargetCodec codec;

  Tensor<S> type_table;              // {kNumSegments, d}
  Tensor<S> pos_table;               // {n_v, d}, shared across visual grids
  Tensor<S> target_in_w, target_in_b;  // noisy latent -> width
  Tensor<S> head_w, head_b;            // width -> noise latent, zero-init
  Tensor<S> head_mod_w, head_mod_b;    // timestep -> head scale/shift

  TimestepMlp<S> tmlp;
  std::vector<DitBlock<S>> blocks;
  RouterQuery<S> query;
  std::vector<Router<S>> routers;
  std::vector<ExpertBank<S>> banks;
  std::vector<MixGate<S>> gates;
  MaskRepaint<S> repaint;

  explicit CareModel(const RunConfig& c)
      : cfg(c),
        params(c.seed),
        text_enc(params, "enc.text", c.n_text, c.d),
        img_enc(params, "enc.img", c.patch, c.d),
        mask_enc(params, "enc.mask", c.patch, c.d),
        tmlp(params, "tmlp", c.d, c.t_diff + 1, !c.freeze_backbone),
        query(params, "query", c.d, kNumTasks),
        repaint(params, "repaint", c.d, c.grid(), c.repaint_mode) {
    type_table = params.randn("model.type", {kNumSegments, c.d}, 0.3);
    // Random (not zero) so grid cells are distinguishable from step one:
    // the target row for a cell can only copy the matching base row if
    // attention can tell the two cells apart.
    pos_table = params.randn("model.pos", {c.n_visual(), c.d}, 0.3);
    target_in_w = params.randn("model.tin.w", {TargetCodec::kDims, c.d},
                               1.0 / std::sqrt((double)TargetCodec::kDims));
    target_in_b = params.zeros("model.tin.b", {c.d});
    head_w = params.zeros("model.head.w", {c.d, TargetCodec::kDims});
    head_b = params.zeros("model.head.b", {TargetCodec::kDims});
    head_mod_w = params.zeros("model.head.mod_w", {c.d, 2 * c.d});
    head_mod_b = params.zeros("model.head.mod_b", {2 * c.d});
    for (int b = 0; b < c.blocks; ++b) {
      blocks.emplace_back(params, "block" + std::to_string(b), c.d,
                          c.lora_rank, c.lora_scale, !c.freeze_backbone);
      if (!routed_after(b)) continue;
      const std::string i = std::to_string((int)routers.size());
      routers.emplace_back(params, "route" + i, c.d, kNumExperts, c.k_active,
                           c.beta_router, c.lambda_shared);
      banks.emplace_back(params, "expert" + i, c.d, c.grid());
      gates.emplace_back(params, "gate" + i, c.d, c.t_diff + 1);
    }
  }

  bool routed_after(int block_idx) const {
    return (block_idx + 1) % cfg.routed_interval == 0;
  }
  int routed_count() const { return (int)routers.size(); }

  EncodedSample<S> encode(const EditSample& s) const {
    EncodedSample<S> enc;
    enc.c_p = text_enc.encode(s.text_ids);
    enc.z_b = img_enc.encode(s.base);
    enc.z_r = s.has_reference ? img_enc.encode(s.reference)
                              : img_enc.encode_absent(cfg.n_visual());
    enc.z_m = mask_enc.encode(s.coarse_box);
    enc.m0 = initial_soft_mask<S>(s.coarse_box, cfg.patch);
    enc.m_gt = target_grid_mask<S>(s.fine_mask, cfg.patch);
    enc.task_id = (int)s.task;
    enc.target_latent = codec.encode(s.target);
    return enc;
  }

  // Assembles [text; base; reference; mask; target] with type and position
  // embeddings added; x_t is the (noisy) target latent, {n_v, 32}.
  TokenSequence<S> backbone_input(const EncodedSample<S>& enc,
                                  const Tensor<S>& x_t) const {
    auto type_row = [&](Segment s) {
      return embed_rows(type_table, {(int)s});
    };
    auto text = add(enc.c_p, type_row(Segment::Text));
    auto base = add(add(enc.z_b, pos_table), type_row(Segment::Base));
    auto ref = add(add(enc.z_r, pos_table), type_row(Segment::Reference));
    auto mask = add(add(enc.z_m, pos_table), type_row(Segment::Mask));
    auto target = add(add(add(matmul(x_t, target_in_w), target_in_b),
                          pos_table),
                      type_row(Segment::Target));
    return compose(text, base, ref, mask, &target);
  }

  // One denoising forward pass. m_hat gates the mask expert at every routed
  // layer; the refiner updates it once, from the last routed layer's output.
  // use_ema selects the router's smoothed-logit training path.
  ForwardResult<S> forward(const EncodedSample<S>& enc, const Tensor<S>& x_t,
                           int t, const Tensor<S>& m_hat, double tau,
                           bool use_ema, bool capture = false) const {
    auto seq = backbone_input(enc, x_t);
    auto h = seq.tokens;
    auto tcond = tmlp.hidden(t);
    Tensor<S> q;
    if (cfg.variant != Variant::NoExperts)
      q = query.forward(enc.c_p, enc.task_id);

    ForwardResult<S> out;
    Tensor<S> h_routed;  // state right after the last routed layer
    int slot = 0;
    for (int b = 0; b < cfg.blocks; ++b) {
      h = blocks[b].forward(h, tcond);
      if (!routed_after(b)) continue;
      if (cfg.variant == Variant::NoExperts) {
        h = banks[slot].base.forward(h, enc.z_b);
      } else {
        auto dec = routers[slot].route(h, q, tau, use_ema);
        ExpertCapture<S> cap;
        auto outs =
            banks[slot].forward_all(h, enc.c_p, enc.z_b, enc.z_r, enc.z_m,
                                    m_hat, seq.n_text, capture ? &cap : nullptr);
        auto fused = aggregate(h, outs, dec.mixed);
        LayerTrace<S> trace;
        if (cfg.variant == Variant::NoMixture) {
          h = fused;
          trace.gamma = Tensor<S>::zeros({1});
        } else {
          auto gamma = gates[slot].gate(outs[1], t);
          h = mix(fused, outs[1], gamma);
          trace.gamma = gamma;
        }
        trace.decision = std::move(dec);
        out.layers.push_back(std::move(trace));
        if (capture) out.captures.push_back(std::move(cap));
      }
      h_routed = h;
      ++slot;
    }

    if (cfg.variant == Variant::NoRepaint || slot == 0) {
      out.m_refined = m_hat;
    } else {
      auto h_target = seq.slice_segment(h_routed, Segment::Target);
      out.m_refined = repaint.step(h_target, enc.z_r, m_hat);
    }

    // Timestep-modulated readout: the right blend of the noisy input and the
    // predicted clean content changes with t, and a bare layer norm ahead of
    // the linear head would erase that dependence.
    auto h_t = seq.slice_segment(h, Segment::Target);
    auto mvec = reshape(
        add(matmul(reshape(tcond, {1, cfg.d}), head_mod_w), head_mod_b),
        {2 * cfg.d});
    auto hsc = slice(mvec, 0, 0, cfg.d);
    auto hsh = slice(mvec, 0, cfg.d, cfg.d);
    auto hn = add(mul(layer_norm(h_t), add_scalar(hsc, 1.0)), hsh);
    out.eps_hat = add(matmul(hn, head_w), head_b);
    return out;
  }
};

}  // namespace care
