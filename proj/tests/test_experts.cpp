#include <doctest.h>

#include <cmath>
#include <vector>

#include "care/experts.hpp"
#include "care/gradcheck.hpp"

using namespace care;

namespace {

struct Fixture {
  ParamSet<float> ps{51};
  ExpertBank<float> bank;
  Tensor<float> h, c_p, z_b, z_r, z_m, m_hat;
  int n_text = 4, g = 4, d = 16;

  Fixture() : bank(ps, "bank", 16, 4) {
    auto rng = rng_for(51, "expert-test");
    const int n = n_text + 2 * g * g;  // two visual segments
    h = Tensor<float>::randn({n, d}, rng);
    c_p = Tensor<float>::randn({n_text, d}, rng);
    z_b = Tensor<float>::randn({g * g, d}, rng);
    z_r = Tensor<float>::randn({g * g, d}, rng);
    z_m = Tensor<float>::randn({g * g, d}, rng);
    m_hat = Tensor<float>::uniform({g * g, 1}, rng, 0.0, 1.0);
  }
};

template <class S>
void fill_adapter(ExpertAdapter<S>& a, uint64_t salt) {
  auto rng = rng_for(salt, "adapter-fill");
  std::normal_distribution<double> dist(0.0, 0.2);
  for (auto& v : a.w.mutable_value()) v = S(dist(rng));
  for (auto& v : a.b.mutable_value()) v = S(dist(rng));
}

}  // namespace

TEST_CASE("every expert is the identity at initialization") {
  Fixture f;
  auto outs = f.bank.forward_all(f.h, f.c_p, f.z_b, f.z_r, f.z_m, f.m_hat,
                                 f.n_text);
  REQUIRE(outs.size() == 5);
  for (auto& out : outs) {
    REQUIRE(out.shape() == f.h.shape());
    for (size_t i = 0; i < out.value().size(); ++i)
      CHECK(out.value()[i] == f.h.value()[i]);
  }
}

TEST_CASE("trained experts leave the identity; shapes are preserved") {
  Fixture f;
  fill_adapter(f.bank.text.adapter, 1);
  fill_adapter(f.bank.base.adapter, 2);
  fill_adapter(f.bank.ref.adapter, 3);
  fill_adapter(f.bank.mask.adapter, 4);
  fill_adapter(f.bank.shared.adapter, 5);
  auto outs = f.bank.forward_all(f.h, f.c_p, f.z_b, f.z_r, f.z_m, f.m_hat,
                                 f.n_text);
  for (auto& out : outs) {
    CHECK(out.shape() == f.h.shape());
    double moved = 0;
    for (size_t i = 0; i < out.value().size(); ++i)
      moved += std::abs(out.value()[i] - f.h.value()[i]);
    CHECK(moved > 1e-3);
  }
}

TEST_CASE("mask expert passes text tokens through unchanged") {
  Fixture f;
  fill_adapter(f.bank.mask.adapter, 7);
  auto out = f.bank.mask.forward(f.h, f.z_m, f.m_hat, f.n_text);
  for (int r = 0; r < f.n_text; ++r)
    for (int j = 0; j < f.d; ++j)
      CHECK(out.value()[(size_t)r * f.d + j] ==
            f.h.value()[(size_t)r * f.d + j]);
  double moved = 0;
  for (size_t i = (size_t)f.n_text * f.d; i < out.value().size(); ++i)
    moved += std::abs(out.value()[i] - f.h.value()[i]);
  CHECK(moved > 1e-3);
}

TEST_CASE("zero soft mask shuts the conv gate") {
  Fixture f;
  auto zero_mask = Tensor<float>::zeros({f.g * f.g, 1});
  auto out = f.bank.mask.forward(f.h, f.z_m, zero_mask, f.n_text);
  for (size_t i = 0; i < out.value().size(); ++i)
    CHECK(out.value()[i] == f.h.value()[i]);

  // Even with a trained adapter the gated core no longer sees h: two
  // different inputs produce identical deltas.
  fill_adapter(f.bank.mask.adapter, 8);
  auto rng = rng_for(52, "expert-test");
  auto h2 = Tensor<float>::randn(f.h.shape(), rng);
  auto o1 = f.bank.mask.forward(f.h, f.z_m, zero_mask, f.n_text);
  auto o2 = f.bank.mask.forward(h2, f.z_m, zero_mask, f.n_text);
  for (size_t i = 0; i < o1.value().size(); ++i)
    CHECK(o1.value()[i] - f.h.value()[i] ==
          doctest::Approx(o2.value()[i] - h2.value()[i]).epsilon(1e-5));
}

TEST_CASE("mask expert validates the soft mask") {
  Fixture f;
  auto bad = Tensor<float>::full({f.g * f.g, 1}, 1.5);
  CHECK_THROWS_AS((void)f.bank.mask.forward(f.h, f.z_m, bad, f.n_text),
                  TensorError);
  auto wrong = Tensor<float>::zeros({f.g * f.g + 1, 1});
  CHECK_THROWS_AS((void)f.bank.mask.forward(f.h, f.z_m, wrong, f.n_text),
                  TensorError);
}

TEST_CASE("aggregate with identity experts returns the input") {
  Fixture f;
  auto outs = f.bank.forward_all(f.h, f.c_p, f.z_b, f.z_r, f.z_m, f.m_hat,
                                 f.n_text);
  auto w = Tensor<float>::full({f.h.dim(0), 5}, 0.2);
  auto agg = aggregate(f.h, outs, w);
  for (size_t i = 0; i < agg.value().size(); ++i)
    CHECK(agg.value()[i] == f.h.value()[i]);
}

TEST_CASE("one-hot weights collapse aggregation onto a single expert") {
  Fixture f;
  fill_adapter(f.bank.text.adapter, 11);
  fill_adapter(f.bank.base.adapter, 12);
  fill_adapter(f.bank.ref.adapter, 13);
  fill_adapter(f.bank.mask.adapter, 14);
  fill_adapter(f.bank.shared.adapter, 15);
  auto outs = f.bank.forward_all(f.h, f.c_p, f.z_b, f.z_r, f.z_m, f.m_hat,
                                 f.n_text);
  const int n = f.h.dim(0);
  for (int e = 0; e < 5; ++e) {
    std::vector<float> wv((size_t)n * 5, 0.0f);
    for (int r = 0; r < n; ++r) wv[(size_t)r * 5 + e] = 1.0f;
    auto agg = aggregate(f.h, outs, Tensor<float>::from({n, 5}, wv));
    for (size_t i = 0; i < agg.value().size(); ++i)
      CHECK(agg.value()[i] ==
            doctest::Approx(outs[(size_t)e].value()[i]).epsilon(1e-6));
  }
}

TEST_CASE("residual blend equals the convex combination when rows sum to 1") {
  Fixture f;
  fill_adapter(f.bank.text.adapter, 21);
  fill_adapter(f.bank.base.adapter, 22);
  fill_adapter(f.bank.ref.adapter, 23);
  fill_adapter(f.bank.mask.adapter, 24);
  fill_adapter(f.bank.shared.adapter, 25);
  auto outs = f.bank.forward_all(f.h, f.c_p, f.z_b, f.z_r, f.z_m, f.m_hat,
                                 f.n_text);
  const int n = f.h.dim(0);
  auto rng = rng_for(53, "expert-test");
  auto w = softmax(Tensor<float>::randn({n, 5}, rng), 1);
  auto agg = aggregate(f.h, outs, w);

  // Direct form: Σ_e w_e · f_e.
  auto direct = mul(slice(w, 1, 0, 1), outs[0]);
  for (int e = 1; e < 5; ++e)
    direct = add(direct, mul(slice(w, 1, e, 1), outs[(size_t)e]));
  for (size_t i = 0; i < agg.value().size(); ++i)
    CHECK(agg.value()[i] == doctest::Approx(direct.value()[i]).epsilon(1e-6));

  // Convex hull: each output coordinate within the expert min/max.
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < f.d; ++j) {
      float lo = 1e30f, hi = -1e30f;
      for (int e = 0; e < 5; ++e) {
        const float v = outs[(size_t)e].value()[(size_t)r * f.d + j];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      const float a = agg.value()[(size_t)r * f.d + j];
      CHECK(a >= lo - 1e-5f);
      CHECK(a <= hi + 1e-5f);
    }
}

TEST_CASE("aggregate rejects weight rows that do not sum to 1") {
  Fixture f;
  auto outs = f.bank.forward_all(f.h, f.c_p, f.z_b, f.z_r, f.z_m, f.m_hat,
                                 f.n_text);
  auto w = Tensor<float>::full({f.h.dim(0), 5}, 0.3);
  CHECK_THROWS_WITH_AS((void)aggregate(f.h, outs, w),
                       doctest::Contains("sum to 1"), TensorError);
}

TEST_CASE("weights are token-local: a row change only moves that token") {
  Fixture f;
  fill_adapter(f.bank.text.adapter, 31);
  fill_adapter(f.bank.shared.adapter, 32);
  auto outs = f.bank.forward_all(f.h, f.c_p, f.z_b, f.z_r, f.z_m, f.m_hat,
                                 f.n_text);
  const int n = f.h.dim(0);
  std::vector<float> wv((size_t)n * 5, 0.2f);
  auto agg1 = aggregate(f.h, outs, Tensor<float>::from({n, 5}, wv));
  wv[(size_t)6 * 5 + 0] = 0.6f;
  wv[(size_t)6 * 5 + 4] = -0.2f;  // keep the row sum at 1
  auto agg2 = aggregate(f.h, outs, Tensor<float>::from({n, 5}, wv));
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < f.d; ++j) {
      const float a = agg1.value()[(size_t)r * f.d + j];
      const float b = agg2.value()[(size_t)r * f.d + j];
      if (r == 6)
        continue;
      else
        CHECK(a == b);
    }
}

TEST_CASE("expert gradients match finite differences") {
  ParamSet<double> ps(54);
  ExpertBank<double> bank(ps, "bank", 8, 3);
  fill_adapter(bank.text.adapter, 41);
  fill_adapter(bank.base.adapter, 42);
  fill_adapter(bank.ref.adapter, 43);
  fill_adapter(bank.mask.adapter, 44);
  fill_adapter(bank.shared.adapter, 45);
  auto rng = rng_for(54, "expert-test");
  const int n_text = 3, g = 3, d = 8;
  const int n = n_text + 2 * g * g;
  auto h = Tensor<double>::randn({n, d}, rng);
  auto c_p = Tensor<double>::randn({n_text, d}, rng);
  auto z_b = Tensor<double>::randn({g * g, d}, rng);
  auto z_r = Tensor<double>::randn({g * g, d}, rng);
  auto z_m = Tensor<double>::randn({g * g, d}, rng);
  auto m_hat = Tensor<double>::uniform({g * g, 1}, rng, 0.2, 0.8);
  auto wts = softmax(Tensor<double>::randn({n, 5}, rng), 1);

  std::vector<Tensor<double>> inputs = {h,
                                        c_p,
                                        z_m,
                                        m_hat,
                                        bank.text.wq,
                                        bank.text.adapter.w,
                                        bank.base.wv,
                                        bank.ref.w_gamma,
                                        bank.ref.adapter.b,
                                        bank.mask.conv_w,
                                        bank.mask.conv_b,
                                        bank.mask.adapter.w,
                                        bank.shared.w1};
  auto f = [&](std::vector<Tensor<double>>&) {
    auto outs =
        bank.forward_all(h, c_p, z_b, z_r, z_m, m_hat, n_text);
    auto agg = aggregate(h, outs, wts);
    return sum_all(mul(agg, agg));
  };
  auto report = grad_check(f, inputs, 1e-4);
  CHECK(report.deterministic);
  CHECK(report.max_rel_err < 1e-5);
}
