#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "care/dit.hpp"
#include "care/gradcheck.hpp"

using namespace care;

TEST_CASE("timestep embedding starts at (0,1) pairs and stays bounded") {
  auto e0 = timestep_embed<float>(0, 16, 51);
  CHECK(e0.shape() == Shape{16});
  for (int j = 0; j < 8; ++j) {
    CHECK(e0.value()[(size_t)2 * j] == 0.0f);
    CHECK(e0.value()[(size_t)2 * j + 1] == 1.0f);
  }
  for (int s = 0; s < 51; ++s) {
    auto e = timestep_embed<float>(s, 16, 51);
    for (float v : e.value()) CHECK(std::abs(v) <= 1.0f);
  }
}

TEST_CASE("timestep embedding separates adjacent steps in every band") {
  auto e1 = timestep_embed<double>(1, 32, 51).value();
  auto e2 = timestep_embed<double>(2, 32, 51).value();
  for (int j = 0; j < 16; ++j) {
    const double d_sin = std::abs(e1[(size_t)2 * j] - e2[(size_t)2 * j]);
    const double d_cos =
        std::abs(e1[(size_t)2 * j + 1] - e2[(size_t)2 * j + 1]);
    CHECK(d_sin + d_cos > 1e-6);
  }
}

TEST_CASE("timestep embedding rejects steps outside the schedule") {
  CHECK_THROWS_AS((void)timestep_embed<float>(-1, 16, 51), TensorError);
  CHECK_THROWS_AS((void)timestep_embed<float>(51, 16, 51), TensorError);
  CHECK_THROWS_AS((void)timestep_embed<float>(0, 15, 51), TensorError);
}

TEST_CASE("low-rank side path with zero scale is bit-identical to the base") {
  ParamSet<float> ps(5);
  LoraLinear<float> ll(ps, "lin", 8, 8, 4, 0.0, true);
  CHECK(ll.a.shape() == Shape{8, 4});
  CHECK(ll.up.shape() == Shape{4, 8});
  auto rng = rng_for(5, "lora-test");
  auto x = Tensor<float>::randn({6, 8}, rng);
  auto base = ll.forward(x).value();
  for (auto& v : ll.up.mutable_value()) v = 1e6f;
  for (auto& v : ll.a.mutable_value()) v = 1e6f;
  auto skipped = ll.forward(x).value();
  CHECK(std::memcmp(base.data(), skipped.data(),
                    base.size() * sizeof(float)) == 0);
}

TEST_CASE("low-rank side path contributes scale times up(down(x))") {
  ParamSet<double> ps(6);
  LoraLinear<double> ll(ps, "lin", 8, 8, 2, 0.5, true);
  auto rng = rng_for(6, "lora-test");
  auto x = Tensor<double>::randn({3, 8}, rng);
  auto base = ll.forward(x).value();
  auto up = Tensor<double>::randn({2, 8}, rng, 0.3);
  ll.up.mutable_value() = up.value();
  auto with = ll.forward(x).value();
  auto side = matmul(matmul(x, ll.a), ll.up).value();
  for (size_t i = 0; i < with.size(); ++i)
    CHECK(with[i] - base[i] == doctest::Approx(0.5 * side[i]).epsilon(1e-9));
}

TEST_CASE("untrained block is exactly the identity") {
  ParamSet<float> ps(9);
  TimestepMlp<float> tm(ps, "tmlp", 16, 51);
  DitBlock<float> blk(ps, "block0", 16, 4, 1.0, true);
  auto rng = rng_for(9, "dit-test");
  auto h = Tensor<float>::randn({12, 16}, rng);
  for (int t : {0, 7, 50}) {
    auto out = blk.forward(h, tm.hidden(t));
    CHECK(out.shape() == Shape{12, 16});
    for (size_t i = 0; i < h.value().size(); ++i)
      CHECK(out.value()[i] == h.value()[i]);
  }
}

TEST_CASE("block rejects width mismatches") {
  ParamSet<float> ps(9);
  TimestepMlp<float> tm(ps, "tmlp", 16, 51);
  DitBlock<float> blk(ps, "block0", 16, 4, 1.0, true);
  auto rng = rng_for(9, "dit-test");
  auto bad = Tensor<float>::randn({12, 8}, rng);
  CHECK_THROWS_AS((void)blk.forward(bad, tm.hidden(3)), TensorError);
}

namespace {

template <class S>
void nudge(Tensor<S>& t, uint64_t salt) {
  auto rng = rng_for(salt, "nudge");
  std::normal_distribution<double> dist(0.0, 0.1);
  for (auto& v : t.mutable_value()) v += S(dist(rng));
}

}  // namespace

TEST_CASE("trained-away-from-zero block mixes tokens and reacts to t") {
  ParamSet<float> ps(10);
  TimestepMlp<float> tm(ps, "tmlp", 16, 51);
  DitBlock<float> blk(ps, "block0", 16, 4, 1.0, true);
  nudge(blk.wo.w, 1);
  nudge(blk.ff_w2, 2);
  nudge(blk.ada_w, 3);
  auto rng = rng_for(10, "dit-test");
  auto h = Tensor<float>::randn({12, 16}, rng);
  auto o1 = blk.forward(h, tm.hidden(1)).value();
  auto o2 = blk.forward(h, tm.hidden(40)).value();
  double moved = 0, tdiff = 0;
  for (size_t i = 0; i < o1.size(); ++i) {
    moved += std::abs(o1[i] - h.value()[i]);
    tdiff += std::abs(o1[i] - o2[i]);
  }
  CHECK(moved > 1e-3);
  CHECK(tdiff > 1e-6);
}

TEST_CASE("width is preserved through a stack of blocks") {
  ParamSet<float> ps(11);
  TimestepMlp<float> tm(ps, "tmlp", 8, 51);
  std::vector<DitBlock<float>> blocks;
  for (int i = 0; i < 3; ++i)
    blocks.emplace_back(ps, "block" + std::to_string(i), 8, 4, 1.0, true);
  auto rng = rng_for(11, "dit-test");
  auto h = Tensor<float>::randn({5, 8}, rng);
  auto tc = tm.hidden(5);
  for (auto& b : blocks) h = b.forward(h, tc);
  CHECK(h.shape() == Shape{5, 8});
}

TEST_CASE("block gradients match finite differences") {
  ParamSet<double> ps(12);
  TimestepMlp<double> tm(ps, "tmlp", 8, 51);
  DitBlock<double> blk(ps, "block0", 8, 2, 1.0, true);
  nudge(blk.wo.w, 4);
  nudge(blk.ff_w2, 5);
  nudge(blk.ada_w, 6);
  nudge(blk.wq.up, 7);
  auto rng = rng_for(12, "dit-test");
  auto h = Tensor<double>::randn({6, 8}, rng);

  std::vector<Tensor<double>> inputs = {h,         blk.wq.w,  blk.wq.a,
                                        blk.wq.up, blk.wo.w,  blk.ff_w1,
                                        blk.ff_w2, blk.ada_w, blk.ada_b,
                                        tm.w,      tm.b};
  auto f = [&](std::vector<Tensor<double>>&) {
    auto out = blk.forward(h, tm.hidden(13));
    return sum_all(mul(out, out));
  };
  // Step 1e-4: the tiniest gradients here (~2e-5) are roundoff-dominated
  // at the default step.
  auto report = grad_check(f, inputs, 1e-4);
  CHECK(report.deterministic);
  CHECK(report.max_rel_err < 1e-5);
}
