#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "care/encoders.hpp"
#include "care/gradcheck.hpp"

using namespace care;

namespace {

Image solid(float r, float g, float b) {
  return blank_image(32, 32, {r, g, b});
}

Mask zero_mask(int h = 32, int w = 32) {
  Mask m;
  m.h = h;
  m.w = w;
  m.v.assign((size_t)h * w, 0.0f);
  return m;
}

}  // namespace

TEST_CASE("text encoder maps zero ids through a zero table to zeros") {
  ParamSet<float> ps(7);
  TextEncoder<float> te(ps, "text", 4, 32);
  CHECK(te.table.dim(0) == vocab_size());
  for (auto& v : te.table.mutable_value()) v = 0.0f;
  auto out = te.encode({0, 0, 0, 0});
  CHECK(out.shape() == Shape{4, 32});
  for (float v : out.value()) CHECK(v == 0.0f);
}

TEST_CASE("text encoder shape contract and vocabulary bounds") {
  ParamSet<float> ps(7);
  TextEncoder<float> te(ps, "text", 4, 32);
  auto out = te.encode({1, 9, 17, 0});
  CHECK(out.shape() == Shape{4, 32});
  CHECK_THROWS_AS((void)te.encode({0, 0, 0, vocab_size()}), TensorError);
  CHECK_THROWS_AS((void)te.encode({-1, 0, 0, 0}), TensorError);
}

TEST_CASE("text encoder rows move apart after one gradient step") {
  ParamSet<float> ps(3);
  TextEncoder<float> te(ps, "text", 2, 8);
  const std::vector<int> ids = {3, 5};
  auto before = te.encode(ids).value();
  {
    Tape<float> tape;
    auto y = te.encode(ids);
    auto loss = sum_all(mul(y, y));
    tape.backward(loss);
  }
  const auto& g = te.table.grad();
  auto row_norm = [&](int r) {
    double acc = 0;
    for (int j = 0; j < 8; ++j) acc += std::abs(g[(size_t)r * 8 + j]);
    return acc;
  };
  CHECK(row_norm(3) > 0.0);
  CHECK(row_norm(5) > 0.0);
  CHECK(row_norm(7) == 0.0);  // untouched id stays untouched
  auto& w = te.table.mutable_value();
  for (size_t i = 0; i < w.size(); ++i) w[i] -= 0.1f * g[i];
  auto after = te.encode(ids).value();
  bool moved = false;
  for (size_t i = 0; i < after.size(); ++i)
    if (after[i] != before[i]) moved = true;
  CHECK(moved);
  for (int j = 0; j < 8; ++j)
    CHECK(after[j] != doctest::Approx(after[8 + j]).epsilon(1e-9));
}

TEST_CASE("patchify flattens patches row-major with channels innermost") {
  Image img = solid(0, 0, 0);
  img.at(5, 6, 1) = 0.25f;  // grid cell (1,1), offset dy=1 dx=2 c=1
  auto rows = patchify(img, 4);
  CHECK(rows.size() == (size_t)64 * 48);
  const size_t row = 1 * 8 + 1, col = (1 * 4 + 2) * 3 + 1;
  CHECK(rows[row * 48 + col] == 0.25f);
  CHECK(rows[0] == 0.0f);
  Image odd = blank_image(30, 30, {0, 0, 0});
  CHECK_THROWS_AS((void)patchify(odd, 4), TensorError);
}

TEST_CASE("image encoder sends a zero image through zero bias to zeros") {
  ParamSet<float> ps(11);
  ImageEncoder<float> enc(ps, "base", 4, 32);
  auto out = enc.encode(solid(0, 0, 0));
  CHECK(out.shape() == Shape{64, 32});
  for (float v : out.value()) CHECK(v == 0.0f);
}

TEST_CASE("absent reference is exactly the flag embedding on every row") {
  ParamSet<float> ps(11);
  ImageEncoder<float> enc(ps, "ref", 4, 32);
  auto out = enc.encode_absent(64);
  CHECK(out.shape() == Shape{64, 32});
  const auto& flag = enc.no_ref.value();
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 32; ++j)
      CHECK(out.value()[(size_t)i * 32 + j] == flag[(size_t)j]);
}

TEST_CASE("patch occupancy measures per-patch mean coverage") {
  Mask ones = zero_mask();
  ones.v.assign(ones.v.size(), 1.0f);
  auto occ = patch_occupancy(ones, 4);
  CHECK(occ.size() == 64);
  for (float v : occ) CHECK(v == 1.0f);

  Mask single = zero_mask();
  for (int dy = 0; dy < 4; ++dy)
    for (int dx = 0; dx < 4; ++dx) single.at(2 * 4 + dy, 3 * 4 + dx) = 1.0f;
  occ = patch_occupancy(single, 4);
  for (int i = 0; i < 64; ++i)
    CHECK(occ[(size_t)i] == (i == 2 * 8 + 3 ? 1.0f : 0.0f));

  Mask half = zero_mask();
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 4; ++dx) half.at(dy, dx) = 1.0f;
  occ = patch_occupancy(half, 4);
  CHECK(occ[0] == 0.5f);

  Mask bad = zero_mask();
  bad.at(0, 0) = 1.5f;
  CHECK_THROWS_AS((void)patch_occupancy(bad, 4), TensorError);
}

TEST_CASE("mask encoder projects occupancy; empty patches carry zero rows") {
  ParamSet<float> ps(13);
  MaskEncoder<float> enc(ps, "mask", 4, 32);
  Mask single = zero_mask();
  for (int dy = 0; dy < 4; ++dy)
    for (int dx = 0; dx < 4; ++dx) single.at(dy, 4 + dx) = 1.0f;
  auto out = enc.encode(single);
  CHECK(out.shape() == Shape{64, 32});
  const auto& w = enc.w.value();
  for (int j = 0; j < 32; ++j) {
    CHECK(out.value()[(size_t)1 * 32 + j] == doctest::Approx(w[(size_t)j]));
    CHECK(out.value()[(size_t)0 * 32 + j] == 0.0f);
  }
}

TEST_CASE("target codec centers flat patches and keeps 11/11/10 coefficients") {
  TargetCodec codec;
  auto latent = codec.encode(solid(0.5f, 0.5f, 0.5f));
  CHECK(latent.size() == (size_t)64 * 32);
  for (float v : latent) CHECK(v == doctest::Approx(0.0).epsilon(1e-6));

  latent = codec.encode(solid(0.05f, 0.05f, 0.05f));
  for (int r = 0; r < 64; ++r)
    for (int k = 0; k < 32; ++k) {
      float v = latent[(size_t)r * 32 + k];
      if (k == 0 || k == 11 || k == 22)
        CHECK(v == doctest::Approx(-0.9).epsilon(1e-5));
      else
        CHECK(std::abs(v) < 1e-5f);
    }

  latent = codec.encode(solid(0.95f, 0.95f, 0.95f));
  CHECK(latent[0] == doctest::Approx(0.9).epsilon(1e-5));
  CHECK(latent[11] == doctest::Approx(0.9).epsilon(1e-5));
  CHECK(latent[22] == doctest::Approx(0.9).epsilon(1e-5));
}

TEST_CASE("target codec roundtrips flat images exactly") {
  TargetCodec codec;
  for (int c = 0; c < palette_size(); ++c) {
    auto col = palette_color(c);
    Image img = solid(col[0], col[1], col[2]);
    Image back = codec.decode(codec.encode(img), 8);
    for (size_t i = 0; i < img.px.size(); ++i)
      CHECK(back.px[i] == doctest::Approx(img.px[i]).epsilon(1e-5));
  }
}

TEST_CASE("target codec is a deterministic low-pass projection") {
  auto rng = rng_for(5, "codec-test");
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  Image img = solid(0, 0, 0);
  for (auto& v : img.px) v = dist(rng);
  TargetCodec codec;
  auto a = codec.encode(img);
  auto b = codec.encode(img);
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);

  Image once = codec.decode(a, 8);
  double err = 0;
  for (size_t i = 0; i < img.px.size(); ++i) {
    CHECK(once.px[i] >= 0.0f);
    CHECK(once.px[i] <= 1.0f);
    err += std::abs(once.px[i] - img.px[i]);
  }
  CHECK(err / (double)img.px.size() < 0.2);

  // On a smooth image the decode clamp never fires, so decode-then-encode
  // is an exact projection: a second roundtrip reproduces the first.
  Image smooth = solid(0, 0, 0);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c)
        smooth.at(y, x, c) =
            0.5f + 0.2f * std::sin((x + y) * 0.2f + 0.7f * (float)c);
  Image p1 = codec.decode(codec.encode(smooth), 8);
  for (float v : p1.px) {
    CHECK(v > 0.001f);
    CHECK(v < 0.999f);
  }
  Image p2 = codec.decode(codec.encode(p1), 8);
  for (size_t i = 0; i < p1.px.size(); ++i)
    CHECK(p2.px[i] == doctest::Approx(p1.px[i]).epsilon(1e-5));
}

TEST_CASE("compose concatenates segments in order with a live segment map") {
  auto rng = rng_for(21, "compose-test");
  auto text = Tensor<float>::randn({4, 32}, rng);
  auto base = Tensor<float>::randn({16, 32}, rng);
  auto ref = Tensor<float>::randn({16, 32}, rng);
  auto mask = Tensor<float>::randn({16, 32}, rng);

  auto seq = compose(text, base, ref, mask);
  CHECK(seq.tokens.shape() == Shape{52, 32});
  CHECK(seq.total() == 52);
  CHECK(seq.grid == 4);
  CHECK(seq.span(Segment::Text) == std::pair<int, int>{0, 4});
  CHECK(seq.span(Segment::Base) == std::pair<int, int>{4, 16});
  CHECK(seq.span(Segment::Reference) == std::pair<int, int>{20, 16});
  CHECK(seq.span(Segment::Mask) == std::pair<int, int>{36, 16});
  CHECK_THROWS_AS((void)seq.span(Segment::Target), TensorError);

  CHECK(seq.segment_of(0) == Segment::Text);
  CHECK(seq.segment_of(3) == Segment::Text);
  CHECK(seq.segment_of(4) == Segment::Base);
  CHECK(seq.segment_of(20) == Segment::Reference);
  CHECK(seq.segment_of(51) == Segment::Mask);
  CHECK(seq.grid_of(4) == std::pair<int, int>{0, 0});
  CHECK(seq.grid_of(4 + 5) == std::pair<int, int>{1, 1});
  CHECK(seq.grid_of(4 + 15) == std::pair<int, int>{3, 3});
  CHECK_THROWS_AS((void)seq.grid_of(2), TensorError);

  const Tensor<float>* parts[] = {&text, &base, &ref, &mask};
  const Segment labels[] = {Segment::Text, Segment::Base, Segment::Reference,
                            Segment::Mask};
  for (int i = 0; i < 4; ++i) {
    auto got = seq.slice_segment(seq.tokens, labels[i]);
    const auto& want = parts[i]->value();
    REQUIRE(got.value().size() == want.size());
    CHECK(std::memcmp(got.value().data(), want.data(),
                      want.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("compose accepts an optional trailing target segment") {
  auto rng = rng_for(22, "compose-test");
  auto text = Tensor<float>::randn({4, 32}, rng);
  auto base = Tensor<float>::randn({16, 32}, rng);
  auto ref = Tensor<float>::randn({16, 32}, rng);
  auto mask = Tensor<float>::randn({16, 32}, rng);
  auto target = Tensor<float>::randn({16, 32}, rng);

  auto seq = compose(text, base, ref, mask, &target);
  CHECK(seq.tokens.shape() == Shape{68, 32});
  CHECK(seq.span(Segment::Target) == std::pair<int, int>{52, 16});
  CHECK(seq.segment_of(52) == Segment::Target);
  auto got = seq.slice_segment(seq.tokens, Segment::Target);
  CHECK(std::memcmp(got.value().data(), target.value().data(),
                    target.value().size() * sizeof(float)) == 0);
}

TEST_CASE("compose rejects mismatched widths and non-square grids") {
  auto rng = rng_for(23, "compose-test");
  auto text = Tensor<float>::randn({4, 16}, rng);
  auto base = Tensor<float>::randn({16, 32}, rng);
  auto ref = Tensor<float>::randn({16, 32}, rng);
  auto mask = Tensor<float>::randn({16, 32}, rng);
  CHECK_THROWS_WITH_AS((void)compose(text, base, ref, mask),
                       doctest::Contains("width mismatch"), TensorError);

  auto text32 = Tensor<float>::randn({4, 32}, rng);
  auto base15 = Tensor<float>::randn({15, 32}, rng);
  auto ref15 = Tensor<float>::randn({15, 32}, rng);
  auto mask15 = Tensor<float>::randn({15, 32}, rng);
  CHECK_THROWS_WITH_AS((void)compose(text32, base15, ref15, mask15),
                       doctest::Contains("square grid"), TensorError);
}

TEST_CASE("encoder pipeline gradients match finite differences") {
  TaskSpec spec;
  auto sample = gen_sample(Task::Replacement, 77, spec);
  ParamSet<double> ps(19);
  TextEncoder<double> te(ps, "text", 4, 8);
  ImageEncoder<double> be(ps, "base", 4, 8);
  ImageEncoder<double> re(ps, "ref", 4, 8);
  MaskEncoder<double> me(ps, "mask", 4, 8);

  std::vector<Tensor<double>> inputs = {te.table, te.pos,    be.w, be.b,
                                        re.w,     re.no_ref, me.w, me.b};
  auto f = [&](std::vector<Tensor<double>>&) {
    auto text = te.encode(sample.text_ids);
    auto base = be.encode(sample.base);
    auto ref = sample.has_reference ? re.encode(sample.reference)
                                    : re.encode_absent(64);
    auto mask = me.encode(sample.coarse_box);
    auto seq = compose(text, base, ref, mask);
    return sum_all(mul(seq.tokens, seq.tokens));
  };
  auto report = grad_check(f, inputs);
  CHECK(report.deterministic);
  CHECK(report.max_rel_err < 1e-6);
}
