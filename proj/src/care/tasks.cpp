#include "care/tasks.hpp"

#include <algorithm>
#include <cmath>

#include "care/rng.hpp"

namespace care {

namespace {

const std::array<std::array<float, 3>, 8> kPalette = {{
    {0.05f, 0.05f, 0.05f},  // black
    {0.95f, 0.95f, 0.95f},  // white
    {0.90f, 0.10f, 0.10f},  // red
    {0.10f, 0.80f, 0.15f},  // green
    {0.15f, 0.20f, 0.90f},  // blue
    {0.95f, 0.85f, 0.10f},  // yellow
    {0.85f, 0.15f, 0.80f},  // magenta
    {0.10f, 0.80f, 0.85f},  // cyan
}};

// id 0 is <pad>; colors start at kColorBase, shapes at kShapeBase,
// style names at kStyleBase. The filler entries keep the toy vocabulary at
// a fixed 64 words.
constexpr int kColorBase = 8;
constexpr int kShapeBase = 16;
constexpr int kStyleBase = 19;

const std::vector<std::string>& vocab() {
  static const std::vector<std::string> v = {
      "<pad>",   "remove", "replace", "make",    "stylize", "with",
      "the",     "a",      "black",   "white",   "red",     "green",
      "blue",    "yellow", "magenta", "cyan",    "square",  "circle",
      "triangle","invert", "swap",    "warm",    "cool",    "on",
      "canvas",  "shape",  "left",    "right",   "top",     "bottom",
      "small",   "big",    "color",   "into",    "turn",    "object",
      "region",  "fill",   "erase",   "paint",   "style",   "apply",
      "new",     "old",    "image",   "edit",    "change",  "draw",
      "scene",   "area",   "inside",  "outside", "near",    "far",
      "light",   "dark",   "solid",   "round",   "sharp",   "flat",
      "wide",    "tall",   "thin",    "thick"};
  return v;
}

enum class ShapeKind { Square = 0, Circle = 1, Triangle = 2 };

struct Shape {
  ShapeKind kind;
  int color;  // palette index
  int cx, cy, half;
};

bool shape_covers(const Shape& s, int y, int x) {
  switch (s.kind) {
    case ShapeKind::Square:
      return std::abs(x - s.cx) <= s.half && std::abs(y - s.cy) <= s.half;
    case ShapeKind::Circle: {
      const int dx = x - s.cx, dy = y - s.cy;
      return dx * dx + dy * dy <= s.half * s.half;
    }
    case ShapeKind::Triangle: {
      // upward triangle: apex at cy - half, base at cy + half
      if (y < s.cy - s.half || y > s.cy + s.half) return false;
      const int rows_down = y - (s.cy - s.half);
      return std::abs(x - s.cx) * 2 <= rows_down;
    }
  }
  return false;
}

void raster_shape(Image& img, const Shape& s) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      if (shape_covers(s, y, x))
        for (int c = 0; c < 3; ++c)
          img.at(y, x, c) = kPalette[s.color][c];
}

Mask shape_mask(int h, int w, const Shape& s) {
  Mask m;
  m.h = h;
  m.w = w;
  m.v.assign((size_t)h * w, 0.0f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (shape_covers(s, y, x)) m.at(y, x) = 1.0f;
  return m;
}

bool shapes_overlap(const Shape& a, const Shape& b, int h, int w) {
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (shape_covers(a, y, x) && shape_covers(b, y, x)) return true;
  return false;
}

int color_word(int palette_idx) { return kColorBase + palette_idx; }
int shape_word(ShapeKind k) { return kShapeBase + (int)k; }
int style_word(int style_idx) { return kStyleBase + style_idx; }

std::array<float, 3> apply_style(int style, const std::array<float, 3>& c) {
  auto clamp01 = [](float x) { return std::min(1.0f, std::max(0.0f, x)); };
  switch (style) {
    case 0:  // invert
      return {1.0f - c[0], 1.0f - c[1], 1.0f - c[2]};
    case 1:  // channel swap
      return {c[2], c[0], c[1]};
    case 2:  // warm
      return {clamp01(0.70f * c[0] + 0.30f), clamp01(0.70f * c[1] + 0.15f),
              clamp01(0.60f * c[2])};
    default:  // cool
      return {clamp01(0.60f * c[0]), clamp01(0.70f * c[1] + 0.10f),
              clamp01(0.70f * c[2] + 0.30f)};
  }
}

Image style_image(int style, const Image& src) {
  Image out = src;
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x) {
      auto c = apply_style(
          style, {src.at(y, x, 0), src.at(y, x, 1), src.at(y, x, 2)});
      for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = c[ch];
    }
  return out;
}

// Reference for style transfer: the palette rendered through the transform,
// as a 2x4 swatch grid.
Image style_swatches(int style, int size) {
  Image out = blank_image(size, size, {0, 0, 0});
  const int bh = size / 2, bw = size / 4;
  for (int i = 0; i < 8; ++i) {
    const int by = (i / 4) * bh, bx = (i % 4) * bw;
    auto c = apply_style(style, kPalette[i]);
    for (int y = by; y < by + bh; ++y)
      for (int x = bx; x < bx + bw; ++x)
        for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = c[ch];
  }
  return out;
}

struct Scene {
  int bg;  // palette index
  std::vector<Shape> shapes;  // shapes[0] is the edit target
};

Scene draw_scene(std::mt19937_64& rng, int size) {
  Scene sc;
  sc.bg = (int)(rng() % 8);
  std::uniform_int_distribution<int> n_extra(0, 2);
  std::uniform_int_distribution<int> kind_d(0, 2);
  const int n = 1 + n_extra(rng);
  for (int i = 0; i < n && (int)sc.shapes.size() < 3; ++i) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      Shape s;
      s.kind = (ShapeKind)kind_d(rng);
      do {
        s.color = (int)(rng() % 8);
      } while (s.color == sc.bg);
      std::uniform_int_distribution<int> half_d(3, 6);
      s.half = half_d(rng);
      std::uniform_int_distribution<int> pos(s.half + 1, size - s.half - 2);
      s.cx = pos(rng);
      s.cy = pos(rng);
      bool ok = true;
      for (const auto& other : sc.shapes)
        if (shapes_overlap(s, other, size, size)) {
          ok = false;
          break;
        }
      if (ok) {
        sc.shapes.push_back(s);
        break;
      }
    }
  }
  return sc;
}

Image render_scene(const Scene& sc, int size) {
  Image img = blank_image(size, size, kPalette[sc.bg]);
  // draw back-to-front so the edit target (index 0) is on top
  for (int i = (int)sc.shapes.size() - 1; i >= 0; --i)
    raster_shape(img, sc.shapes[i]);
  return img;
}

Mask full_mask(int size) {
  Mask m;
  m.h = m.w = size;
  m.v.assign((size_t)size * size, 1.0f);
  return m;
}

}  // namespace

std::string task_name(Task t) {
  switch (t) {
    case Task::Removal: return "removal";
    case Task::Replacement: return "replacement";
    case Task::TextEdit: return "text_edit";
    case Task::Style: return "style_transfer";
  }
  return "removal";
}

Image blank_image(int h, int w, const std::array<float, 3>& color) {
  Image img;
  img.h = h;
  img.w = w;
  img.px.resize((size_t)h * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
  return img;
}

int vocab_size() { return (int)vocab().size(); }

const std::string& token_word(int id) {
  if (id < 0 || id >= vocab_size())
    throw TaskError("token_word: id out of range");
  return vocab()[(size_t)id];
}

int palette_size() { return 8; }

std::array<float, 3> palette_color(int i) {
  if (i < 0 || i >= 8) throw TaskError("palette_color: index out of range");
  return kPalette[(size_t)i];
}

Mask derive_box(const Mask& fine) {
  int x0 = fine.w, x1 = -1, y0 = fine.h, y1 = -1;
  for (int y = 0; y < fine.h; ++y)
    for (int x = 0; x < fine.w; ++x)
      if (fine.at(y, x) >= 0.5f) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw TaskError("derive_box: empty mask");
  Mask box;
  box.h = fine.h;
  box.w = fine.w;
  box.v.assign((size_t)fine.h * fine.w, 0.0f);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) box.at(y, x) = 1.0f;
  return box;
}

EditSample gen_sample(Task task, uint64_t seed, const TaskSpec& spec,
                      bool full_conditioning) {
  const int size = spec.image_size;
  auto rng = rng_for(seed, "sample", (uint64_t)task);
  EditSample s;
  s.task = task;
  s.sample_seed = seed;
  s.text_ids.assign((size_t)spec.n_text, 0);
  auto set_text = [&](std::initializer_list<int> ids) {
    int i = 0;
    for (int id : ids) {
      if (i >= spec.n_text) break;
      s.text_ids[(size_t)i++] = id;
    }
  };

  Scene sc = draw_scene(rng, size);
  Shape& prim = sc.shapes[0];
  s.base = render_scene(sc, size);

  switch (task) {
    case Task::Removal: {
      // target: the primary shape replaced by background fill
      Scene edited = sc;
      edited.shapes.erase(edited.shapes.begin());
      s.target = render_scene(edited, size);
      s.fine_mask = shape_mask(size, size, prim);
      s.has_reference = false;
      if (full_conditioning)
        set_text({1 /*remove*/, color_word(prim.color),
                  shape_word(prim.kind), 0});
      // mask-only presentation keeps the padding-only instruction
      break;
    }
    case Task::Replacement: {
      Shape repl = prim;
      repl.kind = (ShapeKind)(((int)prim.kind + 1 + (int)(rng() % 2)) % 3);
      do {
        repl.color = (int)(rng() % 8);
      } while (repl.color == sc.bg || repl.color == prim.color);
      Scene edited = sc;
      edited.shapes[0] = repl;
      s.target = render_scene(edited, size);
      Mask old_m = shape_mask(size, size, prim);
      Mask new_m = shape_mask(size, size, repl);
      s.fine_mask = old_m;
      for (size_t i = 0; i < s.fine_mask.v.size(); ++i)
        s.fine_mask.v[i] = std::max(old_m.v[i], new_m.v[i]);
      Shape ref_shape = repl;
      ref_shape.cx = size / 2;
      ref_shape.cy = size / 2;
      ref_shape.half = size / 4;
      s.reference = blank_image(size, size, kPalette[1]);
      raster_shape(s.reference, ref_shape);
      s.has_reference = true;
      set_text({2 /*replace*/, shape_word(prim.kind), shape_word(repl.kind),
                color_word(repl.color)});
      break;
    }
    case Task::TextEdit: {
      // recolor the primary shape per the instruction
      Shape recolored = prim;
      do {
        recolored.color = (int)(rng() % 8);
      } while (recolored.color == sc.bg || recolored.color == prim.color);
      Scene edited = sc;
      edited.shapes[0] = recolored;
      s.target = render_scene(edited, size);
      s.fine_mask = shape_mask(size, size, prim);
      s.has_reference = false;
      set_text({3 /*make*/, shape_word(prim.kind),
                color_word(recolored.color), 0});
      break;
    }
    case Task::Style: {
      const int style = (int)(rng() % 4);
      s.target = style_image(style, s.base);
      s.fine_mask = full_mask(size);
      s.reference = style_swatches(style, size);
      s.has_reference = true;
      set_text({4 /*stylize*/, style_word(style), 0, 0});
      break;
    }
  }

  s.coarse_box = derive_box(s.fine_mask);
  if (!full_conditioning && task == Task::TextEdit) s.coarse_box = full_mask(size);
  if (!s.has_reference) s.reference = blank_image(size, size, {0, 0, 0});
  return s;
}

std::array<double, kNumTasks> curriculum(int step, int total_steps,
                                         double frac) {
  if (curriculum_stage2(step, total_steps, frac))
    return {0.25, 0.25, 0.25, 0.25};
  return {0.5, 0.0, 0.5, 0.0};
}

bool curriculum_stage2(int step, int total_steps, double frac) {
  return step >= (int)std::floor(frac * (double)total_steps);
}

EditSample corpus_sample(uint64_t seed, int step, int index, int total_steps,
                         double frac, const TaskSpec& spec) {
  auto rng = rng_for(seed, "corpus", (uint64_t)step, (uint64_t)index);
  const auto dist = curriculum(step, total_steps, frac);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng), acc = 0.0;
  Task task = Task::Style;
  for (int t = 0; t < kNumTasks; ++t) {
    acc += dist[(size_t)t];
    if (r < acc) {
      task = (Task)t;
      break;
    }
  }
  const bool stage2 = curriculum_stage2(step, total_steps, frac);
  const uint64_t sseed = mix_key(seed, "corpus-sample", (uint64_t)step,
                                 (uint64_t)index);
  return gen_sample(task, sseed, spec, stage2);
}

EditSample eval_sample(uint64_t seed, int index, const TaskSpec& spec) {
  const Task task = (Task)(index % kNumTasks);
  const uint64_t sseed = mix_key(seed, "eval-sample", (uint64_t)index);
  return gen_sample(task, sseed, spec, true);
}

}  // namespace care
