#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

// Synthetic editing corpus: 32x32 palette canvases with up to three shapes,
// four edit task types, template-token instructions, and deterministic
// (seed, step)-keyed generation.

namespace care {

struct TaskError : std::runtime_error {
  explicit TaskError(const std::string& what) : std::runtime_error(what) {}
};

enum class Task { Removal = 0, Replacement = 1, TextEdit = 2, Style = 3 };
constexpr int kNumTasks = 4;

std::string task_name(Task t);

struct Image {
  int h = 0, w = 0;
  std::vector<float> px;  // row-major HWC, 3 channels, values in [0,1]
  float& at(int y, int x, int c) { return px[(size_t)(y * w + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return px[(size_t)(y * w + x) * 3 + c];
  }
};

Image blank_image(int h, int w, const std::array<float, 3>& color);

struct Mask {
  int h = 0, w = 0;
  std::vector<float> v;  // row-major, values in [0,1]
  float& at(int y, int x) { return v[(size_t)y * w + x]; }
  float at(int y, int x) const { return v[(size_t)y * w + x]; }
};

struct EditSample {
  Task task = Task::Removal;
  std::vector<int> text_ids;  // fixed length n_text, 0 = <pad>
  Image base, reference, target;
  bool has_reference = false;
  Mask fine_mask;   // exact edited pixels (supervision only)
  Mask coarse_box;  // axis-aligned box, the user-style mask input
  uint64_t sample_seed = 0;
};

// Token vocabulary (fixed, 64 entries; id 0 is <pad>).
int vocab_size();
const std::string& token_word(int id);

// Palette of 8 canvas colors.
int palette_size();
std::array<float, 3> palette_color(int i);

// Axis-aligned bounding box of mask values >= 0.5. Empty masks are an error.
Mask derive_box(const Mask& fine);

struct TaskSpec {
  int image_size = 32;
  int n_text = 4;
};

// Deterministic in (task, seed). With full_conditioning=false the sample is
// presented single-condition: text edits get an uninformative full-canvas
// box, removals get a padding-only instruction.
EditSample gen_sample(Task task, uint64_t seed, const TaskSpec& spec,
                      bool full_conditioning = true);

// Task distribution at a training step: a single-condition warm-up stage
// (mask-only removals, text-only edits), then uniform multi-task mixing
// from floor(frac * total) onward. Sums to 1.
std::array<double, kNumTasks> curriculum(int step, int total_steps,
                                         double frac);
bool curriculum_stage2(int step, int total_steps, double frac);

// Infinite deterministic training stream keyed by (seed, step, index).
EditSample corpus_sample(uint64_t seed, int step, int index, int total_steps,
                         double frac, const TaskSpec& spec);

// Held-out evaluation stream (disjoint key space), tasks round-robin.
EditSample eval_sample(uint64_t seed, int index, const TaskSpec& spec);

}  // namespace care
