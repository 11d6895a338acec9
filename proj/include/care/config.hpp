#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace care {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class RepaintMode { Centered, Literal };
enum class Variant { Full, NoExperts, NoMixture, NoRepaint };

// Plain-text run configuration: `key=value` lines, '#' comments, unknown
// keys rejected. Every field has a documented default; resolved_text()
// echoes the full key set deterministically.
struct RunConfig {
  uint64_t seed = 1;
  int steps = 2000;
  int batch = 2;
  int image_size = 32;
  int patch = 4;
  int n_text = 4;
  int d = 32;
  int blocks = 4;
  int routed_interval = 2;
  int k_active = 3;
  double lambda_shared = 0.1;
  double lambda_load = 0.01;
  double lambda_mask = 0.1;
  double lambda_mix = 0.05;
  double lambda_smooth = 0.1;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double ema_decay = 0.999;
  double beta_router = 0.9;
  double tau_start = 2.0;
  double tau_end = 0.5;
  double anneal_frac = 0.5;
  double curriculum_frac = 0.4;
  int t_diff = 50;
  int sample_steps = 10;
  int eval_samples = 64;
  int corpus_n = 64;
  int inspect_tokens = 10000;
  int log_every = 1;
  int lora_rank = 4;
  double lora_scale = 1.0;
  bool freeze_backbone = false;
  RepaintMode repaint_mode = RepaintMode::Centered;
  Variant variant = Variant::Full;
  std::string checkpoint;  // optional: load parameters from this directory

  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string resolved_text() const;
  uint64_t config_hash() const;

  int grid() const { return image_size / patch; }
  int n_visual() const { return grid() * grid(); }
  // text + base + reference + mask segments (target appended at train time)
  int n_condition_tokens() const { return n_text + 3 * n_visual(); }
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& s);
std::string repaint_mode_name(RepaintMode m);

}  // namespace care
