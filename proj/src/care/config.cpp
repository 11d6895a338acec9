#include "care/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "care/io.hpp"
#include "care/rng.hpp"

namespace care {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int64_t parse_int(const std::string& key, const std::string& v) {
  size_t pos = 0;
  int64_t r;
  try {
    r = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "': not an integer: '" + v +
                      "'");
  }
  if (pos != v.size())
    throw ConfigError("config: key '" + key + "': not an integer: '" + v +
                      "'");
  return r;
}

double parse_double(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double r;
  try {
    r = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "': not a number: '" + v + "'");
  }
  if (pos != v.size())
    throw ConfigError("config: key '" + key + "': not a number: '" + v + "'");
  return r;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "': not a bool: '" + v + "'");
}

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoExperts: return "no_experts";
    case Variant::NoMixture: return "no_mixture";
    case Variant::NoRepaint: return "no_repaint";
  }
  return "full";
}

Variant variant_from_name(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "no_experts") return Variant::NoExperts;
  if (s == "no_mixture") return Variant::NoMixture;
  if (s == "no_repaint") return Variant::NoRepaint;
  throw ConfigError("config: unknown variant '" + s + "'");
}

std::string repaint_mode_name(RepaintMode m) {
  return m == RepaintMode::Centered ? "centered" : "literal";
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "seed") seed = (uint64_t)parse_int(key, value);
  else if (key == "steps") steps = (int)parse_int(key, value);
  else if (key == "batch") batch = (int)parse_int(key, value);
  else if (key == "image_size") image_size = (int)parse_int(key, value);
  else if (key == "patch") patch = (int)parse_int(key, value);
  else if (key == "n_text") n_text = (int)parse_int(key, value);
  else if (key == "d") d = (int)parse_int(key, value);
  else if (key == "blocks") blocks = (int)parse_int(key, value);
  else if (key == "routed_interval") routed_interval = (int)parse_int(key, value);
  else if (key == "k_active") k_active = (int)parse_int(key, value);
  else if (key == "lambda_shared") lambda_shared = parse_double(key, value);
  else if (key == "lambda_load") lambda_load = parse_double(key, value);
  else if (key == "lambda_mask") lambda_mask = parse_double(key, value);
  else if (key == "lambda_mix") lambda_mix = parse_double(key, value);
  else if (key == "lambda_smooth") lambda_smooth = parse_double(key, value);
  else if (key == "lr") lr = parse_double(key, value);
  else if (key == "weight_decay") weight_decay = parse_double(key, value);
  else if (key == "ema_decay") ema_decay = parse_double(key, value);
  else if (key == "beta_router") beta_router = parse_double(key, value);
  else if (key == "tau_start") tau_start = parse_double(key, value);
  else if (key == "tau_end") tau_end = parse_double(key, value);
  else if (key == "anneal_frac") anneal_frac = parse_double(key, value);
  else if (key == "curriculum_frac") curriculum_frac = parse_double(key, value);
  else if (key == "t_diff") t_diff = (int)parse_int(key, value);
  else if (key == "sample_steps") sample_steps = (int)parse_int(key, value);
  else if (key == "eval_samples") eval_samples = (int)parse_int(key, value);
  else if (key == "corpus_n") corpus_n = (int)parse_int(key, value);
  else if (key == "inspect_tokens") inspect_tokens = (int)parse_int(key, value);
  else if (key == "log_every") log_every = (int)parse_int(key, value);
  else if (key == "lora_rank") lora_rank = (int)parse_int(key, value);
  else if (key == "lora_scale") lora_scale = parse_double(key, value);
  else if (key == "freeze_backbone") freeze_backbone = parse_bool(key, value);
  else if (key == "repaint_mode") {
    if (value == "centered") repaint_mode = RepaintMode::Centered;
    else if (value == "literal") repaint_mode = RepaintMode::Literal;
    else throw ConfigError("config: unknown repaint_mode '" + value + "'");
  } else if (key == "variant") variant = variant_from_name(value);
  else if (key == "checkpoint") checkpoint = value;
  else throw ConfigError("config: unknown key '" + key + "'");
}

void RunConfig::validate() const {
  if (steps < 1) throw ConfigError("config: steps must be >= 1");
  if (batch < 1) throw ConfigError("config: batch must be >= 1");
  if (image_size < 4 || patch < 1 || image_size % patch != 0)
    throw ConfigError("config: image_size must be a multiple of patch");
  if (n_text < 1) throw ConfigError("config: n_text must be >= 1");
  if (d < 2 || d % 2 != 0)
    throw ConfigError("config: d must be even and >= 2");
  if (blocks < 1) throw ConfigError("config: blocks must be >= 1");
  if (routed_interval < 1)
    throw ConfigError("config: routed_interval must be >= 1");
  if (k_active < 1 || k_active > 4)
    throw ConfigError("config: k_active must be in [1,4]");
  if (lambda_shared < 0 || lambda_shared > 1)
    throw ConfigError("config: lambda_shared must be in [0,1]");
  if (t_diff < 1) throw ConfigError("config: t_diff must be >= 1");
  if (sample_steps < 1 || sample_steps > t_diff)
    throw ConfigError("config: sample_steps must be in [1,t_diff]");
  if (tau_start <= 0 || tau_end <= 0)
    throw ConfigError("config: temperatures must be positive");
  if (anneal_frac < 0 || anneal_frac > 1)
    throw ConfigError("config: anneal_frac must be in [0,1]");
  if (curriculum_frac < 0 || curriculum_frac > 1)
    throw ConfigError("config: curriculum_frac must be in [0,1]");
  if (lora_rank < 0) throw ConfigError("config: lora_rank must be >= 0");
  if (ema_decay < 0 || ema_decay >= 1)
    throw ConfigError("config: ema_decay must be in [0,1)");
  if (beta_router < 0 || beta_router >= 1)
    throw ConfigError("config: beta_router must be in [0,1)");
}

std::string RunConfig::resolved_text() const {
  std::ostringstream o;
  o << "anneal_frac=" << fmt_double(anneal_frac) << "\n";
  o << "batch=" << batch << "\n";
  o << "beta_router=" << fmt_double(beta_router) << "\n";
  o << "blocks=" << blocks << "\n";
  o << "checkpoint=" << checkpoint << "\n";
  o << "corpus_n=" << corpus_n << "\n";
  o << "curriculum_frac=" << fmt_double(curriculum_frac) << "\n";
  o << "d=" << d << "\n";
  o << "ema_decay=" << fmt_double(ema_decay) << "\n";
  o << "eval_samples=" << eval_samples << "\n";
  o << "freeze_backbone=" << (freeze_backbone ? "true" : "false") << "\n";
  o << "image_size=" << image_size << "\n";
  o << "inspect_tokens=" << inspect_tokens << "\n";
  o << "k_active=" << k_active << "\n";
  o << "lambda_load=" << fmt_double(lambda_load) << "\n";
  o << "lambda_mask=" << fmt_double(lambda_mask) << "\n";
  o << "lambda_mix=" << fmt_double(lambda_mix) << "\n";
  o << "lambda_shared=" << fmt_double(lambda_shared) << "\n";
  o << "lambda_smooth=" << fmt_double(lambda_smooth) << "\n";
  o << "log_every=" << log_every << "\n";
  o << "lora_rank=" << lora_rank << "\n";
  o << "lora_scale=" << fmt_double(lora_scale) << "\n";
  o << "lr=" << fmt_double(lr) << "\n";
  o << "n_text=" << n_text << "\n";
  o << "patch=" << patch << "\n";
  o << "repaint_mode=" << repaint_mode_name(repaint_mode) << "\n";
  o << "routed_interval=" << routed_interval << "\n";
  o << "sample_steps=" << sample_steps << "\n";
  o << "seed=" << seed << "\n";
  o << "steps=" << steps << "\n";
  o << "t_diff=" << t_diff << "\n";
  o << "tau_end=" << fmt_double(tau_end) << "\n";
  o << "tau_start=" << fmt_double(tau_start) << "\n";
  o << "variant=" << variant_name(variant) << "\n";
  o << "weight_decay=" << fmt_double(weight_decay) << "\n";
  return o.str();
}

uint64_t RunConfig::config_hash() const { return fnv1a64(resolved_text()); }

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config: line " + std::to_string(lineno) +
                        ": empty key");
    cfg.set(key, value);
  }
  cfg.validate();
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace care
