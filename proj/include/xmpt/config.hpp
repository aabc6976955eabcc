#pragma once

// Run configuration: `section.key=value` lines, '#' comments, unknown keys
// rejected. Overrides use the same syntax. The resolved form lists every key
// in a fixed order and is what gets hashed into checkpoints.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>
#include <vector>

#include "xmpt/augment.hpp"
#include "xmpt/checkpoint.hpp"
#include "xmpt/contrastive.hpp"

namespace xmpt {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Stage1Config {
  std::size_t steps = 500;
  std::size_t batch_size = 2;
  std::size_t images = 8;  // first n manifest images; 0 = all
  std::size_t pairs = 512;  // positive pairs per image per step
  double lr = 1e-3;
  std::size_t log_interval = 10;
  std::size_t eval_pairs = 512;
  std::string checkpoint = "stage1.ckpt";
  std::string log = "stage1.log";
};

struct Stage2Config {
  std::size_t steps = 800;
  std::size_t batch_size = 1;
  std::size_t scenes = 16;  // first n manifest scenes; 0 = all
  std::size_t anchors = 512;  // matched points per scene per step
  double lr = 1e-3;
  std::size_t log_interval = 10;
  std::string checkpoint = "stage2.ckpt";
  std::string log = "stage2.log";
};

struct ProbeConfig {
  std::size_t steps = 300;
  std::size_t batch_points = 4096;
  double lr = 1e-2;
  std::size_t train_scenes = 16;
  std::size_t eval_scenes = 8;
  std::string backbone = "none";  // stage-2 checkpoint path, or "none" for a random backbone
  std::string result = "probe.txt";
};

struct RunConfig {
  std::string manifest = "data/manifest.txt";
  std::string eval_manifest;
  std::uint64_t seed = 0;
  Stage1Config stage1;
  Stage2Config stage2;
  ProbeConfig probe;
  Augment2DConfig augment2d;
  Augment3DConfig augment3d;
  double tau = kDefaultTemperature;
  std::size_t k = kDefaultNegatives;
  NegativeMode negatives = NegativeMode::kKeySide;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw ConfigError("config: '" + std::string(key) + "' expects a number, got '" + std::string(text) + "'");
  return v;
}

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
ConfigKey number_key(std::string name, T RunConfig::*outer) {
  return {name, [name, outer](RunConfig& c, std::string_view v) { c.*outer = parse_number<T>(name, v); },
          [outer](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(c.*outer);
            else
              return std::to_string(c.*outer);
          }};
}

template <class S, class T>
ConfigKey number_key(std::string name, S RunConfig::*section, T S::*field) {
  return {name, [name, section, field](RunConfig& c, std::string_view v) { c.*section.*field = parse_number<T>(name, v); },
          [section, field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(c.*section.*field);
            else
              return std::to_string(c.*section.*field);
          }};
}

template <class S>
ConfigKey string_key(std::string name, S RunConfig::*section, std::string S::*field) {
  return {name, [section, field](RunConfig& c, std::string_view v) { c.*section.*field = std::string(v); },
          [section, field](const RunConfig& c) { return c.*section.*field; }};
}

inline ConfigKey jitter_key(std::string name, double JitterConfig::*field, bool three_d) {
  auto jit = [three_d](RunConfig& c) -> JitterConfig& { return three_d ? c.augment3d.jitter : c.augment2d.jitter; };
  auto cjit = [three_d](const RunConfig& c) -> const JitterConfig& {
    return three_d ? c.augment3d.jitter : c.augment2d.jitter;
  };
  return {name, [=](RunConfig& c, std::string_view v) { jit(c).*field = parse_number<double>(name, v); },
          [=](const RunConfig& c) { return format_double(cjit(c).*field); }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back({"data.manifest", [](RunConfig& c, std::string_view v) { c.manifest = v; },
                 [](const RunConfig& c) { return c.manifest; }});
    k.push_back({"data.eval_manifest", [](RunConfig& c, std::string_view v) { c.eval_manifest = v; },
                 [](const RunConfig& c) { return c.eval_manifest; }});
    k.push_back(number_key("seed", &RunConfig::seed));

    k.push_back(number_key("stage1.steps", &RunConfig::stage1, &Stage1Config::steps));
    k.push_back(number_key("stage1.batch_size", &RunConfig::stage1, &Stage1Config::batch_size));
    k.push_back(number_key("stage1.images", &RunConfig::stage1, &Stage1Config::images));
    k.push_back(number_key("stage1.pairs", &RunConfig::stage1, &Stage1Config::pairs));
    k.push_back(number_key("stage1.lr", &RunConfig::stage1, &Stage1Config::lr));
    k.push_back(number_key("stage1.log_interval", &RunConfig::stage1, &Stage1Config::log_interval));
    k.push_back(number_key("stage1.eval_pairs", &RunConfig::stage1, &Stage1Config::eval_pairs));
    k.push_back(string_key("stage1.checkpoint", &RunConfig::stage1, &Stage1Config::checkpoint));
    k.push_back(string_key("stage1.log", &RunConfig::stage1, &Stage1Config::log));

    k.push_back(number_key("stage2.steps", &RunConfig::stage2, &Stage2Config::steps));
    k.push_back(number_key("stage2.batch_size", &RunConfig::stage2, &Stage2Config::batch_size));
    k.push_back(number_key("stage2.scenes", &RunConfig::stage2, &Stage2Config::scenes));
    k.push_back(number_key("stage2.anchors", &RunConfig::stage2, &Stage2Config::anchors));
    k.push_back(number_key("stage2.lr", &RunConfig::stage2, &Stage2Config::lr));
    k.push_back(number_key("stage2.log_interval", &RunConfig::stage2, &Stage2Config::log_interval));
    k.push_back(string_key("stage2.checkpoint", &RunConfig::stage2, &Stage2Config::checkpoint));
    k.push_back(string_key("stage2.log", &RunConfig::stage2, &Stage2Config::log));

    k.push_back(number_key("probe.steps", &RunConfig::probe, &ProbeConfig::steps));
    k.push_back(number_key("probe.batch_points", &RunConfig::probe, &ProbeConfig::batch_points));
    k.push_back(number_key("probe.lr", &RunConfig::probe, &ProbeConfig::lr));
    k.push_back(number_key("probe.train_scenes", &RunConfig::probe, &ProbeConfig::train_scenes));
    k.push_back(number_key("probe.eval_scenes", &RunConfig::probe, &ProbeConfig::eval_scenes));
    k.push_back(string_key("probe.backbone", &RunConfig::probe, &ProbeConfig::backbone));
    k.push_back(string_key("probe.result", &RunConfig::probe, &ProbeConfig::result));

    k.push_back(number_key("augment2d.area_min", &RunConfig::augment2d, &Augment2DConfig::area_min));
    k.push_back(number_key("augment2d.area_max", &RunConfig::augment2d, &Augment2DConfig::area_max));
    k.push_back(number_key("augment2d.aspect_min", &RunConfig::augment2d, &Augment2DConfig::aspect_min));
    k.push_back(number_key("augment2d.aspect_max", &RunConfig::augment2d, &Augment2DConfig::aspect_max));
    k.push_back(number_key("augment2d.flip_probability", &RunConfig::augment2d, &Augment2DConfig::flip_probability));
    k.push_back(jitter_key("augment2d.jitter_probability", &JitterConfig::probability, false));
    k.push_back(jitter_key("augment2d.jitter_min", &JitterConfig::factor_min, false));
    k.push_back(jitter_key("augment2d.jitter_max", &JitterConfig::factor_max, false));
    k.push_back(jitter_key("augment2d.grayscale_probability", &JitterConfig::grayscale_probability, false));

    k.push_back({"augment3d.rotation",
                 [](RunConfig& c, std::string_view v) {
                   if (v == "none")
                     c.augment3d.rotation = RotationMode::kNone;
                   else if (v == "gravity")
                     c.augment3d.rotation = RotationMode::kGravity;
                   else if (v == "full")
                     c.augment3d.rotation = RotationMode::kFull;
                   else
                     throw ConfigError("config: 'augment3d.rotation' must be none, gravity or full, got '" +
                                       std::string(v) + "'");
                 },
                 [](const RunConfig& c) -> std::string {
                   switch (c.augment3d.rotation) {
                     case RotationMode::kNone:
                       return "none";
                     case RotationMode::kGravity:
                       return "gravity";
                     case RotationMode::kFull:
                       return "full";
                   }
                   return "gravity";
                 }});
    k.push_back(number_key("augment3d.keep_min", &RunConfig::augment3d, &Augment3DConfig::keep_min));
    k.push_back(number_key("augment3d.keep_max", &RunConfig::augment3d, &Augment3DConfig::keep_max));
    k.push_back(jitter_key("augment3d.jitter_probability", &JitterConfig::probability, true));
    k.push_back(jitter_key("augment3d.jitter_min", &JitterConfig::factor_min, true));
    k.push_back(jitter_key("augment3d.jitter_max", &JitterConfig::factor_max, true));

    k.push_back(number_key("loss.tau", &RunConfig::tau));
    k.push_back(number_key("loss.k", &RunConfig::k));
    k.push_back({"loss.negatives",
                 [](RunConfig& c, std::string_view v) {
                   if (v == "key")
                     c.negatives = NegativeMode::kKeySide;
                   else if (v == "anchor")
                     c.negatives = NegativeMode::kAnchorSide;
                   else
                     throw ConfigError("config: 'loss.negatives' must be key or anchor, got '" + std::string(v) +
                                       "'");
                 },
                 [](const RunConfig& c) -> std::string {
                   return c.negatives == NegativeMode::kKeySide ? "key" : "anchor";
                 }});
    return k;
  }();
  return keys;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Applies one `key=value` assignment.
inline void apply_setting(RunConfig& cfg, std::string_view assignment, const std::string& where = "--set") {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw ConfigError(where + ": expected key=value, got '" + std::string(assignment) + "'");
  const auto key = detail::trim(assignment.substr(0, eq));
  const auto value = detail::trim(assignment.substr(eq + 1));
  for (const auto& k : detail::config_keys())
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  throw ConfigError(where + ": unknown key '" + std::string(key) + "'");
}

inline void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& source = "config") {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto s = detail::trim(line);
    if (s.empty() || s.front() == '#') continue;
    apply_setting(cfg, s, source + ":" + std::to_string(lineno));
  }
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  RunConfig cfg;
  if (const char* env = std::getenv("XMPT_SEED")) apply_setting(cfg, std::string("seed=") + env, "XMPT_SEED");
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str(), path);
  for (const auto& o : overrides) apply_setting(cfg, o);
  return cfg;
}

/// Every key with its value, one `key=value` per line, in a fixed order.
inline std::string resolved_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + "=" + k.get(cfg) + "\n";
  return out;
}

inline std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a(resolved_config(cfg)); }

inline void validate(const RunConfig& cfg) {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("config: '") + name + "' must be at least 1");
  };
  positive(cfg.stage1.steps, "stage1.steps");
  positive(cfg.stage1.batch_size, "stage1.batch_size");
  positive(cfg.stage1.log_interval, "stage1.log_interval");
  positive(cfg.stage2.steps, "stage2.steps");
  positive(cfg.stage2.batch_size, "stage2.batch_size");
  positive(cfg.stage2.log_interval, "stage2.log_interval");
  positive(cfg.probe.steps, "probe.steps");
  positive(cfg.probe.batch_points, "probe.batch_points");
  if (!(cfg.stage1.lr > 0.0) || !(cfg.stage2.lr > 0.0) || !(cfg.probe.lr > 0.0))
    throw ConfigError("config: learning rates must be positive");
  if (!(cfg.tau > 0.0)) throw ConfigError("config: 'loss.tau' must be positive");
  const auto& a = cfg.augment2d;
  if (!(a.area_min > 0.0 && a.area_min <= a.area_max && a.area_max <= 1.0))
    throw ConfigError("config: augment2d area range must satisfy 0 < area_min <= area_max <= 1");
  if (!(cfg.augment3d.keep_min > 0.0 && cfg.augment3d.keep_min <= cfg.augment3d.keep_max &&
        cfg.augment3d.keep_max <= 1.0))
    throw ConfigError("config: augment3d keep range must satisfy 0 < keep_min <= keep_max <= 1");
}

}  // namespace xmpt
