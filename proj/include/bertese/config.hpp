// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: an INI-like file of [section] headers and key = value
// lines. Every key has a default; unknown keys and malformed values are
// errors that name the offending key.

#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bertese/checkpoint.hpp"
#include "bertese/model.hpp"
#include "bertese/optim.hpp"
#include "bertese/rewriter.hpp"
#include "bertese/world.hpp"

namespace bertese {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(key.empty() ? what : "config key '" + key + "': " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct StageConfig {
  double learning_rate = 1e-3;
  int epochs = 5;
  int batch_size = 64;
};

struct TrainingConfig {
  std::uint64_t seed = 1234;

  // Synthetic world (its seed is derived from `seed`).
  int relation_count = 8;
  int entities_per_relation = 100;
  int objects_per_relation = 10;
  double eval_fraction = 0.2;

  // Shared by predictor and rewriter; vocab_size comes from the world.
  int dim = 64;
  int layers = 2;
  int heads = 4;
  int ffn_dim = 128;
  int max_len = 16;

  StageConfig predictor{1e-3, 5, 64};
  StageConfig identity{1e-3, 5, 64};
  StageConfig bertese{3e-4, 5, 64};
  StageConfig ft{3e-4, 5, 64};

  double lambda1 = 0.3;
  double lambda2 = 0.5;
  SteMode ste_mode = SteMode::Hard;
  bool snap_input = false;

  AdamWOptions adamw;
  double clip_norm = 1.0;
  double paper_lr = 1e-5;  // reference value at full encoder scale; not used by the toy stages

  LossOptions loss_options() const { return {lambda1, lambda2, ste_mode, snap_input}; }

  ModelConfig model_config(int vocab_size) const {
    return {dim, layers, heads, ffn_dim, max_len, vocab_size};
  }
};

namespace detail {

struct ConfigKey {
  std::string name;
  std::function<std::string(const TrainingConfig&)> get;
  std::function<void(TrainingConfig&, const std::string&)> set;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
  V v{};
  const auto* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError(key, "invalid number '" + text + "'");
  return v;
}

template <typename V>
ConfigKey number_key(std::string name, V TrainingConfig::*field) {
  return {name,
          [field](const TrainingConfig& c) {
            if constexpr (std::is_floating_point_v<V>) {
              return format_double(c.*field);
            } else {
              return std::to_string(c.*field);
            }
          },
          [field, name](TrainingConfig& c, const std::string& v) { c.*field = parse_number<V>(name, v); }};
}

template <typename V>
ConfigKey stage_key(std::string name, StageConfig TrainingConfig::*stage, V StageConfig::*field) {
  return {name,
          [stage, field](const TrainingConfig& c) {
            if constexpr (std::is_floating_point_v<V>) {
              return format_double(c.*stage.*field);
            } else {
              return std::to_string(c.*stage.*field);
            }
          },
          [stage, field, name](TrainingConfig& c, const std::string& v) {
            c.*stage.*field = parse_number<V>(name, v);
          }};
}

template <typename V>
ConfigKey adam_key(std::string name, V AdamWOptions::*field) {
  return {name, [field](const TrainingConfig& c) { return format_double(c.adamw.*field); },
          [field, name](TrainingConfig& c, const std::string& v) { c.adamw.*field = parse_number<V>(name, v); }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(number_key("run.seed", &TrainingConfig::seed));
    k.push_back(number_key("world.relation_count", &TrainingConfig::relation_count));
    k.push_back(number_key("world.entities_per_relation", &TrainingConfig::entities_per_relation));
    k.push_back(number_key("world.objects_per_relation", &TrainingConfig::objects_per_relation));
    k.push_back(number_key("world.eval_fraction", &TrainingConfig::eval_fraction));
    k.push_back(number_key("model.dim", &TrainingConfig::dim));
    k.push_back(number_key("model.layers", &TrainingConfig::layers));
    k.push_back(number_key("model.heads", &TrainingConfig::heads));
    k.push_back(number_key("model.ffn_dim", &TrainingConfig::ffn_dim));
    k.push_back(number_key("model.max_len", &TrainingConfig::max_len));
    for (auto [section, stage] : {std::pair{"predictor", &TrainingConfig::predictor},
                                  std::pair{"identity", &TrainingConfig::identity},
                                  std::pair{"bertese", &TrainingConfig::bertese},
                                  std::pair{"ft", &TrainingConfig::ft}}) {
      const std::string s = section;
      k.push_back(stage_key(s + ".learning_rate", stage, &StageConfig::learning_rate));
      k.push_back(stage_key(s + ".epochs", stage, &StageConfig::epochs));
      k.push_back(stage_key(s + ".batch_size", stage, &StageConfig::batch_size));
    }
    k.push_back(number_key("loss.lambda1", &TrainingConfig::lambda1));
    k.push_back(number_key("loss.lambda2", &TrainingConfig::lambda2));
    k.push_back({"loss.ste_mode", [](const TrainingConfig& c) { return to_string(c.ste_mode); },
                 [](TrainingConfig& c, const std::string& v) {
                   try {
                     c.ste_mode = parse_ste_mode(v);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError("loss.ste_mode", e.what());
                   }
                 }});
    k.push_back({"loss.snap_input", [](const TrainingConfig& c) { return std::string(c.snap_input ? "true" : "false"); },
                 [](TrainingConfig& c, const std::string& v) {
                   if (v == "true") {
                     c.snap_input = true;
                   } else if (v == "false") {
                     c.snap_input = false;
                   } else {
                     throw ConfigError("loss.snap_input", "expected true or false, got '" + v + "'");
                   }
                 }});
    k.push_back(adam_key("optim.beta1", &AdamWOptions::beta1));
    k.push_back(adam_key("optim.beta2", &AdamWOptions::beta2));
    k.push_back(adam_key("optim.epsilon", &AdamWOptions::epsilon));
    k.push_back(adam_key("optim.weight_decay", &AdamWOptions::weight_decay));
    k.push_back(number_key("optim.clip_norm", &TrainingConfig::clip_norm));
    k.push_back(number_key("optim.paper_lr", &TrainingConfig::paper_lr));
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Checks value ranges; throws ConfigError naming the first bad key.
inline void validate_config(const TrainingConfig& c) {
  for (auto [name, stage] : {std::pair{"predictor", &c.predictor}, std::pair{"identity", &c.identity},
                             std::pair{"bertese", &c.bertese}, std::pair{"ft", &c.ft}}) {
    const std::string s = name;
    if (!(stage->learning_rate > 0)) throw ConfigError(s + ".learning_rate", "must be > 0");
    if (stage->batch_size < 1) throw ConfigError(s + ".batch_size", "must be >= 1");
    if (stage->epochs < 0) throw ConfigError(s + ".epochs", "must be >= 0");
  }
  if (c.lambda1 < 0) throw ConfigError("loss.lambda1", "must be >= 0");
  if (c.lambda2 < 0) throw ConfigError("loss.lambda2", "must be >= 0");
  if (c.dim <= 0 || c.heads <= 0 || c.dim % c.heads != 0) {
    throw ConfigError("model.heads", "model.dim must be a positive multiple of model.heads");
  }
  if (c.layers <= 0) throw ConfigError("model.layers", "must be positive");
  if (c.ffn_dim <= 0) throw ConfigError("model.ffn_dim", "must be positive");
  if (c.max_len <= 0) throw ConfigError("model.max_len", "must be positive");
  if (c.relation_count <= 0) throw ConfigError("world.relation_count", "must be positive");
  if (c.entities_per_relation <= 1) throw ConfigError("world.entities_per_relation", "must be > 1");
  if (c.objects_per_relation <= 0) throw ConfigError("world.objects_per_relation", "must be positive");
  if (!(c.eval_fraction > 0 && c.eval_fraction < 1)) throw ConfigError("world.eval_fraction", "must lie in (0, 1)");
  if (!(c.clip_norm > 0)) throw ConfigError("optim.clip_norm", "must be > 0");
}

/// Sets one dotted key (e.g. "bertese.epochs") from text.
inline void apply_override(TrainingConfig& c, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return k.name == key; });
  if (it == keys.end()) throw ConfigError(key, "unknown key");
  it->set(c, value);
}

/// Applies "key=value".
inline void apply_override(TrainingConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(assignment, "override must look like key=value");
  apply_override(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline TrainingConfig parse_config(std::istream& in) {
  TrainingConfig c;
  std::string section;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("", "line " + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("", "line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    apply_override(c, section.empty() ? key : section + "." + key, detail::trim(line.substr(eq + 1)));
  }
  validate_config(c);
  return c;
}

inline TrainingConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file " + path);
  return parse_config(in);
}

/// Every key with its effective value, one "key=value" per line, sorted.
inline std::string canonical_config(const TrainingConfig& c) {
  std::vector<std::string> lines;
  for (const auto& k : detail::config_keys()) lines.push_back(k.name + "=" + k.get(c));
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

/// The full configuration as an INI file that parse_config reads back.
inline std::string config_file_text(const TrainingConfig& c) {
  std::map<std::string, std::vector<std::string>> sections;
  for (const auto& k : detail::config_keys()) {
    const auto dot = k.name.find('.');
    sections[k.name.substr(0, dot)].push_back(k.name.substr(dot + 1) + " = " + k.get(c));
  }
  std::string out;
  for (const auto& [name, lines] : sections) {
    out += "[" + name + "]\n";
    for (const auto& l : lines) out += l + "\n";
    out += "\n";
  }
  return out;
}

inline std::string config_digest(const TrainingConfig& c) { return sha256_hex(canonical_config(c)); }

/// Stage-specific seed derived from the run seed and a stage name.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a over the stage name
  for (char ch : stage) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ULL;
  }
  std::uint64_t z = seed ^ h;  // splitmix64 finalizer
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline SyntheticWorldSpec world_spec(const TrainingConfig& c) {
  SyntheticWorldSpec s;
  s.relation_count = c.relation_count;
  s.entities_per_relation = c.entities_per_relation;
  s.objects_per_relation = c.objects_per_relation;
  s.eval_fraction = c.eval_fraction;
  s.seed = derive_seed(c.seed, "world");
  return s;
}

}  // namespace bertese
