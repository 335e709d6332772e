// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "dig/model.hpp"

namespace dig {

// ============================================================================
// Flat TOML-subset reader for preset/run config files: [section] headers,
// key = value lines with strings, bools, numbers, and homogeneous arrays.
// ============================================================================

using ConfigValue =
    std::variant<std::int64_t, double, bool, std::string, std::vector<std::int64_t>, std::vector<double>>;
using ConfigMap = std::map<std::string, ConfigValue>;

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline ConfigValue parse_scalar(const std::string& raw, const std::string& where) {
  std::string v = trim(raw);
  if (v.empty()) throw ConfigError("empty value at " + where);
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') throw ConfigError("unterminated string at " + where);
    return v.substr(1, v.size() - 2);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  bool is_float = v.find_first_of(".eE") != std::string::npos;
  try {
    std::size_t used = 0;
    if (is_float) {
      double d = std::stod(v, &used);
      if (used != v.size()) throw ConfigError("bad number at " + where);
      return d;
    }
    std::int64_t i = std::stoll(v, &used, 10);
    if (used != v.size()) throw ConfigError("bad integer at " + where);
    return i;
  } catch (const std::logic_error&) {
    throw ConfigError("cannot parse value '" + v + "' at " + where);
  }
}

}  // namespace detail

inline ConfigMap parse_config_text(std::istream& is, const std::string& origin) {
  ConfigMap out;
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string where = origin + ":" + std::to_string(lineno);
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("bad section header at " + where);
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value at " + where);
    std::string key = detail::trim(line.substr(0, eq));
    std::string val = detail::trim(line.substr(eq + 1));
    if (!section.empty()) key = section + "." + key;
    if (!val.empty() && val.front() == '[') {
      if (val.back() != ']') throw ConfigError("unterminated array at " + where);
      std::string body = val.substr(1, val.size() - 2);
      std::vector<std::int64_t> ints;
      std::vector<double> doubles;
      bool any_float = false;
      std::stringstream ss(body);
      std::string item;
      while (std::getline(ss, item, ',')) {
        item = detail::trim(item);
        if (item.empty()) continue;
        ConfigValue v = detail::parse_scalar(item, where);
        if (std::holds_alternative<double>(v)) {
          any_float = true;
          doubles.push_back(std::get<double>(v));
        } else if (std::holds_alternative<std::int64_t>(v)) {
          ints.push_back(std::get<std::int64_t>(v));
          doubles.push_back(static_cast<double>(std::get<std::int64_t>(v)));
        } else {
          throw ConfigError("arrays hold numbers only, at " + where);
        }
      }
      if (any_float)
        out[key] = doubles;
      else
        out[key] = ints;
      continue;
    }
    out[key] = detail::parse_scalar(val, where);
  }
  return out;
}

inline ConfigMap parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path);
  return parse_config_text(is, path);
}

// typed getters -------------------------------------------------------------

inline std::int64_t cfg_int(const ConfigMap& m, const std::string& key, std::int64_t fallback) {
  auto it = m.find(key);
  if (it == m.end()) return fallback;
  if (auto* i = std::get_if<std::int64_t>(&it->second)) return *i;
  throw ConfigError("expected integer for " + key);
}

inline double cfg_double(const ConfigMap& m, const std::string& key, double fallback) {
  auto it = m.find(key);
  if (it == m.end()) return fallback;
  if (auto* d = std::get_if<double>(&it->second)) return *d;
  if (auto* i = std::get_if<std::int64_t>(&it->second)) return static_cast<double>(*i);
  throw ConfigError("expected number for " + key);
}

inline bool cfg_bool(const ConfigMap& m, const std::string& key, bool fallback) {
  auto it = m.find(key);
  if (it == m.end()) return fallback;
  if (auto* b = std::get_if<bool>(&it->second)) return *b;
  throw ConfigError("expected bool for " + key);
}

inline std::string cfg_str(const ConfigMap& m, const std::string& key, const std::string& fallback) {
  auto it = m.find(key);
  if (it == m.end()) return fallback;
  if (auto* s = std::get_if<std::string>(&it->second)) return *s;
  throw ConfigError("expected string for " + key);
}

inline std::vector<std::int64_t> cfg_int_list(const ConfigMap& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) return {};
  if (auto* v = std::get_if<std::vector<std::int64_t>>(&it->second)) return *v;
  throw ConfigError("expected integer array for " + key);
}

// ============================================================================
// ModelConfig from a config map / JSON (checkpoints)
// ============================================================================

inline SremPosition srem_position_from_string(const std::string& s) {
  if (s == "after_ffn") return SremPosition::after_ffn;
  if (s == "before_attn") return SremPosition::before_attn;
  if (s == "between_attn_ffn") return SremPosition::between_attn_ffn;
  throw ConfigError("unknown srem_position: " + s);
}

inline std::string to_string(SremPosition p) {
  switch (p) {
    case SremPosition::after_ffn: return "after_ffn";
    case SremPosition::before_attn: return "before_attn";
    case SremPosition::between_attn_ffn: return "between_attn_ffn";
  }
  return "after_ffn";
}

inline ModelConfig model_config_from_map(const ConfigMap& m) {
  ModelConfig c;
  c.name = cfg_str(m, "model.name", "custom");
  std::string variant = cfg_str(m, "model.variant", "plain");
  if (variant == "plain") c.variant = ModelConfig::Variant::plain;
  else if (variant == "ushape") c.variant = ModelConfig::Variant::ushape;
  else throw ConfigError("unknown variant: " + variant);
  c.layers = cfg_int(m, "model.layers", c.layers);
  c.hidden = cfg_int(m, "model.hidden", c.hidden);
  c.patch = cfg_int(m, "model.patch", c.patch);
  c.image = cfg_int(m, "model.image", c.image);
  c.channels = cfg_int(m, "model.channels", c.channels);
  c.num_classes = cfg_int(m, "model.num_classes", c.num_classes);
  c.heads = cfg_int(m, "model.heads", c.heads);
  c.expand_k = cfg_double(m, "model.expand_k", c.expand_k);
  c.expand_v = cfg_double(m, "model.expand_v", c.expand_v);
  c.tau = cfg_double(m, "model.tau", c.tau);
  c.ffn_mult = cfg_int(m, "model.ffn_mult", c.ffn_mult);
  c.srem_pos = srem_position_from_string(cfg_str(m, "model.srem_position", "after_ffn"));
  c.bidirectional_mixer = cfg_bool(m, "model.bidirectional_mixer", false);
  std::string mode = cfg_str(m, "model.scan_mode", "recurrent");
  if (mode == "recurrent") c.mode = GLAMode::recurrent();
  else if (mode == "chunked") c.mode = GLAMode::chunked(cfg_int(m, "model.chunk", 64));
  else throw ConfigError("unknown scan_mode: " + mode);
  c.stage_widths = cfg_int_list(m, "model.stage_widths");
  c.stage_depths = cfg_int_list(m, "model.stage_depths");
  c.shortcuts = cfg_bool(m, "model.shortcuts", true);
  c.dit_layers = cfg_int(m, "model.dit_layers", 0);
  c.dit_hidden = cfg_int(m, "model.dit_hidden", 0);
  c.dit_patch = cfg_int(m, "model.dit_patch", 0);
  c.validate();
  return c;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["variant"] = c.variant == ModelConfig::Variant::plain ? "plain" : "ushape";
  j["layers"] = c.layers;
  j["hidden"] = c.hidden;
  j["patch"] = c.patch;
  j["image"] = c.image;
  j["channels"] = c.channels;
  j["num_classes"] = c.num_classes;
  j["heads"] = c.heads;
  j["expand_k"] = c.expand_k;
  j["expand_v"] = c.expand_v;
  j["tau"] = c.tau;
  j["ffn_mult"] = c.ffn_mult;
  j["srem_position"] = to_string(c.srem_pos);
  j["bidirectional_mixer"] = c.bidirectional_mixer;
  j["scan_mode"] = c.mode.kind == GLAMode::Kind::recurrent ? "recurrent" : "chunked";
  j["chunk"] = c.mode.chunk;
  j["stage_widths"] = c.stage_widths;
  j["stage_depths"] = c.stage_depths;
  j["shortcuts"] = c.shortcuts;
  j["dit_layers"] = c.dit_layers;
  j["dit_hidden"] = c.dit_hidden;
  j["dit_patch"] = c.dit_patch;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.name = j.value("name", "custom");
  c.variant = j.value("variant", "plain") == std::string("plain") ? ModelConfig::Variant::plain
                                                                  : ModelConfig::Variant::ushape;
  c.layers = j.value("layers", std::int64_t{2});
  c.hidden = j.value("hidden", std::int64_t{16});
  c.patch = j.value("patch", std::int64_t{2});
  c.image = j.value("image", std::int64_t{8});
  c.channels = j.value("channels", std::int64_t{1});
  c.num_classes = j.value("num_classes", std::int64_t{2});
  c.heads = j.value("heads", std::int64_t{0});
  c.expand_k = j.value("expand_k", 0.5);
  c.expand_v = j.value("expand_v", 1.0);
  c.tau = j.value("tau", 16.0);
  c.ffn_mult = j.value("ffn_mult", std::int64_t{4});
  c.srem_pos = srem_position_from_string(j.value("srem_position", "after_ffn"));
  c.bidirectional_mixer = j.value("bidirectional_mixer", false);
  if (j.value("scan_mode", "recurrent") == std::string("chunked"))
    c.mode = GLAMode::chunked(j.value("chunk", std::int64_t{64}));
  c.stage_widths = j.value("stage_widths", std::vector<std::int64_t>{});
  c.stage_depths = j.value("stage_depths", std::vector<std::int64_t>{});
  c.shortcuts = j.value("shortcuts", true);
  c.dit_layers = j.value("dit_layers", std::int64_t{0});
  c.dit_hidden = j.value("dit_hidden", std::int64_t{0});
  c.dit_patch = j.value("dit_patch", std::int64_t{0});
  c.validate();
  return c;
}

/// Load a model config from a preset name or a config file path.
inline ModelConfig resolve_model_config(const std::string& name_or_path) {
  if (name_or_path.find('.') == std::string::npos && name_or_path.find('/') == std::string::npos) {
    return make_preset(name_or_path);
  }
  return model_config_from_map(parse_config_file(name_or_path));
}

}  // namespace dig
