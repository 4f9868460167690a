#pragma once

// Layered option resolution for the command-line tool:
//   defaults < config file (JSON object) < command-line flags < VALGATE_* environment
// Keys are the long flag names ("hidden-units"); in the environment they are
// upper-cased with '-' replaced by '_' (VALGATE_HIDDEN_UNITS). Unknown keys in
// the file or the environment are rejected.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "valgate/errors.hpp"

extern char** environ;

namespace valgate {

enum class OptionType { string, integer, real, boolean };

struct OptionSpec {
  std::string key;
  OptionType type = OptionType::string;
  std::optional<std::string> default_value;
  std::string help;
  bool required = false;
};

inline constexpr std::string_view kEnvPrefix = "VALGATE_";

inline std::string normalize_key(std::string key) {
  for (char& c : key) c = c == '_' ? '-' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return key;
}

/// VALGATE_* variables of the current process, keyed by normalized option name.
inline std::map<std::string, std::string> environment_overrides(char** envp = environ) {
  std::map<std::string, std::string> out;
  for (char** e = envp; e && *e; ++e) {
    std::string_view kv(*e);
    if (!kv.starts_with(kEnvPrefix)) continue;
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos) continue;
    out[normalize_key(std::string(kv.substr(kEnvPrefix.size(), eq - kEnvPrefix.size())))] = std::string(kv.substr(eq + 1));
  }
  return out;
}

class RunConfig {
 public:
  static RunConfig resolve(const std::vector<OptionSpec>& specs, const std::map<std::string, std::string>& flags,
                           const std::optional<nlohmann::json>& file, const std::map<std::string, std::string>& env) {
    RunConfig cfg;
    std::map<std::string, const OptionSpec*> known;
    for (const auto& s : specs) known[s.key] = &s;
    for (const auto& s : specs) {
      if (s.default_value) cfg.set(s, *s.default_value, "default");
    }
    if (file) {
      if (!file->is_object()) throw ConfigError("config file must hold a JSON object");
      for (const auto& [raw_key, value] : file->items()) {
        const std::string key = normalize_key(raw_key);
        auto it = known.find(key);
        if (it == known.end()) throw ConfigError("unknown config key '" + raw_key + "'");
        cfg.set(*it->second, value.is_string() ? value.get<std::string>() : value.dump(), "file");
      }
    }
    for (const auto& [key, value] : flags) {
      auto it = known.find(normalize_key(key));
      if (it == known.end()) throw ConfigError("unknown option '--" + key + "'");
      cfg.set(*it->second, value, "flag");
    }
    for (const auto& [key, value] : env) {
      auto it = known.find(normalize_key(key));
      if (it == known.end()) {
        std::string var(kEnvPrefix);
        for (char c : key) var.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
        throw ConfigError("unknown environment override " + var);
      }
      cfg.set(*it->second, value, "env");
    }
    for (const auto& s : specs) {
      if (s.required && !cfg.has(s.key)) throw ConfigError("missing required option --" + s.key);
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.contains(key); }

  std::string source(const std::string& key) const { return entry(key).source; }

  std::string get_string(const std::string& key) const { return entry(key).value; }

  std::optional<std::string> get_optional(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    return entry(key).value;
  }

  long long get_int(const std::string& key) const { return parse_int(key, entry(key).value); }

  std::size_t get_count(const std::string& key) const {
    const long long v = get_int(key);
    if (v < 0) throw ConfigError("--" + key + " must be non-negative");
    return static_cast<std::size_t>(v);
  }

  double get_real(const std::string& key) const { return parse_real(key, entry(key).value); }

  bool get_bool(const std::string& key) const { return parse_bool(key, entry(key).value); }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, e] : values_) j[k] = {{"value", e.value}, {"source", e.source}};
    return j;
  }

 private:
  struct Entry {
    std::string value;
    std::string source;
  };

  const Entry& entry(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("option --" + key + " is not set");
    return it->second;
  }

  void set(const OptionSpec& spec, const std::string& value, const std::string& source) {
    switch (spec.type) {  // type-check eagerly so errors name the offending layer
      case OptionType::integer: parse_int(spec.key, value); break;
      case OptionType::real: parse_real(spec.key, value); break;
      case OptionType::boolean: parse_bool(spec.key, value); break;
      case OptionType::string: break;
    }
    values_[spec.key] = {value, source};
  }

  static long long parse_int(const std::string& key, const std::string& s) {
    long long v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("--" + key + ": '" + s + "' is not an integer");
    return v;
  }

  static double parse_real(const std::string& key, const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || std::isnan(v)) {
      throw ConfigError("--" + key + ": '" + s + "' is not a number");
    }
    return v;
  }

  static bool parse_bool(const std::string& key, std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("--" + key + ": '" + s + "' is not a boolean");
  }

  std::map<std::string, Entry> values_;
};

}  // namespace valgate
