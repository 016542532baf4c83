#pragma once

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "aar/config_file.hpp"
#include "aar/errors.hpp"
#include "aar/rng.hpp"

namespace aar {

// Per-command configuration with the precedence: built-in defaults, then
// config file, then command-line flags. Every consumed key must be declared;
// unknown keys in a config file are errors.
class PipelineConfig {
 public:
  void declare(const std::string& key, const std::string& default_value) {
    defaults_[key] = default_value;
    values_[key] = default_value;
  }

  void load_file(const std::string& path) {
    for (const auto& [key, value] : parse_kv_file(path)) {
      if (!defaults_.count(key))
        throw config_error(path + ": unknown config key '" + key + "'");
      values_[key] = value;
    }
  }

  // Command-line override; recorded at parse time and applied after the
  // config file so flags always win.
  void set(const std::string& key, const std::string& value) {
    if (!defaults_.count(key)) throw config_error("unknown config key '" + key + "'");
    overrides_[key] = value;
    values_[key] = value;
  }

  void apply_overrides() {
    for (const auto& [key, value] : overrides_) values_[key] = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw config_error("undeclared config key '" + key + "'");
    return it->second;
  }

  long get_int(const std::string& key) const { return parse_int(get(key), key); }
  double get_double(const std::string& key) const { return parse_double(get(key), key); }
  bool get_bool(const std::string& key) const { return parse_bool(get(key), key); }

  uint64_t stage_seed(const std::string& stage) const {
    return seed_fold(static_cast<uint64_t>(get_int("seed")), "stage:" + stage);
  }

  // Resolved configuration echo, printed by every command before running.
  void print(FILE* out) const {
    for (const auto& [key, value] : values_)
      std::fprintf(out, "[config] %s = %s\n", key.c_str(), value.c_str());
  }

 private:
  std::map<std::string, std::string> defaults_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> overrides_;
};

}  // namespace aar
