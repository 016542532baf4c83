#pragma once

#include <map>
#include <string>

#include "aar/corpus_io.hpp"
#include "aar/errors.hpp"

namespace aar {

// Flat "key = value" files with '#' comments. Duplicate keys keep the last
// value. Insertion order is irrelevant; consumers read by key.
inline std::map<std::string, std::string> parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config file: " + path);
  std::map<std::string, std::string> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::string t = detail::trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw config_error(path + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(t.substr(0, eq));
    std::string value = detail::trim(t.substr(eq + 1));
    if (key.empty())
      throw config_error(path + ":" + std::to_string(lineno) + ": empty key");
    out[key] = value;
  }
  return out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw config_error("key '" + key + "': expected a boolean, got '" + v + "'");
}

inline long parse_int(const std::string& v, const std::string& key) {
  try {
    size_t used = 0;
    long out = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw config_error("key '" + key + "': expected an integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw config_error("key '" + key + "': expected a number, got '" + v + "'");
  }
}

}  // namespace aar
