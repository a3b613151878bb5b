#pragma once

// Run configuration: `key = value` files with flag overrides. Each command
// accepts a fixed key set; unknown keys are rejected. The resolved config is
// written back out in the same format, so any run can be replayed from it.

#include <algorithm>
#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "maskgit/errors.hpp"

namespace maskgit {

struct ConfigKey {
  std::string name;
  std::string fallback;  // default value; empty = unset
  std::string help;
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
inline std::map<std::string, std::string> parse_config_text(const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (out.count(key)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    out[key] = trim(std::string_view(line).substr(eq + 1));
  }
  return out;
}

class RunConfig {
 public:
  RunConfig(std::string command, std::vector<ConfigKey> keys) : command_(std::move(command)), keys_(std::move(keys)) {
    for (const auto& k : keys_) {
      if (!k.fallback.empty()) values_[k.name] = k.fallback;
    }
  }

  const std::string& command() const noexcept { return command_; }
  const std::vector<ConfigKey>& keys() const noexcept { return keys_; }

  bool known(const std::string& key) const {
    return std::any_of(keys_.begin(), keys_.end(), [&](const ConfigKey& k) { return k.name == key; });
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown key '" + key + "' for command '" + command_ + "'");
    values_[key] = value;
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    for (const auto& [k, v] : parse_config_text(ss.str(), path.string())) set(k, v);
  }

  bool has(const std::string& key) const {
    const auto it = values_.find(key);
    return it != values_.end() && !it->second.empty();
  }

  std::string get(const std::string& key) const {
    if (!known(key)) throw ConfigError("internal: key '" + key + "' not declared for '" + command_ + "'");
    const auto it = values_.find(key);
    return it == values_.end() ? "" : it->second;
  }

  std::string require(const std::string& key) const {
    if (!has(key)) throw ConfigError("missing required setting '" + key + "'");
    return get(key);
  }

  long long get_int(const std::string& key) const { return parse_int(key, require(key)); }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string v = require(key);
    errno = 0;
    char* end = nullptr;
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || v[0] == '-' || *end != '\0' || errno == ERANGE) bad(key, v, "a non-negative integer");
    return x;
  }

  double get_double(const std::string& key) const { return parse_double(key, require(key)); }

  bool get_bool(const std::string& key) const {
    const std::string v = require(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad(key, v, "a boolean (true|false)");
  }

  std::vector<double> get_doubles(const std::string& key, char sep = ',') const {
    std::vector<double> out;
    for (const auto& part : split(require(key), sep)) out.push_back(parse_double(key, part));
    return out;
  }

  std::vector<long long> get_ints(const std::string& key) const {
    std::vector<long long> out;
    for (const auto& part : split(require(key), ',')) out.push_back(parse_int(key, part));
    return out;
  }

  std::vector<std::string> get_strings(const std::string& key) const { return split(require(key), ','); }

  /// `key = value` lines for every declared key, in declaration order.
  std::string resolved_text() const {
    std::ostringstream os;
    os << "# maskgit " << command_ << " resolved configuration\n";
    for (const auto& k : keys_) os << k.name << " = " << get(k.name) << '\n';
    return os.str();
  }

  std::map<std::string, std::string> values() const {
    std::map<std::string, std::string> out;
    for (const auto& k : keys_) out[k.name] = get(k.name);
    return out;
  }

 private:
  [[noreturn]] static void bad(const std::string& key, const std::string& v, const std::string& what) {
    throw ConfigError("invalid value '" + v + "' for '" + key + "': expected " + what);
  }

  static long long parse_int(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || *end != '\0' || errno == ERANGE) bad(key, v, "an integer");
    return x;
  }

  static double parse_double(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || errno == ERANGE) bad(key, v, "a number");
    return x;
  }

  std::string command_;
  std::vector<ConfigKey> keys_;
  std::map<std::string, std::string> values_;
};

}  // namespace maskgit
