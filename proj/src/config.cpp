#include "roidiff/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "roidiff/errors.hpp"

namespace roidiff {

namespace {
std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}
}  // namespace

KvConfig KvConfig::parse_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open: " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_string(ss.str());
}

KvConfig KvConfig::parse_string(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: expected 'key = value' at line " + std::to_string(lineno));
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config: empty key at line " + std::to_string(lineno));
    if (cfg.kv_.count(key))
      throw ConfigError("config: duplicate key '" + key + "' at line " + std::to_string(lineno));
    cfg.kv_[key] = value;
  }
  return cfg;
}

bool KvConfig::has(const std::string& key) const { return kv_.count(key) != 0; }

std::string KvConfig::take(const std::string& key) {
  consumed_.insert(key);
  return kv_.at(key);
}

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) {
  if (!has(key)) return fallback;
  return take(key);
}

std::string KvConfig::require_string(const std::string& key) {
  if (!has(key)) throw ConfigError("config: missing required key '" + key + "'");
  return take(key);
}

long KvConfig::get_int(const std::string& key, long fallback) {
  if (!has(key)) return fallback;
  std::string v = take(key);
  try {
    size_t pos = 0;
    long out = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not an integer: " + v);
  }
}

double KvConfig::get_double(const std::string& key, double fallback) {
  if (!has(key)) return fallback;
  std::string v = take(key);
  try {
    size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not a number: " + v);
  }
}

bool KvConfig::get_bool(const std::string& key, bool fallback) {
  if (!has(key)) return fallback;
  std::string v = take(key);
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config: key '" + key + "' is not a boolean: " + v);
}

uint64_t KvConfig::get_seed(const std::string& key, uint64_t fallback) {
  if (!has(key)) return fallback;
  std::string v = take(key);
  try {
    size_t pos = 0;
    unsigned long long out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not a seed: " + v);
  }
}

void KvConfig::finish() const {
  std::string unknown;
  for (const auto& [k, _] : kv_)
    if (!consumed_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  if (!unknown.empty()) throw ConfigError("config: unknown keys: " + unknown);
}

}  // namespace roidiff
