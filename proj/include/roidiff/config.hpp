#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>

namespace roidiff {

// Flat "key = value" run configuration. '#' starts a comment. Typed getters
// track which keys were consumed; finish() rejects leftovers so typos fail
// loudly instead of silently using defaults.
class KvConfig {
 public:
  static KvConfig parse_file(const std::filesystem::path& path);
  static KvConfig parse_string(const std::string& text);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback);
  std::string require_string(const std::string& key);
  long get_int(const std::string& key, long fallback);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);
  uint64_t get_seed(const std::string& key, uint64_t fallback);

  void finish() const;  // throws ConfigError on unconsumed keys

 private:
  std::string take(const std::string& key);
  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> consumed_;
};

}  // namespace roidiff
