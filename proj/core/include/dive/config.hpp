#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dive {

/// Flat `[section]` / `key = value` text configuration. Keys outside any
/// section live in section "".
class Config {
 public:
  static Config parse(const std::string& text);
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& section, const std::string& key) const;
  std::optional<std::string> get(const std::string& section, const std::string& key) const;
  std::string get_string(const std::string& section, const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  long long get_int(const std::string& section, const std::string& key, long long fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  void set(const std::string& section, const std::string& key, const std::string& value);

  /// Canonical text: sections and keys sorted.
  std::string canonical() const;
  /// 16 hex digits of FNV-1a over canonical().
  std::string hash() const;

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

/// DIVE_SEED when set (must be a non-negative integer), otherwise 0.
std::uint64_t default_seed();

}  // namespace dive
