#include "dive/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "dive/error.hpp"
#include "dive/rng.hpp"

namespace dive {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::parse(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw Error(ErrorCode::kConfig, "line " + std::to_string(lineno) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::kConfig, "line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw Error(ErrorCode::kConfig, "line " + std::to_string(lineno) + ": empty key");
    cfg.sections_[section][key] = trim(line.substr(eq + 1));
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config " + path.string());
  return parse({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
}

bool Config::has(const std::string& section, const std::string& key) const { return get(section, key).has_value(); }

std::optional<std::string> Config::get(const std::string& section, const std::string& key) const {
  const auto s = sections_.find(section);
  if (s == sections_.end()) return std::nullopt;
  const auto k = s->second.find(key);
  if (k == s->second.end()) return std::nullopt;
  return k->second;
}

std::string Config::get_string(const std::string& section, const std::string& key, const std::string& fallback) const {
  return get(section, key).value_or(fallback);
}

double Config::get_double(const std::string& section, const std::string& key, double fallback) const {
  const auto v = get(section, key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const double d = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument(*v);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorCode::kConfig, section + "." + key + ": not a number: '" + *v + "'");
  }
}

long long Config::get_int(const std::string& section, const std::string& key, long long fallback) const {
  const auto v = get(section, key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const long long i = std::stoll(*v, &used);
    if (used != v->size()) throw std::invalid_argument(*v);
    return i;
  } catch (const std::exception&) {
    throw Error(ErrorCode::kConfig, section + "." + key + ": not an integer: '" + *v + "'");
  }
}

bool Config::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  const auto v = get(section, key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw Error(ErrorCode::kConfig, section + "." + key + ": not a boolean: '" + *v + "'");
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
  sections_[section][key] = value;
}

std::string Config::canonical() const {
  std::string out;
  for (const auto& [name, keys] : sections_) {
    if (keys.empty()) continue;
    out += "[" + name + "]\n";
    for (const auto& [k, v] : keys) out += k + " = " + v + "\n";
  }
  return out;
}

std::string Config::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash_string(canonical())));
  return buf;
}

std::uint64_t default_seed() {
  const char* env = std::getenv("DIVE_SEED");
  if (!env || !*env) return 0;
  const std::string s = env;
  if (s.find_first_not_of("0123456789") != std::string::npos) {
    throw Error(ErrorCode::kConfig, "DIVE_SEED must be a non-negative integer, got '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw Error(ErrorCode::kConfig, "DIVE_SEED out of range: '" + s + "'");
  }
}

}  // namespace dive
