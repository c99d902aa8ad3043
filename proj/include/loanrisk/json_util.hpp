#pragma once

#include <charconv>
#include <initializer_list>
#include <set>
#include <string>
#include <system_error>

#include <nlohmann/json.hpp>

#include "loanrisk/errors.hpp"

namespace loanrisk {

/// Reads `key` from an object, falling back to `fallback` when absent. Type mismatches
/// raise ConfigError naming `prefix + key`.
template <class T>
T json_get(const nlohmann::json& j, const std::string& key, T fallback, const std::string& prefix = "") {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  try {
    return j[key].get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(prefix + key, std::string("wrong type: ") + e.what());
  }
}

template <class T>
T json_require(const nlohmann::json& j, const std::string& key, const std::string& prefix = "") {
  if (!j.contains(key) || j[key].is_null()) throw ConfigError(prefix + key, "required key is missing");
  try {
    return j[key].get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(prefix + key, std::string("wrong type: ") + e.what());
  }
}

/// Rejects keys outside `allowed`.
inline void json_check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                            const std::string& prefix = "") {
  if (!j.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError(prefix + k, "unknown key");
}

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) return "nan";
  return std::string(buf, ptr);
}

}  // namespace loanrisk
