// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdnia/errors.hpp"

namespace sdnia::config {

/// Parses a JSON config file. Throws ConfigError with the parser message.
nlohmann::json load_file(const std::filesystem::path& path);

/// Applies "a.b.c=value". The value is parsed as JSON when possible (numbers, booleans, arrays,
/// quoted strings) and kept as a plain string otherwise. Intermediate objects are created.
void apply_override(nlohmann::json& root, const std::string& assignment);

/// root[name] when it is an object, an empty object when absent. ConfigError for other types.
nlohmann::json section(const nlohmann::json& root, const std::string& name);

/// Rejects keys outside `allowed` with a ConfigError naming the section.
void check_keys(const nlohmann::json& object, const std::string& where, const std::vector<std::string>& allowed);

/// SDNIA_CACHE_DIR, or an empty path when unset.
std::filesystem::path cache_dir();

/// Reads a typed value, wrapping JSON type errors into ConfigError naming `where`.
template <typename T>
T get(const nlohmann::json& object, const std::string& key, const T& fallback, const std::string& where) {
  if (!object.contains(key)) return fallback;
  try {
    return object.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace sdnia::config
