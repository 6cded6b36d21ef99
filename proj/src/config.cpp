// SPDX-License-Identifier: Apache-2.0
#include "sdnia/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include "sdnia/errors.hpp"

namespace sdnia::config {

nlohmann::json load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  try {
    auto j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
    if (!j.is_object()) throw ConfigError("config file " + path.string() + " must hold a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
}

void apply_override(nlohmann::json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  nlohmann::json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override '" + assignment + "' descends into a non-object value");
      *node = nlohmann::json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

nlohmann::json section(const nlohmann::json& root, const std::string& name) {
  if (!root.contains(name)) return nlohmann::json::object();
  const auto& s = root.at(name);
  if (!s.is_object()) throw ConfigError("config section '" + name + "' must be an object");
  return s;
}

void check_keys(const nlohmann::json& object, const std::string& where, const std::vector<std::string>& allowed) {
  for (const auto& item : object.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      throw ConfigError(where + ": unknown key '" + item.key() + "' (allowed: " + list + ")");
    }
  }
}

std::filesystem::path cache_dir() {
  const char* env = std::getenv("SDNIA_CACHE_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path();
}

}  // namespace sdnia::config
