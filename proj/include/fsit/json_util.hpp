#pragma once

// Helpers for reading partially specified JSON objects onto defaults.

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "fsit/errors.hpp"

namespace fsit::jsonutil {

/// Throws ConfigError when `j` holds a key outside `known`.
inline void require_known(const nlohmann::json& j, std::string_view what, std::initializer_list<std::string_view> known) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown " + std::string(what) + " key '" + key + "'");
  }
}

/// Overwrites `dst` when `key` is present.
template <typename T>
void read(const nlohmann::json& j, const char* key, T& dst) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    dst = it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("bad value for '") + key + "': " + it->dump());
  }
}

}  // namespace fsit::jsonutil
