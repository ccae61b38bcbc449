#pragma once

// String conversion for config fields, shared by the INI reader and the
// checkpoint's key=value block. Config structs expose their fields through a
// static `fields(self, visitor)` that calls visitor(key, member) per field.

#include <charconv>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <system_error>

#include "ssnt/tensor.hpp"

namespace ssnt {

inline std::string field_to_string(bool v) { return v ? "true" : "false"; }
inline std::string field_to_string(std::size_t v) { return std::to_string(v); }
inline std::string field_to_string(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline bool field_from_string(std::string_view s, bool& out) {
  if (s == "true" || s == "1" || s == "yes") {
    out = true;
  } else if (s == "false" || s == "0" || s == "no") {
    out = false;
  } else {
    return false;
  }
  return true;
}

inline bool field_from_string(std::string_view s, std::size_t& out) {
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return !s.empty() && res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline bool field_from_string(std::string_view s, double& out) {
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return !s.empty() && res.ec == std::errc() && res.ptr == s.data() + s.size();
}

using KeyValues = std::map<std::string, std::string>;

template <class Config>
KeyValues config_to_kv(const Config& cfg, const std::string& prefix = "") {
  KeyValues kv;
  Config::fields(cfg, [&](const char* key, const auto& v) { kv[prefix + key] = field_to_string(v); });
  return kv;
}

/// Assigns every `prefix+key` present in `kv`. Returns the number of keys used.
template <class Config>
std::size_t config_from_kv(Config& cfg, const KeyValues& kv, const std::string& prefix = "") {
  std::size_t used = 0;
  Config::fields(cfg, [&](const char* key, auto& v) {
    auto it = kv.find(prefix + key);
    if (it == kv.end()) return;
    if (!field_from_string(it->second, v)) {
      throw ConfigError("invalid value '" + it->second + "' for key '" + prefix + key + "'");
    }
    ++used;
  });
  return used;
}

template <class Config>
bool config_has_key(const std::string& key) {
  bool found = false;
  Config probe{};
  Config::fields(probe, [&](const char* k, const auto&) { found |= key == k; });
  return found;
}

}  // namespace ssnt
