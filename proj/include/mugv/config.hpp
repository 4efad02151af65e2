#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "mugv/params.hpp"

namespace mugv {

// Parses the file as JSON; io or syntax problems become ConfigError.
nlohmann::json load_json_file(const std::string& path);

// Strict parsing: every key of obj must appear in allowed, otherwise
// ConfigError names the stray key. Guards against configs silently drifting.
void reject_unknown_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                         const std::string& where);

// Seed from cfg["seed"] (default fallback); the MUGV_SEED environment
// variable, when set, overrides both.
uint64_t resolve_seed(const nlohmann::json& cfg, uint64_t fallback = 0);

// cfg["precision"]: "single" -> f32 storage, "double" (default) -> f64.
Dtype resolve_precision(const nlohmann::json& cfg);

}  // namespace mugv
