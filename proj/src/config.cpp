#include "mugv/config.hpp"

#include <cstdlib>
#include <fstream>

namespace mugv {

using nlohmann::json;

json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    try {
        json j;
        f >> j;
        return j;
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, v] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError(where + ": unknown key \"" + key + "\"");
    }
}

uint64_t resolve_seed(const json& cfg, uint64_t fallback) {
    uint64_t seed = fallback;
    if (cfg.contains("seed")) {
        if (!cfg["seed"].is_number_integer() || cfg["seed"].get<int64_t>() < 0)
            throw ConfigError("seed must be a nonnegative integer");
        seed = cfg["seed"].get<uint64_t>();
    }
    if (const char* env = std::getenv("MUGV_SEED")) {
        char* end = nullptr;
        unsigned long long v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0') throw ConfigError(std::string("MUGV_SEED is not an integer: \"") + env + "\"");
        seed = static_cast<uint64_t>(v);
    }
    return seed;
}

Dtype resolve_precision(const json& cfg) {
    if (!cfg.contains("precision")) return Dtype::f64;
    std::string p = cfg["precision"].get<std::string>();
    if (p == "single") return Dtype::f32;
    if (p == "double") return Dtype::f64;
    throw ConfigError("precision must be \"single\" or \"double\", got \"" + p + "\"");
}

}  // namespace mugv
