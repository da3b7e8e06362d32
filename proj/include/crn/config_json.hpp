#pragma once

#include <set>
#include <string>

#include "json.hpp"

#include "crn/errors.hpp"

namespace crn {

/// Strict reader for JSON config objects: every key must be consumed, and
/// type mismatches are reported with the offending key.
class StrictObject {
public:
    StrictObject(const nlohmann::json& j, std::string what) : j_(j), what_(std::move(what)) {
        if (!j_.is_object()) throw ConfigError(what_ + ": expected a JSON object");
    }

    template <typename T>
    bool get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return false;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(what_ + ": key \"" + key + "\" has the wrong type");
        }
        return true;
    }

    template <typename T>
    void require(const std::string& key, T& out) {
        if (!get(key, out)) throw ConfigError(what_ + ": missing required key \"" + key + "\"");
    }

    const nlohmann::json* sub(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    /// Throws ConfigError naming the first unknown key.
    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (!seen_.count(key)) throw ConfigError(what_ + ": unknown key \"" + key + "\"");
    }

private:
    const nlohmann::json& j_;
    std::string what_;
    std::set<std::string> seen_;
};

}  // namespace crn
