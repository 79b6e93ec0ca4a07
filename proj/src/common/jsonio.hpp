#pragma once

#include <json.hpp>

#include <filesystem>
#include <set>
#include <string>

#include "common/error.hpp"

namespace tsyn {

using json = nlohmann::json;

json load_json_file(const std::filesystem::path& path);

// Atomic write: dump to <path>.tmp then rename.
void save_json_file(const json& j, const std::filesystem::path& path, int indent = 2);

// Stable 64-bit hash of a JSON document (canonical compact dump).
std::string json_hash_hex(const json& j);

// Strict-key helper: every config reader declares the keys it understands and
// anything else is rejected, naming the offending key.
class JsonReader {
public:
    JsonReader(const json& j, std::string context);
    ~JsonReader() noexcept(false);

    JsonReader(const JsonReader&) = delete;
    JsonReader& operator=(const JsonReader&) = delete;

    bool has(const std::string& key) const;

    template <typename T>
    T get(const std::string& key, const T& fallback) {
        seen_.insert(key);
        if (!obj_.contains(key)) return fallback;
        return read_as<T>(key);
    }

    template <typename T>
    T require(const std::string& key) {
        seen_.insert(key);
        if (!obj_.contains(key)) fail_config(context_ + ": missing required key '" + key + "'");
        return read_as<T>(key);
    }

    // Sub-object access; marks the key as understood.
    json child(const std::string& key, bool required = false);

    // Call last (also runs from the destructor): rejects unknown keys.
    void finish();

private:
    template <typename T>
    T read_as(const std::string& key) {
        try {
            return obj_.at(key).get<T>();
        } catch (const json::exception& e) {
            fail_config(context_ + ": bad value for key '" + key + "': " + e.what());
        }
    }

    const json& obj_;
    std::string context_;
    std::set<std::string> seen_;
    bool finished_ = false;
};

}  // namespace tsyn
