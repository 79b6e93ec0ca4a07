#include "common/jsonio.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "common/rng.hpp"

namespace tsyn {

json load_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail_io("cannot open JSON file: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        fail_config("malformed JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

void save_json_file(const json& j, const std::filesystem::path& path, int indent) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) fail_io("cannot write JSON file: " + path.string());
        out << j.dump(indent) << "\n";
    }
    std::filesystem::rename(tmp, path);
}

std::string json_hash_hex(const json& j) {
    const std::string dump = j.dump();
    const std::uint64_t h = fnv1a64(dump);
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

JsonReader::JsonReader(const json& j, std::string context) : obj_(j), context_(std::move(context)) {
    if (!j.is_object()) fail_config(context_ + ": expected a JSON object");
}

JsonReader::~JsonReader() noexcept(false) {
    if (!finished_ && std::uncaught_exceptions() == 0) finish();
}

bool JsonReader::has(const std::string& key) const { return obj_.contains(key); }

json JsonReader::child(const std::string& key, bool required) {
    seen_.insert(key);
    if (!obj_.contains(key)) {
        if (required) fail_config(context_ + ": missing required key '" + key + "'");
        return json::object();
    }
    if (!obj_.at(key).is_object()) fail_config(context_ + ": key '" + key + "' must be an object");
    return obj_.at(key);
}

void JsonReader::finish() {
    finished_ = true;
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
        if (!seen_.count(it.key())) fail_config(context_ + ": unknown key '" + it.key() + "'");
    }
}

}  // namespace tsyn
