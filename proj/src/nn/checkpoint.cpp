#include "nn/checkpoint.hpp"

#include <fstream>

#include "common/error.hpp"

namespace tsyn::nn {

namespace fs = std::filesystem;

void save_checkpoint(const ParamStore& store, const fs::path& dir, const json& extra) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "tsyn-ckpt-v1";
    manifest["dtype"] = "float32";
    json shapes = json::object();
    for (const auto& [name, p] : store.all()) {
        shapes[name] = p.shape();
        std::ofstream out(dir / (name + ".bin"), std::ios::binary);
        if (!out) fail_io("cannot write checkpoint blob: " + (dir / (name + ".bin")).string());
        std::vector<float> buf(p.size());
        for (std::int64_t i = 0; i < p.size(); ++i) buf[i] = static_cast<float>(p.data()[i]);
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    }
    manifest["params"] = shapes;
    for (auto it = extra.begin(); it != extra.end(); ++it) manifest[it.key()] = it.value();
    save_json_file(manifest, dir / "manifest.json");
}

json read_checkpoint_manifest(const fs::path& dir) {
    const auto mpath = dir / "manifest.json";
    if (!fs::exists(mpath)) fail_io("not a checkpoint directory (no manifest.json): " + dir.string());
    json m = load_json_file(mpath);
    if (!m.contains("format") || m["format"] != "tsyn-ckpt-v1")
        fail_io("unsupported checkpoint format in " + dir.string());
    return m;
}

void load_checkpoint(ParamStore& store, const fs::path& dir) {
    json manifest = read_checkpoint_manifest(dir);
    const json& shapes = manifest.at("params");
    for (auto& [name, p] : const_cast<std::map<std::string, Tensor>&>(store.all())) {
        if (!shapes.contains(name)) fail_io("checkpoint missing parameter '" + name + "' in " + dir.string());
        const auto want = shapes.at(name).get<std::vector<int>>();
        if (want != p.shape())
            fail_io("checkpoint shape mismatch for '" + name + "': file " + ad::shape_str(want) + " vs model " +
                    ad::shape_str(p.shape()));
        std::ifstream in(dir / (name + ".bin"), std::ios::binary);
        if (!in) fail_io("cannot read checkpoint blob: " + (dir / (name + ".bin")).string());
        std::vector<float> buf(p.size());
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        if (in.gcount() != static_cast<std::streamsize>(buf.size() * 4))
            fail_io("truncated checkpoint blob: " + (dir / (name + ".bin")).string());
        for (std::int64_t i = 0; i < p.size(); ++i) p.data()[i] = static_cast<double>(buf[i]);
    }
}

}  // namespace tsyn::nn
