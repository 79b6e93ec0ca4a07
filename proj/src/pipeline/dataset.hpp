#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "common/jsonio.hpp"
#include "volcore/volume.hpp"

namespace tsyn::pipe {

namespace fs = std::filesystem;

// One corpus case: a directory holding volume.nii.gz plus optional
// organ.nii.gz / lesion.nii.gz.
struct CasePaths {
    std::string id;
    fs::path volume;
    std::optional<fs::path> organ;
    std::optional<fs::path> lesion;
};

// Case subdirectories of `dir`, sorted by name; a directory that itself
// contains volume.nii[.gz] counts as a single case.
std::vector<CasePaths> discover_cases(const fs::path& dir);

struct LoadedCase {
    std::string id;
    vol::Volume volume;
    std::optional<vol::VoxelMask> organ;
    std::optional<vol::VoxelMask> lesion;
};

LoadedCase load_case(const CasePaths& paths);

// Window-normalizes in place using the given spec.
void window_case(LoadedCase& c, const vol::WindowSpec& w);

// Writes volume.nii.gz / organ.nii.gz / lesion.nii.gz (+ meta.json) for one
// phantom into `dir`.
void write_phantom_case(const fs::path& dir, const vol::PhantomSpec& spec);

vol::WindowSpec window_from_json(const json& j, const char* context);
json window_to_json(const vol::WindowSpec& w);
vol::PhantomSpec phantom_spec_from_json(const json& j);
json phantom_spec_to_json(const vol::PhantomSpec& spec);

// Atomic run manifest written at the end of every directory-producing run.
struct RunManifest {
    std::string run_id;
    std::string config_hash;
    std::vector<std::string> artifacts;
    json metrics = json::object();
    json timings = json::object();
    std::string version;

    void write(const fs::path& dir) const;
};

std::string tool_version();

// Checkpoint cache rooted at $LLL_CACHE_DIR (unset: caching disabled).
std::optional<fs::path> cache_lookup(const std::string& key);
void cache_store(const std::string& key, const fs::path& src_dir);
void copy_dir(const fs::path& from, const fs::path& to);

}  // namespace tsyn::pipe
