#pragma once

#include <filesystem>

#include "common/jsonio.hpp"
#include "nn/modules.hpp"

namespace tsyn::nn {

// Checkpoint = directory with manifest.json plus one little-endian float32
// raw blob per parameter, named by its dotted path.
void save_checkpoint(const ParamStore& store, const std::filesystem::path& dir, const json& extra);

// Reads manifest.json (throws on malformed checkpoints).
json read_checkpoint_manifest(const std::filesystem::path& dir);

// Fills an already-constructed store; shapes must match the manifest.
void load_checkpoint(ParamStore& store, const std::filesystem::path& dir);

}  // namespace tsyn::nn
