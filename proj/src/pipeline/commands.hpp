#pragma once

#include <string>

#include "common/jsonio.hpp"

namespace tsyn::pipe {

// Subcommand implementations. Options arrive as one resolved JSON object
// (defaults < config file < flags, merged by the caller); unknown keys are
// rejected. Each returns a JSON summary of what was produced.
json cmd_phantom_gen(const json& opts);
json cmd_preprocess(const json& opts);
json cmd_train_ae(const json& opts);
json cmd_train_diff(const json& opts);
json cmd_maskgen(const json& opts);
json cmd_synth(const json& opts);
json cmd_train_seg(const json& opts);
json cmd_eval(const json& opts);
json cmd_ablate_timesteps(const json& opts);
json cmd_ablate_annotations(const json& opts);
json cmd_features(const json& opts);
json cmd_origin_study(const json& opts);

bool is_known_command(const std::string& name);
json run_command(const std::string& name, const json& opts);

}  // namespace tsyn::pipe
