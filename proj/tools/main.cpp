// tumorsynth command-line front end. All work happens behind the C API in
// libtumorsynth; this file only resolves flags into the options JSON.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tumorsynth/tumorsynth.h"

using json = nlohmann::json;

namespace {

enum class ArgType { String, JsonRef, Int, UInt64, Double, IntList };

struct OptSpec {
    std::string flag;     // long flag, no dashes
    ArgType type;
    std::string help;
    bool required = false;
};

struct CommandSpec {
    std::string name;
    std::string help;
    std::vector<OptSpec> opts;
};

const std::vector<CommandSpec>& commands() {
    static const std::vector<CommandSpec> cmds = {
        {"phantom-gen",
         "Generate procedural phantom volumes (volume/organ/lesion + meta)",
         {{"spec", ArgType::JsonRef, "phantom spec JSON (path or inline)", true},
          {"out", ArgType::String, "output directory", true},
          {"count", ArgType::Int, "number of phantoms (case_### subdirs when > 1)"},
          {"seed", ArgType::UInt64, "seed override"}}},
        {"preprocess",
         "Reorient, resample isotropically and window-normalize cases",
         {{"in", ArgType::String, "input case directory or single case", true},
          {"out", ArgType::String, "output directory", true},
          {"axcodes", ArgType::String, "target orientation (default RAS)"},
          {"spacing", ArgType::Double, "target isotropic spacing in mm (default 1.0)"},
          {"window", ArgType::JsonRef, "window spec JSON (path or inline)"},
          {"config", ArgType::JsonRef, "options file (flags override it)"}}},
        {"train-ae",
         "Train the stage-1 VQ autoencoder",
         {{"config", ArgType::JsonRef, "options file (flags override it)"},
          {"data", ArgType::String, "training corpus directory", true},
          {"out", ArgType::String, "run directory (checkpoint/ inside)", true},
          {"seed", ArgType::UInt64, "seed override"}}},
        {"train-diff",
         "Train the stage-2 mask-conditioned latent diffusion model",
         {{"ae", ArgType::String, "autoencoder checkpoint directory", true},
          {"config", ArgType::JsonRef, "options file (flags override it)"},
          {"data", ArgType::String, "annotated (tumor) corpus directory", true},
          {"out", ArgType::String, "run directory", true},
          {"max-cases", ArgType::Int, "cap on annotated cases"},
          {"seed", ArgType::UInt64, "seed override"}}},
        {"maskgen",
         "Generate one procedural tumor mask inside an organ mask",
         {{"organ", ArgType::String, "organ mask (NIfTI)", true},
          {"policy", ArgType::JsonRef, "mask policy JSON (path or inline)"},
          {"seed", ArgType::UInt64, "seed"},
          {"out", ArgType::String, "output mask path (.nii/.nii.gz)", true}}},
        {"synth",
         "Synthesize a tumor into a healthy volume",
         {{"ae", ArgType::String, "autoencoder checkpoint", true},
          {"diff", ArgType::String, "diffusion checkpoint", true},
          {"volume", ArgType::String, "preprocessed healthy volume", true},
          {"organ", ArgType::String, "organ mask", true},
          {"config", ArgType::JsonRef, "synthesis config JSON (path or inline)"},
          {"seed", ArgType::UInt64, "seed"},
          {"out", ArgType::String, "output directory", true}}},
        {"train-seg",
         "Train the segmentation model on real and/or synthetic tumors",
         {{"real", ArgType::String, "annotated corpus directory"},
          {"healthy", ArgType::String, "healthy corpus directory"},
          {"synth", ArgType::String, "off|on: inject synthetic tumors into healthy cases"},
          {"ae", ArgType::String, "autoencoder checkpoint (synth on)"},
          {"diff", ArgType::String, "diffusion checkpoint (synth on)"},
          {"config", ArgType::JsonRef, "options file (flags override it)"},
          {"out", ArgType::String, "run directory", true},
          {"seed", ArgType::UInt64, "seed override"}}},
        {"eval",
         "Evaluate a segmentation checkpoint (DSC, NSD, tumor-wise sensitivity)",
         {{"model", ArgType::String, "segmentation run directory", true},
          {"data", ArgType::String, "test corpus directory", true},
          {"out", ArgType::String, "report directory", true},
          {"config", ArgType::JsonRef, "options file (flags override it)"},
          {"jobs", ArgType::Int, "parallel case-level workers"}}},
        {"ablate-timesteps",
         "Sweep sampling-step counts; report speed and downstream DSC",
         {{"steps", ArgType::IntList, "comma-separated sampling-step counts", true},
          {"report", ArgType::String, "report JSON path", true},
          {"ae", ArgType::String, "autoencoder checkpoint", true},
          {"diff", ArgType::String, "diffusion checkpoint", true},
          {"real", ArgType::String, "annotated corpus"},
          {"healthy", ArgType::String, "healthy corpus", true},
          {"test", ArgType::String, "test corpus", true},
          {"config", ArgType::JsonRef, "options file (flags override it)"},
          {"seed", ArgType::UInt64, "seed"}}},
        {"ablate-annotations",
         "Retrain diffusion on n annotated tumors; report downstream DSC",
         {{"n", ArgType::IntList, "comma-separated annotation counts", true},
          {"report", ArgType::String, "report JSON path", true},
          {"ae", ArgType::String, "autoencoder checkpoint", true},
          {"real", ArgType::String, "annotated corpus", true},
          {"healthy", ArgType::String, "healthy corpus", true},
          {"test", ArgType::String, "test corpus", true},
          {"config", ArgType::JsonRef, "options file (flags override it)"},
          {"seed", ArgType::UInt64, "seed"}}},
        {"features",
         "Extract the 12-feature battery for a case manifest into CSV",
         {{"cases", ArgType::String, "case manifest JSON", true},
          {"out", ArgType::String, "output CSV path", true}}},
        {"origin-study",
         "Train origin classifiers on a feature CSV; emit report and 2D embedding",
         {{"features", ArgType::String, "features CSV", true},
          {"report", ArgType::String, "report JSON path", true},
          {"plot", ArgType::String, "embedding CSV path"},
          {"kind", ArgType::String, "linear_hinge|nearest_neighbor"},
          {"seed", ArgType::UInt64, "seed"},
          {"test-fraction", ArgType::Double, "held-out fraction"}}},
    };
    return cmds;
}

json parse_json_ref(const std::string& value) {
    // inline JSON or a path to a JSON file; paths stay strings (resolved in core)
    if (!value.empty() && value.front() == '{') return json::parse(value);
    return json(value);
}

void usage() {
    std::cout << "usage: tumorsynth <command> [--flags]\n\ncommands:\n";
    for (const auto& c : commands()) std::cout << "  " << c.name << std::string(20 - c.name.size(), ' ') << c.help << "\n";
    std::cout << "\n'tumorsynth <command> --help' lists the command's flags.\n";
}

// flags keep their CLI spelling as JSON keys, dashes become underscores
std::string json_key(const std::string& flag) {
    std::string key = flag;
    for (auto& ch : key)
        if (ch == '-') ch = '_';
    return key;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        usage();
        return 2;
    }
    const std::string cmd = argv[1];
    if (cmd == "-h" || cmd == "--help") {
        usage();
        return 0;
    }
    if (cmd == "--version") {
        std::cout << ts_version() << "\n";
        return 0;
    }
    const CommandSpec* spec = nullptr;
    for (const auto& c : commands())
        if (c.name == cmd) spec = &c;
    if (!spec) {
        std::cerr << "tumorsynth: unknown command '" << cmd << "'\n";
        usage();
        return 2;
    }

    CLI::App app(spec->help, "tumorsynth " + cmd);
    app.allow_extras();
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
    for (const auto& o : spec->opts) {
        auto* opt = app.add_option("--" + o.flag, values[o.flag], o.help);
        options[o.flag] = opt;
    }

    std::vector<std::string> args(argv + 2, argv + argc);
    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "tumorsynth " << cmd << ": " << e.what() << "\n";
        return 3;
    }
    const auto extras = app.remaining();
    if (!extras.empty()) {
        std::cerr << "tumorsynth " << cmd << ": unknown flag '" << extras.front() << "'\n";
        return 3;
    }

    // defaults < config file < flags
    json opts = json::object();
    try {
        for (const auto& o : spec->opts) {
            if (o.flag != "config" || options[o.flag]->count() == 0) continue;
            json ref = parse_json_ref(values[o.flag]);
            if (ref.is_string()) {
                std::ifstream in(ref.get<std::string>());
                if (!in) {
                    std::cerr << "tumorsynth " << cmd << ": cannot open config file " << ref.get<std::string>()
                              << "\n";
                    return 3;
                }
                in >> opts;
            } else {
                opts = ref;
            }
            if (!opts.is_object()) {
                std::cerr << "tumorsynth " << cmd << ": config must be a JSON object\n";
                return 3;
            }
        }
        for (const auto& o : spec->opts) {
            if (o.flag == "config" || options[o.flag]->count() == 0) continue;
            const std::string& raw = values[o.flag];
            const std::string key = json_key(o.flag);
            switch (o.type) {
                case ArgType::String:
                    opts[key] = raw;
                    break;
                case ArgType::JsonRef:
                    opts[key] = parse_json_ref(raw);
                    break;
                case ArgType::Int:
                    opts[key] = std::stoi(raw);
                    break;
                case ArgType::UInt64:
                    opts[key] = static_cast<std::uint64_t>(std::stoull(raw));
                    break;
                case ArgType::Double:
                    opts[key] = std::stod(raw);
                    break;
                case ArgType::IntList: {
                    std::vector<int> xs;
                    std::stringstream ss(raw);
                    std::string cell;
                    while (std::getline(ss, cell, ',')) xs.push_back(std::stoi(cell));
                    opts[key] = xs;
                    break;
                }
            }
        }
        for (const auto& o : spec->opts) {
            if (o.required && !opts.contains(json_key(o.flag))) {
                std::cerr << "tumorsynth " << cmd << ": missing required flag --" << o.flag << "\n";
                return 3;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "tumorsynth " << cmd << ": bad flag value: " << e.what() << "\n";
        return 3;
    }

    char* summary = nullptr;
    const ts_status_t status = ts_run_command(cmd.c_str(), opts.dump().c_str(), &summary);
    if (status == TS_STATUS_OK) {
        if (summary) {
            std::cout << summary << "\n";
            ts_string_free(summary);
        }
        return 0;
    }
    std::cerr << "tumorsynth " << cmd << ": " << ts_last_error() << "\n";
    switch (status) {
        case TS_STATUS_CONFIG:
            return 3;
        case TS_STATUS_USAGE:
            return 2;
        default:
            return 1;  // runtime and I/O failures
    }
}
