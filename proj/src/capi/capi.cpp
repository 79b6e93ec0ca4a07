#include "tumorsynth/tumorsynth.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "common/error.hpp"
#include "pipeline/commands.hpp"
#include "pipeline/dataset.hpp"
#include "seg/metrics.hpp"
#include "volcore/volume.hpp"

using namespace tsyn;

struct ts_volume {
    vol::Volume v;
};

namespace {

thread_local std::string g_last_error;

ts_status_t status_of(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::Config:
            return TS_STATUS_CONFIG;
        case ErrorKind::Io:
            return TS_STATUS_IO;
        default:
            return TS_STATUS_RUNTIME;
    }
}

template <typename F>
ts_status_t guarded(F&& f) {
    try {
        f();
        g_last_error.clear();
        return TS_STATUS_OK;
    } catch (const Error& e) {
        g_last_error = e.what();
        return status_of(e);
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return TS_STATUS_RUNTIME;
    }
}

vol::VoxelMask as_mask(const vol::Volume& v, const char* what) {
    vol::VoxelMask m(v.shape, v.spacing);
    for (size_t i = 0; i < v.data.size(); ++i) {
        const float x = v.data[i];
        require(x == 0.0f || x == 1.0f, ErrorKind::Runtime, std::string(what) + ": values must be 0/1");
        m.data[i] = x != 0.0f ? 1 : 0;
    }
    return m;
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out) std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

}  // namespace

extern "C" {

const char* ts_version(void) {
    static const std::string v = pipe::tool_version();
    return v.c_str();
}

const char* ts_last_error(void) { return g_last_error.c_str(); }

ts_status_t ts_run_command(const char* command, const char* options_json, char** summary_json) {
    if (!command || !options_json) {
        g_last_error = "ts_run_command: command and options_json must be non-null";
        return TS_STATUS_USAGE;
    }
    if (!pipe::is_known_command(command)) {
        g_last_error = std::string("unknown command: ") + command;
        return TS_STATUS_USAGE;
    }
    return guarded([&] {
        json opts;
        try {
            opts = json::parse(options_json);
        } catch (const json::exception& e) {
            fail_config(std::string("options are not valid JSON: ") + e.what());
        }
        json summary = pipe::run_command(command, opts);
        if (summary_json) *summary_json = dup_string(summary.dump(2));
    });
}

void ts_string_free(char* s) { std::free(s); }

ts_status_t ts_volume_load(const char* path, ts_volume** out) {
    if (!path || !out) {
        g_last_error = "ts_volume_load: null argument";
        return TS_STATUS_USAGE;
    }
    return guarded([&] { *out = new ts_volume{vol::load_volume(path)}; });
}

ts_status_t ts_volume_save(const ts_volume* v, const char* path) {
    if (!v || !path) {
        g_last_error = "ts_volume_save: null argument";
        return TS_STATUS_USAGE;
    }
    return guarded([&] { vol::save_volume(v->v, path); });
}

ts_status_t ts_volume_create(const int shape[3], const double spacing[3], const float* data, ts_volume** out) {
    if (!shape || !spacing || !out) {
        g_last_error = "ts_volume_create: null argument";
        return TS_STATUS_USAGE;
    }
    return guarded([&] {
        for (int a = 0; a < 3; ++a) {
            require(shape[a] >= 1, ErrorKind::Config, "ts_volume_create: shape components must be >= 1");
            require(spacing[a] > 0, ErrorKind::Config, "ts_volume_create: spacing must be > 0");
        }
        vol::Volume v({shape[0], shape[1], shape[2]}, {spacing[0], spacing[1], spacing[2]});
        if (data) std::copy(data, data + v.voxels(), v.data.begin());
        *out = new ts_volume{std::move(v)};
    });
}

void ts_volume_free(ts_volume* v) { delete v; }

ts_status_t ts_volume_shape(const ts_volume* v, int out_shape[3]) {
    if (!v || !out_shape) {
        g_last_error = "ts_volume_shape: null argument";
        return TS_STATUS_USAGE;
    }
    for (int a = 0; a < 3; ++a) out_shape[a] = v->v.shape[a];
    return TS_STATUS_OK;
}

ts_status_t ts_volume_spacing(const ts_volume* v, double out_spacing[3]) {
    if (!v || !out_spacing) {
        g_last_error = "ts_volume_spacing: null argument";
        return TS_STATUS_USAGE;
    }
    for (int a = 0; a < 3; ++a) out_spacing[a] = v->v.spacing[a];
    return TS_STATUS_OK;
}

const float* ts_volume_data(const ts_volume* v) { return v ? v->v.data.data() : nullptr; }

ts_status_t ts_metric_dsc(const ts_volume* pred, const ts_volume* gt, double* out) {
    if (!pred || !gt || !out) {
        g_last_error = "ts_metric_dsc: null argument";
        return TS_STATUS_USAGE;
    }
    return guarded([&] { *out = seg::dsc(as_mask(pred->v, "pred"), as_mask(gt->v, "gt")); });
}

ts_status_t ts_metric_nsd(const ts_volume* pred, const ts_volume* gt, double tau_mm, double* out) {
    if (!pred || !gt || !out) {
        g_last_error = "ts_metric_nsd: null argument";
        return TS_STATUS_USAGE;
    }
    return guarded([&] { *out = seg::nsd(as_mask(pred->v, "pred"), as_mask(gt->v, "gt"), tau_mm); });
}

ts_status_t ts_metric_tumor_sensitivity(const ts_volume* pred, const ts_volume* gt, double min_overlap_fraction,
                                        double* out) {
    if (!pred || !gt || !out) {
        g_last_error = "ts_metric_tumor_sensitivity: null argument";
        return TS_STATUS_USAGE;
    }
    return guarded([&] {
        *out = seg::tumor_sensitivity(as_mask(pred->v, "pred"), as_mask(gt->v, "gt"), min_overlap_fraction)
                   .sensitivity;
    });
}

}  // extern "C"
