/* tumorsynth public C API.
 *
 * The core pipeline (phantom generation, VQ autoencoder, mask-conditioned
 * latent diffusion, procedural tumor masks, synthesis, segmentation,
 * feature analysis) lives in a C++ library; this header is the stable
 * extern-C surface over it. All functions return ts_status_t; on failure
 * ts_last_error() describes what went wrong (thread-local).
 *
 * Pipeline commands take one JSON string of options (the same schema the
 * CLI resolves its flags into); unknown keys are rejected with
 * TS_STATUS_CONFIG.
 */
#ifndef TUMORSYNTH_H
#define TUMORSYNTH_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ts_status_t {
    TS_STATUS_OK = 0,
    TS_STATUS_RUNTIME = 1, /* execution failed */
    TS_STATUS_USAGE = 2,   /* unknown command / bad call */
    TS_STATUS_CONFIG = 3,  /* invalid options or config */
    TS_STATUS_IO = 4       /* file missing/malformed/unwritable */
} ts_status_t;

const char* ts_version(void);

/* Message for the most recent failure on this thread; empty string if none. */
const char* ts_last_error(void);

/* ---- pipeline commands ----
 * command is one of: phantom-gen, preprocess, train-ae, train-diff,
 * maskgen, synth, train-seg, eval, ablate-timesteps, ablate-annotations,
 * features, origin-study.
 * summary_json (optional) receives a malloc'd JSON summary; free with
 * ts_string_free.
 */
ts_status_t ts_run_command(const char* command, const char* options_json, char** summary_json);
void ts_string_free(char* s);

/* ---- volumes (opaque handles) ---- */
typedef struct ts_volume ts_volume;

/* NIfTI-1, plain or gzip-compressed. */
ts_status_t ts_volume_load(const char* path, ts_volume** out);
ts_status_t ts_volume_save(const ts_volume* v, const char* path);
/* shape: voxels per axis; spacing: mm per axis; data: row-major, may be NULL (zeros). */
ts_status_t ts_volume_create(const int shape[3], const double spacing[3], const float* data, ts_volume** out);
void ts_volume_free(ts_volume* v);

ts_status_t ts_volume_shape(const ts_volume* v, int out_shape[3]);
ts_status_t ts_volume_spacing(const ts_volume* v, double out_spacing[3]);
/* Borrowed pointer, valid while the handle lives. */
const float* ts_volume_data(const ts_volume* v);

/* ---- segmentation metrics on binary volumes (values must be 0/1) ---- */
ts_status_t ts_metric_dsc(const ts_volume* pred, const ts_volume* gt, double* out);
ts_status_t ts_metric_nsd(const ts_volume* pred, const ts_volume* gt, double tau_mm, double* out);
ts_status_t ts_metric_tumor_sensitivity(const ts_volume* pred, const ts_volume* gt, double min_overlap_fraction,
                                        double* out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* TUMORSYNTH_H */
