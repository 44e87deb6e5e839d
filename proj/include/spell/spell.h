/* SPDX-License-Identifier: Apache-2.0 */
/*
 * C interface to the spell library: graph construction, training,
 * inference and evaluation for active speaker detection.
 *
 * Every function returns a spell_status. On failure, spell_last_error()
 * holds a one-line message for the calling thread until its next call.
 * Handles are opaque; free them with the matching *_free function
 * (passing NULL is allowed).
 */
#ifndef SPELL_SPELL_H
#define SPELL_SPELL_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define SPELL_API __declspec(dllexport)
#else
#define SPELL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum spell_status {
  SPELL_OK = 0,
  SPELL_ERR_ARGUMENT = 1,        /* NULL handle or pointer, bad option */
  SPELL_ERR_DIMENSION = 2,       /* shape mismatch */
  SPELL_ERR_STATE = 3,           /* call order violated */
  SPELL_ERR_VALIDATION = 4,      /* invalid values or configuration */
  SPELL_ERR_DEGENERATE_BATCH = 5, /* batch norm on fewer than two rows */
  SPELL_ERR_UNDEFINED_METRIC = 6, /* AP without positives */
  SPELL_ERR_NUMERIC = 7,         /* NaN or Inf during training */
  SPELL_ERR_IO = 8,              /* file cannot be opened or written */
  SPELL_ERR_FORMAT = 9,          /* malformed file contents */
  SPELL_ERR_INTERNAL = 10
} spell_status;

SPELL_API const char* spell_status_name(spell_status status);
SPELL_API const char* spell_last_error(void);
SPELL_API const char* spell_version(void);

typedef struct spell_dataset spell_dataset;
typedef struct spell_config spell_config;
typedef struct spell_model spell_model;

/* ---- datasets --------------------------------------------------------- */

/* Tracks joined with a feature store (index at "<features>.index.csv"). */
SPELL_API spell_status spell_dataset_load(const char* tracks_path,
                                          const char* features_path,
                                          spell_dataset** out);
/* Tracks only: enough for graph statistics. */
SPELL_API spell_status spell_dataset_load_tracks(const char* tracks_path,
                                                 spell_dataset** out);
SPELL_API spell_status spell_dataset_size(const spell_dataset* dataset,
                                          size_t* out);
SPELL_API void spell_dataset_free(spell_dataset* dataset);

typedef struct spell_graph_stats {
  size_t videos;
  size_t chunks;
  size_t nodes;
  size_t self_loops;
  size_t forward_edges;
  size_t backward_edges;
  size_t undirected_edges;
  size_t same_frame_edges;    /* undirected, excluding self-loops */
  size_t same_identity_edges; /* undirected, different frames */
} spell_graph_stats;

SPELL_API spell_status spell_graph_stats_compute(const spell_dataset* dataset,
                                                 size_t n, double tau,
                                                 spell_graph_stats* out);

/* ---- configuration ---------------------------------------------------- */

/* Defaults: lr_max 2e-4, 120 epochs, batch 16, tau 0.9, n 2000, ... */
SPELL_API spell_status spell_config_new(spell_config** out);
/* Flat "key = value" file, '#' comments, unknown keys rejected. */
SPELL_API spell_status spell_config_load(const char* path, spell_config** out);
SPELL_API spell_status spell_config_set(spell_config* config, const char* key,
                                        const char* value);
/* Copies the value as text into buf (NUL-terminated). SPELL_ERR_ARGUMENT
 * if buf is too small; *needed receives the required size when non-NULL. */
SPELL_API spell_status spell_config_get(const spell_config* config,
                                        const char* key, char* buf,
                                        size_t buf_len, size_t* needed);
SPELL_API spell_status spell_config_param_count(const spell_config* config,
                                                size_t* out);
SPELL_API void spell_config_free(spell_config* config);

/* ---- training and models ---------------------------------------------- */

/* val_ap is NaN when no validation set was given. */
typedef void (*spell_epoch_callback)(size_t epoch, double lr, double loss,
                                     double val_ap, void* user);

/* val may be NULL. callback may be NULL. */
SPELL_API spell_status spell_train(const spell_dataset* train,
                                   const spell_dataset* val,
                                   const spell_config* config,
                                   spell_epoch_callback callback, void* user,
                                   spell_model** out);

/* Per-epoch history of the training run as CSV (epoch,lr,loss,val_ap). */
SPELL_API spell_status spell_model_write_history(const spell_model* model,
                                                 const char* path);
SPELL_API spell_status spell_model_save(const spell_model* model,
                                        const char* path);
SPELL_API spell_status spell_model_load(const char* path, spell_model** out);
SPELL_API spell_status spell_model_param_count(const spell_model* model,
                                               size_t* out);
SPELL_API void spell_model_free(spell_model* model);

/* Scores every track row; n, tau and modality_mask come from config (NULL
 * for defaults). Writes video_id,time,entity_id,score in track order. */
SPELL_API spell_status spell_infer(const spell_model* model,
                                   const spell_dataset* dataset,
                                   const spell_config* config,
                                   const char* predictions_path);

/* Scores a labeled dataset in memory. */
SPELL_API spell_status spell_evaluate(const spell_model* model,
                                      const spell_dataset* dataset,
                                      const spell_config* config, double* ap);

/* AP of a predictions file against labeled tracks. report_path (may be
 * NULL) receives the global row plus one row per video. */
SPELL_API spell_status spell_eval_predictions(const char* predictions_path,
                                              const char* tracks_path,
                                              const char* report_path,
                                              double* ap);

/* ---- synthetic data --------------------------------------------------- */

/* Writes {train,val}.tracks.csv and {train,val}.features.bin (+ index). */
SPELL_API spell_status spell_synth_preset(const char* preset, uint64_t seed,
                                          const char* out_dir);
SPELL_API spell_status spell_synth_spec(const char* spec_path, uint64_t seed,
                                        const char* out_dir);

/* ---- experiments ------------------------------------------------------ */

/* rows: comma-separated subset of no_graph, undirected, bidir,
 * bidir_dropout, full, audio_only, video_only, both; NULL or "" for all. */
SPELL_API spell_status spell_ablate(const spell_dataset* train,
                                    const spell_dataset* val,
                                    const spell_config* config,
                                    const char* rows, const char* report_path);

/* axis: "tau", "n" or "filter_dim". */
SPELL_API spell_status spell_sweep(const spell_dataset* train,
                                   const spell_dataset* val,
                                   const spell_config* config,
                                   const char* axis, const double* values,
                                   size_t count, const char* report_path);

#ifdef __cplusplus
}
#endif

#endif /* SPELL_SPELL_H */
