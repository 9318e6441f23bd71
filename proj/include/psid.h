#ifndef PSID_H
#define PSID_H

/* C interface to the parameter identification library. All functions return
 * a psid_status; on any non-OK status psid_last_error() carries a message
 * for the calling thread. Pointers returned through accessors stay valid
 * until the owning handle is freed. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PSID_API __declspec(dllexport)
#else
#define PSID_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum psid_status {
    PSID_OK = 0,
    PSID_ERR_CONFIG = 1,  /* invalid configuration or arguments */
    PSID_ERR_NUMERIC = 2, /* singular network, divergence, instability */
    PSID_ERR_STUDY = 3,   /* study-level failure, e.g. infeasible perturbation */
    PSID_ERR_IO = 4,      /* file read/write failure */
    PSID_ERR_INVALID = 5  /* API misuse such as null handles */
} psid_status;

typedef struct psid_system psid_system;
typedef struct psid_traces psid_traces;

PSID_API const char* psid_version(void);

/* Message for the last failing call on this thread. */
PSID_API const char* psid_last_error(void);

/* path_or_builtin is a JSON file path or a builtin name ("ieee9",
 * "ieee9-base"). */
PSID_API psid_status psid_system_load(const char* path_or_builtin, psid_system** out);
PSID_API psid_status psid_system_from_json(const char* json_text, psid_system** out);
PSID_API void psid_system_free(psid_system* sys);
PSID_API psid_status psid_system_save(const psid_system* sys, const char* path);

/* Parameter paths look like "SM1.governor.k_t", "SM1.avr.k" or "SM1.x_d". */
PSID_API psid_status psid_system_get_param(const psid_system* sys, const char* path,
                                           double* out);
PSID_API psid_status psid_system_set_param(psid_system* sys, const char* path, double value);

/* scenario_json may be NULL for the system's default scenario (energization
 * events from the load list, all channels of every machine recorded). */
PSID_API psid_status psid_simulate(const psid_system* sys, const char* scenario_json,
                                   psid_traces** out);
PSID_API void psid_traces_free(psid_traces* traces);
PSID_API psid_status psid_traces_rows(const psid_traces* traces, size_t* out);
PSID_API psid_status psid_traces_cols(const psid_traces* traces, size_t* out);
PSID_API psid_status psid_traces_name(const psid_traces* traces, size_t col, const char** out);
PSID_API psid_status psid_traces_unit(const psid_traces* traces, size_t col, const char** out);
PSID_API psid_status psid_traces_time(const psid_traces* traces, const double** out);
PSID_API psid_status psid_traces_column(const psid_traces* traces, size_t col,
                                        const double** out);
PSID_API psid_status psid_traces_write_csv(const psid_traces* traces, const char* path);

/* Infinity norm of the state derivative at the initialized equilibrium. */
PSID_API psid_status psid_equilibrium_residual(const psid_system* sys, double* out);

/* Simulate noiselessly, then write one noisy channel record (CSV plus a
 * .meta.json sidecar). channel is "quantity@machine", e.g. "omega_m@SM1". */
PSID_API psid_status psid_measure_file(const psid_system* sys, const char* scenario_json,
                                       const char* channel, double snr_db, uint64_t seed,
                                       const char* out_csv);

/* Config-driven runners behind the CLI subcommands. config_path names a
 * study config JSON file (NULL falls back to builtin defaults where the
 * operation permits); overrides_json is an optional JSON merge patch applied
 * on top, e.g. "{\"seed\":7,\"trials\":30,\"workers\":8}". */
PSID_API psid_status psid_simulate_run(const char* config_path, const char* overrides_json,
                                       const char* out_csv_path);
PSID_API psid_status psid_measure_run(const char* config_path, const char* overrides_json,
                                      const char* out_csv_path);
PSID_API psid_status psid_fim_run(const char* config_path, const char* overrides_json,
                                  const char* out_json_path);
PSID_API psid_status psid_fit_run(const char* config_path, const char* overrides_json,
                                  const char* out_json_path);
PSID_API psid_status psid_select_run(const char* config_path, const char* overrides_json,
                                     const char* out_json_path);
PSID_API psid_status psid_study_run(const char* config_path, const char* overrides_json,
                                    const char* out_dir);
PSID_API psid_status psid_sweep_run(const char* config_path, const char* overrides_json,
                                    const char* out_csv_path);

#ifdef __cplusplus
}
#endif

#endif /* PSID_H */
