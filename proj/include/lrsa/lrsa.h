#ifndef LRSA_LRSA_H
#define LRSA_LRSA_H

/*
 * C interface to the LRSA neural-operator laboratory.
 *
 * Every function returns an lrsa_status. On failure the message of the most
 * recent error on the calling thread is available from lrsa_last_error().
 * Strings returned through char** out-parameters are heap allocated and must
 * be released with lrsa_string_free(). Handles are released with their
 * matching *_destroy function; passing NULL to a destroy function is a no-op.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define LRSA_API __declspec(dllexport)
#else
#define LRSA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum lrsa_status {
  LRSA_OK = 0,
  LRSA_ERR_INVALID_ARGUMENT = 1, /* NULL handle or out-pointer */
  LRSA_ERR_USAGE = 2,            /* malformed options or configuration */
  LRSA_ERR_DIMENSION = 3,
  LRSA_ERR_CONTRACT = 4,
  LRSA_ERR_DOMAIN = 5,
  LRSA_ERR_LOOKUP = 6,
  LRSA_ERR_IO = 7,
  LRSA_ERR_LOAD = 8,
  LRSA_ERR_RESOURCE = 9,
  LRSA_ERR_CONVERGENCE = 10,
  LRSA_ERR_SOLVER = 11,
  LRSA_ERR_TRAINING = 12,
  LRSA_ERR_INTERNAL = 13
} lrsa_status;

typedef struct lrsa_dataset lrsa_dataset;
typedef struct lrsa_model lrsa_model;

LRSA_API const char* lrsa_version(void);
LRSA_API const char* lrsa_status_name(lrsa_status status);
/* Message of the last failure on this thread; empty string if none. */
LRSA_API const char* lrsa_last_error(void);
LRSA_API void lrsa_string_free(char* s);

/* Parses key=value configuration text (NULL or "" for defaults) and returns
 * the resolved model and training settings as JSON. */
LRSA_API lrsa_status lrsa_config_resolve(const char* config_text, char** out_json);

/* ---- datasets ---------------------------------------------------------- */

/* task: "poisson1d", "darcy2d" or "advection1d". */
LRSA_API lrsa_status lrsa_dataset_generate(const char* task, size_t count, size_t n,
                                           uint64_t seed, lrsa_dataset** out);
LRSA_API lrsa_status lrsa_dataset_load(const char* dir, lrsa_dataset** out);
LRSA_API lrsa_status lrsa_dataset_save(const lrsa_dataset* ds, const char* dir);
LRSA_API lrsa_status lrsa_dataset_summary_json(const lrsa_dataset* ds, char** out_json);
LRSA_API void lrsa_dataset_destroy(lrsa_dataset* ds);

/* ---- models ------------------------------------------------------------ */

/* config_text: key=value lines (NULL or "" for defaults). The model is
 * initialised from the config's seed. */
LRSA_API lrsa_status lrsa_model_create(const char* config_text, lrsa_model** out);
LRSA_API lrsa_status lrsa_model_load(const char* checkpoint_dir, lrsa_model** out);
LRSA_API lrsa_status lrsa_model_save(const lrsa_model* model, const char* checkpoint_dir);
LRSA_API lrsa_status lrsa_model_config_json(const lrsa_model* model, char** out_json);
LRSA_API lrsa_status lrsa_model_parameter_count(const lrsa_model* model, size_t* out);
LRSA_API void lrsa_model_destroy(lrsa_model* model);

/* ---- workflows --------------------------------------------------------- */

/* Trains on the dataset's training split. out_dir may be NULL; otherwise
 * history.csv and checkpoint/ are written there. out_model and
 * out_summary_json may each be NULL. */
LRSA_API lrsa_status lrsa_train(const char* config_text, const lrsa_dataset* ds,
                                const char* out_dir, lrsa_model** out_model,
                                char** out_summary_json);

/* split: "train", "test" or "all". Metrics JSON: rel_l2, mse, lg (darcy2d). */
LRSA_API lrsa_status lrsa_evaluate(const lrsa_model* model, const lrsa_dataset* ds,
                                   const char* split, char** out_json);

/* Spectral report of the 1-D Poisson Green's kernel; csv_path may be NULL. */
LRSA_API lrsa_status lrsa_analyze_green1d(size_t n, const char* csv_path, char** out_json);

/* Induced kernel of block `layer` on an n-per-axis interior grid. */
LRSA_API lrsa_status lrsa_analyze_model_kernel(const lrsa_model* model, size_t n, uint64_t seed,
                                               size_t layer, size_t out_channel,
                                               size_t in_channel, const char* csv_path,
                                               char** out_json);

/* config_text NULL or "" selects a small default configuration. */
LRSA_API lrsa_status lrsa_gradcheck(const char* config_text, uint64_t seed, size_t points,
                                    char** out_json);

/* FLOP counts and timings of one block over a grid of point counts. */
LRSA_API lrsa_status lrsa_bench(const char* config_text, const size_t* n_grid, size_t n_count,
                                size_t latents, size_t repeat, char** out_json);

#ifdef __cplusplus
}
#endif

#endif /* LRSA_LRSA_H */
