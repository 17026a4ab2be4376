#ifndef FALLDET_FALLDET_H
#define FALLDET_FALLDET_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FD_API __declspec(dllexport)
#else
#define FD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as process exit codes. */
typedef enum fd_status {
  FD_OK = 0,
  FD_ERR_INTERNAL = 1,
  FD_ERR_CONFIG = 2,
  FD_ERR_DATA = 3,
  FD_ERR_TRAINING = 4
} fd_status;

typedef struct fd_model fd_model;

typedef void (*fd_log_fn)(const char* line, void* user);

typedef struct fd_metrics {
  double precision;
  double recall;
  double f1;
  double accuracy;
  double fall_precision;
  double fall_recall;
  double fall_f1;
  size_t tp, fp, tn, fn;
} fd_metrics;

FD_API const char* fd_version(void);
/* Category name of a status: "ok", "internal", "config", "data", "training". */
FD_API const char* fd_status_name(fd_status status);
/* Message of the last failed call on this thread; empty after a success. */
FD_API const char* fd_last_error(void);

/* Runs a command from a JSON run configuration (or a run manifest).
   Progress lines go to log when it is non-null. */
FD_API fd_status fd_run(const char* config_json, fd_log_fn log, void* user);
/* Writes the fully resolved configuration as JSON into buf (NUL-terminated).
   *needed receives the required size including the terminator. */
FD_API fd_status fd_resolve_config(const char* config_json, char* buf, size_t size, size_t* needed);

FD_API fd_status fd_model_create(const char* variant, size_t window, uint64_t seed, fd_model** out);
FD_API fd_status fd_model_load(const char* path, fd_model** out);
FD_API fd_status fd_model_save(const fd_model* model, const char* path);
FD_API void fd_model_free(fd_model* model);
FD_API size_t fd_model_param_count(const fd_model* model);
FD_API size_t fd_model_window(const fd_model* model);
/* Analytic FLOPs of one window of the given length. */
FD_API fd_status fd_model_flops(const fd_model* model, size_t steps, uint64_t* out);
/* acc and gyro hold n windows of steps x 4 doubles (x, y, z, magnitude),
   row-major. Writes n fall probabilities. */
FD_API fd_status fd_model_predict(fd_model* model, const double* acc, const double* gyro, size_t n, size_t steps,
                                  double* probs);

FD_API fd_status fd_metrics_compute(const double* probs, const int* labels, size_t n, double threshold,
                                    fd_metrics* out);
FD_API fd_status fd_class_weights(const int* labels, size_t n, double* w0, double* w1);

#ifdef __cplusplus
}
#endif

#endif
