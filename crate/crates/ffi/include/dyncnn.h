/* C API for the dyncnn inference engine.
 *
 * All functions returning int32_t use these status codes:
 *   0  success
 *   1  internal error
 *   2  configuration / checkpoint-compatibility error
 *   3  data / file error
 *   4  numeric failure
 *   5  invalid argument (NULL pointer, bad length, bad enum value)
 *
 * On failure, dyncnn_last_error() returns a human-readable message for the
 * calling thread, valid until the next failing call on that thread.
 */

#ifndef DYNCNN_H
#define DYNCNN_H

#include <stdint.h>
#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
    DYNCNN_OK = 0,
    DYNCNN_ERR = 1,
    DYNCNN_ERR_CONFIG = 2,
    DYNCNN_ERR_DATA = 3,
    DYNCNN_ERR_NUMERIC = 4,
    DYNCNN_ERR_ARGUMENT = 5,
};

/* Execution / FLOPs-accounting mode. */
enum {
    DYNCNN_PLACEMENT_DENSE = 0,
    DYNCNN_PLACEMENT_PARALLEL = 1,
    DYNCNN_PLACEMENT_SEQUENTIAL = 2,
};

/* Opaque model handle. */
typedef struct DyncnnModel DyncnnModel;

/* Last error message for this thread; empty string if none. */
const char *dyncnn_last_error(void);

/* Load a checkpoint file into *out. Caller frees with dyncnn_model_free. */
int32_t dyncnn_model_load(const char *path, DyncnnModel **out);

/* Release a handle. NULL is a no-op. */
void dyncnn_model_free(DyncnnModel *model);

/* Number of output classes, or -1 on NULL. */
int32_t dyncnn_model_classes(const DyncnnModel *model);

/* Expected input length in floats (channels * height * width), -1 on NULL. */
int64_t dyncnn_model_input_len(const DyncnnModel *model);

/* Classify one image.
 *
 * pixels: channel-major floats in [0,1], length dyncnn_model_input_len().
 * placement: one of the DYNCNN_PLACEMENT_* values.
 * label_out: receives the predicted class index.
 * flops_out: optional (may be NULL); receives the per-instance FLOPs under
 *            the chosen placement.
 */
int32_t dyncnn_predict(const DyncnnModel *model,
                       const float *pixels,
                       size_t len,
                       int32_t placement,
                       int32_t *label_out,
                       uint64_t *flops_out);

#ifdef __cplusplus
}
#endif

#endif /* DYNCNN_H */
