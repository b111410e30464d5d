#ifndef CONVMASK_H
#define CONVMASK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CM_OK 0

#define CM_ERR_NULL_POINTER 1

#define CM_ERR_INVALID_ARGUMENT 2

#define CM_ERR_CONFIG 3

#define CM_ERR_DATA 4

#define CM_ERR_IO 5

#define CM_ERR_BUFFER_TOO_SMALL 6

#define CM_ERR_PANIC 7

/*
 A fitted pipeline loaded from a model bundle.
 */
typedef struct CmModel CmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message describing the last failure on this thread, or null. The pointer
 stays valid until the next `cm_*` call on the same thread.
 */
const char *cm_last_error(void);

/*
 Loads the model bundle in directory `dir` (UTF-8 path) into `*out`.

 # Safety
 `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
int32_t cm_model_load(const char *dir, struct CmModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from [`cm_model_load`] and not be used afterwards.
 */
void cm_model_free(struct CmModel *model);

/*
 Length of the real-valued global descriptor, or 0 for a null model.

 # Safety
 `model` must be null or a live handle.
 */
size_t cm_model_descriptor_dim(const struct CmModel *model);

/*
 Code length in bits, or 0 when the model has no hashing stage.

 # Safety
 `model` must be null or a live handle.
 */
size_t cm_model_code_bits(const struct CmModel *model);

/*
 Encodes one stacked feature tensor.

 `data` holds `width * height * channels` floats in row-major location
 order with channels innermost. `keypoints_xy` holds `n_keypoints` (x, y)
 pairs in image pixels and may be null when the model does not use the
 SIFT mask. The descriptor is written to `out_descriptor`
 (`descriptor_len` floats, at least [`cm_model_descriptor_dim`]). When
 `out_code` is not null the packed code is written there
 (`code_words` 64-bit words, bit `i` in word `i / 64`).

 # Safety
 All non-null pointers must be valid for the stated lengths.
 */
int32_t cm_encode_tensor(const struct CmModel *model,
                         const float *data,
                         size_t width,
                         size_t height,
                         size_t channels,
                         const float *keypoints_xy,
                         size_t n_keypoints,
                         uint32_t image_width,
                         uint32_t image_height,
                         float *out_descriptor,
                         size_t descriptor_len,
                         uint64_t *out_code,
                         size_t code_words);

/*
 Hamming distance between two codes of `words` 64-bit words.

 # Safety
 `a` and `b` must be valid for `words` reads.
 */
int32_t cm_hamming_distance(const uint64_t *a, const uint64_t *b, size_t words, uint32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONVMASK_H */
