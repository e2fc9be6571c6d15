#ifndef IGPROBE_H
#define IGPROBE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes; additions keep existing values stable.
 */
typedef enum IgpStatus {
  IgpOk = 0,
  IgpLoadError = 1,
  IgpCapabilityError = 2,
  IgpPromptStructureError = 3,
  IgpMultiTokenTarget = 4,
  IgpBoundsError = 5,
  IgpDegenerateMap = 6,
  IgpInvalidArgument = 7,
  IgpCapacityError = 8,
  IgpShapeMismatch = 9,
  IgpIoError = 10,
  IgpFormatError = 11,
  IgpNullPointer = 12,
  IgpInvalidUtf8 = 13,
  IgpPanic = 14,
} IgpStatus;

/**
 * Opaque attribution result.
 */
typedef struct IgpAttribution IgpAttribution;

/**
 * Opaque loaded model.
 */
typedef struct IgpModel IgpModel;

/**
 * Opaque neuron set: parallel member arrays in (layer, index) order.
 */
typedef struct IgpNeuronSet IgpNeuronSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *igp_version(void);

/**
 * Message of the last failure on this thread. Valid until the next failing
 * call on the same thread; never NULL.
 */
const char *igp_last_error_message(void);

/**
 * Load a model from a checkpoint directory or toy spec file.
 * Returns NULL on failure.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string or NULL; `status` must be
 * NULL or writable.
 */
struct IgpModel *igp_model_load(const char *path, enum IgpStatus *status);

/**
 * # Safety
 * `model` must come from [`igp_model_load`] and not be freed twice.
 */
void igp_model_free(struct IgpModel *model);

/**
 * # Safety
 * `model` must be NULL or a live handle from [`igp_model_load`].
 */
size_t igp_model_layer_count(const struct IgpModel *model);

/**
 * # Safety
 * `model` must be NULL or a live handle from [`igp_model_load`].
 */
size_t igp_model_intermediate_dim(const struct IgpModel *model);

/**
 * # Safety
 * `model` must be NULL or a live handle from [`igp_model_load`].
 */
size_t igp_model_vocab_size(const struct IgpModel *model);

/**
 * Integrated-gradients attribution of `target` over a masked prompt.
 * Returns NULL on failure.
 *
 * # Safety
 * `model` must be a live handle; `prompt` and `target` must be valid
 * NUL-terminated strings or NULL; `status` must be NULL or writable.
 */
struct IgpAttribution *igp_attribute(const struct IgpModel *model,
                                     const char *prompt,
                                     const char *target,
                                     size_t steps,
                                     bool normalize,
                                     enum IgpStatus *status);

/**
 * # Safety
 * `attribution` must come from [`igp_attribute`] and not be freed twice.
 */
void igp_attribution_free(struct IgpAttribution *attribution);

/**
 * # Safety
 * `attribution` must be NULL or a live handle from [`igp_attribute`].
 */
size_t igp_attribution_layer_count(const struct IgpAttribution *attribution);

/**
 * # Safety
 * `attribution` must be NULL or a live handle from [`igp_attribute`].
 */
size_t igp_attribution_intermediate_dim(const struct IgpAttribution *attribution);

/**
 * Row-major `layer_count x intermediate_dim` score buffer, owned by the
 * attribution handle.
 *
 * # Safety
 * `attribution` must be NULL or a live handle; the buffer is valid only
 * while the handle lives.
 */
const double *igp_attribution_scores(const struct IgpAttribution *attribution);

/**
 * Neurons with score strictly above `t` (`t >= 0`). Returns NULL on failure.
 *
 * # Safety
 * `attribution` must be NULL or a live handle; `status` NULL or writable.
 */
struct IgpNeuronSet *igp_select_coarse(const struct IgpAttribution *attribution,
                                       double t,
                                       enum IgpStatus *status);

/**
 * Neurons at or above `fraction` of the map maximum. Returns NULL on failure.
 *
 * # Safety
 * `attribution` must be NULL or a live handle; `status` NULL or writable.
 */
struct IgpNeuronSet *igp_select_adaptive(const struct IgpAttribution *attribution,
                                         double fraction,
                                         enum IgpStatus *status);

/**
 * # Safety
 * `set` must be NULL or a live handle from a select call.
 */
size_t igp_neuron_set_len(const struct IgpNeuronSet *set);

/**
 * Fetch member `i` (in (layer, index) order) into the out-parameters.
 *
 * # Safety
 * `set` must be NULL or a live handle; out-parameters must be NULL or
 * writable.
 */
enum IgpStatus igp_neuron_set_member(const struct IgpNeuronSet *set,
                                     size_t i,
                                     size_t *layer,
                                     size_t *index,
                                     uint32_t *support);

/**
 * # Safety
 * `set` must come from a select call and not be freed twice.
 */
void igp_neuron_set_free(struct IgpNeuronSet *set);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* IGPROBE_H */
