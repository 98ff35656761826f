#ifndef SHEATH_H
#define SHEATH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SheathStatus {
  SHEATH_STATUS_OK = 0,
  SHEATH_STATUS_NULL_ARGUMENT = 1,
  SHEATH_STATUS_INVALID_ARGUMENT = 2,
  SHEATH_STATUS_SHAPE = 3,
  SHEATH_STATUS_NUMERIC = 4,
  SHEATH_STATUS_FORMAT = 5,
  SHEATH_STATUS_CONFIG = 6,
  SHEATH_STATUS_IO = 7,
  SHEATH_STATUS_PANIC = 8,
} SheathStatus;

/*
 Noise families accepted by `sheath_apply_noise`.
 */
typedef enum SheathNoiseKind {
  SHEATH_NOISE_KIND_GAUSSIAN_MASKED = 0,
  SHEATH_NOISE_KIND_POLARITY_SWITCH = 1,
} SheathNoiseKind;

/*
 A parsed experiment config.
 */
typedef struct SheathConfig SheathConfig;

/*
 A calibrated partial copy of one layer plus its comparator.
 */
typedef struct SheathDetector SheathDetector;

/*
 A trained or freshly initialised network.
 */
typedef struct SheathModel SheathModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *sheath_version(void);

/*
 Message for the last failed call on this thread, or NULL after a
 success. Valid until the next call into the library on this thread.
 */
const char *sheath_last_error(void);

/*
 Releases a string returned by the library. NULL is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void sheath_string_free(char *s);

/*
 Builds `arch` ("edgecnn", "lenet5", "minivggnet") with seeded random
 weights and its default input shape.

 # Safety
 `arch` must be a NUL-terminated string; `model` must be writable.
 */
enum SheathStatus sheath_model_new(const char *arch, uint64_t seed, struct SheathModel **model);

/*
 Loads a weight file written by `sheath train`.

 # Safety
 `path` must be a NUL-terminated string; `model` must be writable.
 */
enum SheathStatus sheath_model_load(const char *path, struct SheathModel **model);

/*
 # Safety
 `model` must come from this library and not have been freed. NULL is
 ignored.
 */
void sheath_model_free(struct SheathModel *model);

/*
 Number of values in one input image.

 # Safety
 `model` must be a live handle; `len` must be writable.
 */
enum SheathStatus sheath_model_input_len(const struct SheathModel *model, size_t *len);

/*
 Number of output classes.

 # Safety
 `model` must be a live handle; `len` must be writable.
 */
enum SheathStatus sheath_model_output_len(const struct SheathModel *model, size_t *len);

/*
 Class probabilities for one image laid out channel-major.

 # Safety
 `input` must hold `input_len` values and `output` room for `output_len`.
 */
enum SheathStatus sheath_model_forward(const struct SheathModel *model,
                                       const double *input,
                                       size_t input_len,
                                       double *output,
                                       size_t output_len);

/*
 Index of the most probable class.

 # Safety
 `input` must hold `input_len` values; `class` must be writable.
 */
enum SheathStatus sheath_model_predict(const struct SheathModel *model,
                                       const double *input,
                                       size_t input_len,
                                       size_t *class_);

/*
 Value counts of `layer`'s input and output maps.

 # Safety
 `model` must be a live handle; `layer` a NUL-terminated string; both
 outputs must be writable.
 */
enum SheathStatus sheath_model_layer_lens(const struct SheathModel *model,
                                          const char *layer,
                                          size_t *input_len,
                                          size_t *output_len);

/*
 The clean input and output maps of `layer` for one image: what the
 layer's node receives and what it sends on.

 # Safety
 `image` must hold `image_len` values; `input_map` and `output_map` must
 have room for the lengths given by `sheath_model_layer_lens`.
 */
enum SheathStatus sheath_model_layer_maps(const struct SheathModel *model,
                                          const char *layer,
                                          const double *image,
                                          size_t image_len,
                                          double *input_map,
                                          size_t input_len,
                                          double *output_map,
                                          size_t output_len);

/*
 Perturbs a feature map in place; mean and spread of the Gaussian are
 taken from the map itself. `sp` is ignored for polarity switching.

 # Safety
 `data` must hold `len` values.
 */
enum SheathStatus sheath_apply_noise(enum SheathNoiseKind kind,
                                     double np,
                                     double sp,
                                     uint64_t seed,
                                     double *data,
                                     size_t len);

/*
 Copies the first `p` filters of `layer` and calibrates the comparator on
 `n_images` clean images stored back to back.

 # Safety
 `images` must hold `n_images * input_len` values; `detector` must be
 writable.
 */
enum SheathStatus sheath_detector_new(const struct SheathModel *model,
                                      const char *layer,
                                      size_t p,
                                      const double *images,
                                      size_t n_images,
                                      double epsilon_floor,
                                      struct SheathDetector **detector);

/*
 # Safety
 `detector` must come from this library and not have been freed. NULL is
 ignored.
 */
void sheath_detector_free(struct SheathDetector *detector);

/*
 Value counts of the guarded layer's input and output maps.

 # Safety
 `detector` must be a live handle; both outputs must be writable.
 */
enum SheathStatus sheath_detector_lens(const struct SheathDetector *detector,
                                       size_t *input_len,
                                       size_t *output_len);

/*
 Comparator MSE of a received message against the copy's recomputation
 from the message's upstream input, and whether it exceeds the threshold.

 # Safety
 `payload` and `upstream` must hold the lengths reported by
 `sheath_detector_lens`; `mse` and `flagged` must be writable.
 */
enum SheathStatus sheath_detector_score(const struct SheathDetector *detector,
                                        const double *payload,
                                        size_t payload_len,
                                        const double *upstream,
                                        size_t upstream_len,
                                        double *mse,
                                        bool *flagged);

/*
 Comparator threshold fixed at calibration.

 # Safety
 `detector` must be a live handle; `threshold` must be writable.
 */
enum SheathStatus sheath_detector_threshold(const struct SheathDetector *detector,
                                            double *threshold);

/*
 Parses and validates a TOML experiment config.

 # Safety
 `path` must be a NUL-terminated string; `config` must be writable.
 */
enum SheathStatus sheath_config_load(const char *path, struct SheathConfig **config);

/*
 # Safety
 `config` must come from this library and not have been freed. NULL is
 ignored.
 */
void sheath_config_free(struct SheathConfig *config);

/*
 Redirects the config's outputs (weights, guards, reports) to `dir`.

 # Safety
 `config` must be a live handle; `dir` a NUL-terminated string.
 */
enum SheathStatus sheath_config_set_out_dir(struct SheathConfig *config, const char *dir);

/*
 Trains the configured model; `test_accuracy` may be NULL.

 # Safety
 `config` must be a live handle.
 */
enum SheathStatus sheath_train(const struct SheathConfig *config, double *test_accuracy);

/*
 Calibrates the configured guards and fits their recover models.

 # Safety
 `config` must be a live handle.
 */
enum SheathStatus sheath_fit(const struct SheathConfig *config);

/*
 Runs a scenario ("detect", "recover", "sweep", "multinode", "stealth",
 "overhead") and returns its report as JSON in `report`, to be released
 with `sheath_string_free`. `violations` receives the number of config
 bounds the report breaks and may be NULL.

 # Safety
 `config` must be a live handle; `scenario` a NUL-terminated string;
 `report` must be writable.
 */
enum SheathStatus sheath_run(const struct SheathConfig *config,
                             const char *scenario,
                             char **report,
                             size_t *violations);

/*
 Loads the trained model a config points at.

 # Safety
 `config` must be a live handle; `model` must be writable.
 */
enum SheathStatus sheath_config_model(const struct SheathConfig *config,
                                      struct SheathModel **model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHEATH_H */
