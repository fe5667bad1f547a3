/* C interface to the fedkws federated keyword-spotting simulator. */

#ifndef FEDKWS_H
#define FEDKWS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of every call. Anything but Ok leaves a message for
 * fk_last_error on the calling thread.
 */
typedef enum FkStatus {
  FK_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  FK_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  FK_STATUS_INVALID_UTF8 = 2,
  /**
   * Rejected configuration value or key.
   */
  FK_STATUS_CONFIG = 3,
  /**
   * Tensor or parameter geometry mismatch.
   */
  FK_STATUS_SHAPE = 4,
  /**
   * Value outside an operation's domain.
   */
  FK_STATUS_DOMAIN = 5,
  /**
   * Operation called out of order.
   */
  FK_STATUS_STATE = 6,
  /**
   * Malformed on-disk data.
   */
  FK_STATUS_FORMAT = 7,
  /**
   * A run could not proceed.
   */
  FK_STATUS_EXPERIMENT = 8,
  /**
   * Underlying file-system failure.
   */
  FK_STATUS_IO = 9,
  /**
   * The library panicked; state may be inconsistent.
   */
  FK_STATUS_PANIC = 10,
} FkStatus;

/**
 * Opaque dataset handle; create with fk_dataset_generate or
 * fk_dataset_load, release with fk_dataset_free.
 */
typedef struct FkDataset FkDataset;

/**
 * Opaque run-configuration handle; create with fk_config_parse or
 * fk_config_load, release with fk_config_free.
 */
typedef struct FkRunConfig FkRunConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `cap` > 0) and returns the full message
 * length in bytes, excluding the terminator. Call with a null `buf` or
 * zero `cap` to size a buffer.
 */
size_t fk_last_error(char *buf, size_t cap);

/**
 * Generates a synthetic spectrogram dataset; see the dataset generator's
 * contract for parameter meanings.
 */
enum FkStatus fk_dataset_generate(size_t n_per_class,
                                  size_t n_classes,
                                  size_t n_mels,
                                  size_t n_frames,
                                  double noise_sigma,
                                  uint64_t seed,
                                  struct FkDataset **out);

/**
 * Loads a dataset file written by fk_dataset_save or the CLI.
 */
enum FkStatus fk_dataset_load(const char *path, struct FkDataset **out);

/**
 * Writes the dataset to `path` in the binary dataset format.
 */
enum FkStatus fk_dataset_save(const struct FkDataset *ds, const char *path);

/**
 * Reports example count, class count, and feature geometry.
 */
enum FkStatus fk_dataset_info(const struct FkDataset *ds,
                              size_t *out_len,
                              size_t *out_classes,
                              size_t *out_mels,
                              size_t *out_frames);

/**
 * Releases a dataset handle. Null is a no-op.
 */
void fk_dataset_free(struct FkDataset *ds);

/**
 * Parses run-configuration text (same `key = value` format as config
 * files) into a handle.
 */
enum FkStatus fk_config_parse(const char *text, struct FkRunConfig **out);

/**
 * Reads and parses a configuration file.
 */
enum FkStatus fk_config_load(const char *path, struct FkRunConfig **out);

/**
 * Releases a configuration handle. Null is a no-op.
 */
void fk_config_free(struct FkRunConfig *cfg);

/**
 * Runs the configured experiment: loads the dataset named by the config,
 * holds out the evaluation split, trains, and writes the round CSV. On
 * success stores the final test accuracy in `out_final_accuracy`.
 */
enum FkStatus fk_run(const struct FkRunConfig *cfg, double *out_final_accuracy);

/**
 * Relative false-reject rate of the test scores against the baseline
 * scores at the given false-accept target. Scores are split into positive
 * and negative arrays per set.
 */
enum FkStatus fk_relative_frr(const double *test_pos,
                              size_t n_test_pos,
                              const double *test_neg,
                              size_t n_test_neg,
                              const double *base_pos,
                              size_t n_base_pos,
                              const double *base_neg,
                              size_t n_base_neg,
                              double far_target,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDKWS_H */
