#ifndef PREFIXGEN_H
#define PREFIXGEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Rows in a condition prefix (pocket plus the five scalar properties).
 */
#define PG_CONDITION_ROWS 6

/**
 * Scalar properties, in order: vina, qed, sa, logp, lipinski.
 */
#define PG_PROPERTY_COUNT 5

/**
 * Result of every fallible call. Anything other than Ok leaves a
 * description in `pg_last_error`.
 */
typedef enum PgStatus {
  PG_STATUS_OK = 0,
  PG_STATUS_NULL_POINTER = 1,
  PG_STATUS_INVALID_UTF8 = 2,
  PG_STATUS_INVALID_ARGUMENT = 3,
  PG_STATUS_PARSE_ERROR = 4,
  PG_STATUS_IO = 5,
  PG_STATUS_BAD_CHECKPOINT = 6,
  PG_STATUS_BUFFER_TOO_SMALL = 7,
  PG_STATUS_RUNTIME = 8,
} PgStatus;

/**
 * A loaded checkpoint: model weights plus its vocabulary.
 *
 * Handles are not thread-safe; confine each one to a single thread.
 */
typedef struct PgModel PgModel;

/**
 * Generation conditions. A `use_*` flag of zero leaves that property
 * unconditioned (its value is then ignored); a null `pocket_path` means no
 * pocket conditioning.
 */
typedef struct PgConditions {
  double vina;
  double qed;
  double sa;
  double logp;
  uint8_t lipinski;
  uint8_t use_vina;
  uint8_t use_qed;
  uint8_t use_sa;
  uint8_t use_logp;
  uint8_t use_lipinski;
  const char *pocket_path;
} PgConditions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on the calling thread, empty when
 * nothing failed yet. The pointer stays valid until the next failing call
 * on the same thread.
 *
 * # Safety
 * The returned pointer must not be freed or written through.
 */
const char *pg_last_error(void);

/**
 * Loads a checkpoint file and hands back an owned model handle through
 * `out`. Free it with `pg_model_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PgStatus pg_model_load(const char *path, struct PgModel **out);

/**
 * Releases a model handle. Passing null is a no-op.
 *
 * # Safety
 * `m` must be a handle from `pg_model_load` that has not been freed.
 */
void pg_model_free(struct PgModel *m);

/**
 * Model width (embedding dimension). Returns 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle from `pg_model_load`.
 */
uint32_t pg_model_width(const struct PgModel *m);

/**
 * Vocabulary size. Returns 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle from `pg_model_load`.
 */
uint32_t pg_model_vocab_size(const struct PgModel *m);

/**
 * Longest supported token sequence. Returns 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle from `pg_model_load`.
 */
uint32_t pg_model_max_len(const struct PgModel *m);

/**
 * Samples one molecule and writes it as a NUL-terminated SMILES string
 * into `buf`. `needed` always receives the required buffer size in bytes
 * (including the NUL), so a call with `buf_len` 0 sizes the buffer. The
 * same seed always produces the same molecule.
 *
 * `conditions` may be null for unconditional sampling. `temperature` 0
 * picks greedily; `top_k` 0 is treated as 1.
 *
 * # Safety
 * `model` must be a live handle; `buf` must point to `buf_len` writable
 * bytes (null only when `buf_len` is 0); `needed` must be valid.
 */
enum PgStatus pg_sample(const struct PgModel *model,
                        const struct PgConditions *conditions,
                        uint64_t seed,
                        double temperature,
                        uintptr_t top_k,
                        char *buf,
                        uintptr_t buf_len,
                        uintptr_t *needed);

/**
 * Parses and validates a molecule, then writes its five properties (vina
 * surrogate, qed, sa, logp, lipinski) into `out`.
 *
 * # Safety
 * `smiles` must be NUL-terminated; `out` must hold PG_PROPERTY_COUNT
 * doubles.
 */
enum PgStatus pg_properties(const char *smiles, double *out);

/**
 * Writes 1 into `valid` when the molecule parses and passes validation,
 * else 0 (with the reason in `pg_last_error`). The status reports only
 * argument problems.
 *
 * # Safety
 * `smiles` must be NUL-terminated; `valid` must be a valid pointer.
 */
enum PgStatus pg_validate(const char *smiles, int32_t *valid);

/**
 * Condition-relation matrix of the model at the given base conditions:
 * PG_CONDITION_ROWS x PG_CONDITION_ROWS doubles, row-major, into `out`.
 * Unconditioned properties contribute nothing (their rows interact only
 * through the others).
 *
 * # Safety
 * `model` must be a live handle; `out` must hold PG_CONDITION_ROWS *
 * PG_CONDITION_ROWS doubles.
 */
enum PgStatus pg_relation_matrix(const struct PgModel *model,
                                 const struct PgConditions *conditions,
                                 double delta,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PREFIXGEN_H */
