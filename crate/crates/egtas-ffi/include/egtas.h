/* C interface to the egtas search library.
 *
 * Conventions:
 *   - every fallible function returns an int status code (EGTAS_OK on
 *     success); egtas_last_error_message() describes the latest failure
 *     on the calling thread
 *   - handles are opaque and must be released with their _free function
 *   - encodings are arrays of 6 size_t genes
 */
#ifndef EGTAS_H
#define EGTAS_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define EGTAS_OK 0
#define EGTAS_ERR_NULL_ARGUMENT 1
#define EGTAS_ERR_INVALID 2
#define EGTAS_ERR_IO 3
#define EGTAS_ERR_UTF8 4
#define EGTAS_ERR_SEARCH 5

typedef struct EgtasTable EgtasTable;
typedef struct EgtasSurrogate EgtasSurrogate;

/* Message for the most recent error on this thread. Borrowed; valid
 * until the next failing call on the same thread. */
const char *egtas_last_error_message(void);

/* The default six-gene operation table. */
EgtasTable *egtas_table_new_default(void);
void egtas_table_free(EgtasTable *table);
int egtas_table_cardinality(const EgtasTable *table, uint64_t *out);

/* genes points at 6 size_t values. */
int egtas_encoding_validate(const EgtasTable *table, const size_t *genes);

/* On success *out_json owns a JSON description of the architecture;
 * release it with egtas_string_free. */
int egtas_decode_json(const EgtasTable *table, const size_t *genes,
                      char **out_json);
void egtas_string_free(char *s);

/* Loads a surrogate model file produced by the CLI or egtas_surrogate_fit. */
int egtas_surrogate_load(const char *path, EgtasSurrogate **out);

/* Cross-validates the surrogate menu on an NDJSON fitness archive and
 * returns the refit winner; writes the model file too when out_path is
 * non-NULL. */
int egtas_surrogate_fit(const char *archive_path, size_t folds, uint64_t seed,
                        const char *out_path, EgtasSurrogate **out);
void egtas_surrogate_free(EgtasSurrogate *s);
int egtas_surrogate_predict(const EgtasSurrogate *surrogate,
                            const size_t *genes, double *out);

/* Genetic search scored by the surrogate; writes the winning genes
 * (6 values) and its predicted metric value. */
int egtas_search(const EgtasSurrogate *surrogate, const EgtasTable *table,
                 size_t population, size_t generations, uint64_t seed,
                 size_t *out_genes, double *out_predicted);

#ifdef __cplusplus
}
#endif

#endif /* EGTAS_H */
