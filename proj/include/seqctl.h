/* C interface to the sequential controlled text generation toolkit.
 *
 * Conventions:
 *  - Every fallible function returns seqctl_status; SEQCTL_OK is 0.
 *  - On failure, seqctl_last_error() returns a message for the most recent
 *    failing call on the calling thread.
 *  - Strings returned through char** out-parameters are heap-allocated; free
 *    them with seqctl_string_free.
 *  - Handles are opaque; free them with the matching *_free function. NULL is
 *    accepted by every *_free.
 *  - Configs are JSON documents. "{}" selects the documented defaults;
 *    seqctl_default_config returns the full default document per kind.
 */
#ifndef SEQCTL_H
#define SEQCTL_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum seqctl_status {
  SEQCTL_OK = 0,
  SEQCTL_INVALID_ARGUMENT = 1,
  SEQCTL_IO = 2,
  SEQCTL_FORMAT = 3,
  SEQCTL_INCOMPATIBLE = 4,
  SEQCTL_RUNTIME = 5
} seqctl_status;

const char* seqctl_version(void);
const char* seqctl_last_error(void);
void seqctl_string_free(char* s);

/* Hex fingerprint of a file's bytes (same digest recorded in manifests). */
seqctl_status seqctl_file_hash(const char* path, char** hex_out);

/* Default config JSON for kind: "synthetic", "lm", "discrim", "infiller",
 * "generate", or "edit". */
seqctl_status seqctl_default_config(const char* kind, char** json_out);

typedef struct seqctl_corpus seqctl_corpus;
typedef struct seqctl_lm seqctl_lm;
typedef struct seqctl_discrim seqctl_discrim;
typedef struct seqctl_infiller seqctl_infiller;
typedef struct seqctl_manifest seqctl_manifest;

/* ---- corpus -------------------------------------------------------------- */

/* Synthetic corpus generation from a spec ("{}" = defaults). Yields the
 * train/dev/test splits sharing one vocabulary and schema. */
seqctl_status seqctl_corpus_generate(const char* spec_json, seqctl_corpus** train_out,
                                     seqctl_corpus** dev_out, seqctl_corpus** test_out);
seqctl_status seqctl_corpus_load(const char* docs_path, const char* vocab_path,
                                 const char* schema_path, seqctl_corpus** out);
seqctl_status seqctl_corpus_save(const seqctl_corpus* corpus, const char* docs_path,
                                 const char* vocab_path, const char* schema_path);
/* Deterministic shuffle-and-cut; ratios must be positive and sum to 1.
 * parts_out must have room for num_ratios handles. */
seqctl_status seqctl_corpus_split(const seqctl_corpus* corpus, const double* ratios,
                                  int num_ratios, uint64_t seed,
                                  seqctl_corpus** parts_out);
/* Serialized prompting corpus for the prompting baseline; variant is
 * "local", "past", or "full". */
seqctl_status seqctl_prompt_corpus(const seqctl_corpus* corpus, const char* variant,
                                   seqctl_corpus** out);
/* Number of documents, or -1 on NULL. */
int seqctl_corpus_size(const seqctl_corpus* corpus);
void seqctl_corpus_free(seqctl_corpus* corpus);

/* ---- training ------------------------------------------------------------ */
/* dev may be NULL. report_json_out may be NULL when the report is not wanted. */

seqctl_status seqctl_lm_train(const seqctl_corpus* train, const seqctl_corpus* dev,
                              const char* config_json, seqctl_lm** out,
                              char** report_json_out);
seqctl_status seqctl_lm_save(const seqctl_lm* lm, const char* path);
seqctl_status seqctl_lm_load(const char* path, seqctl_lm** out);
void seqctl_lm_free(seqctl_lm* lm);

seqctl_status seqctl_discrim_train(const seqctl_corpus* train, const seqctl_corpus* dev,
                                   const seqctl_lm* lm, const char* config_json,
                                   seqctl_discrim** out, char** report_json_out);
seqctl_status seqctl_discrim_save(const seqctl_discrim* disc, const char* path);
seqctl_status seqctl_discrim_load(const char* path, seqctl_discrim** out);
void seqctl_discrim_free(seqctl_discrim* disc);

seqctl_status seqctl_infiller_train(const seqctl_corpus* train,
                                    const seqctl_corpus* dev, const char* config_json,
                                    seqctl_infiller** out, char** report_json_out);
seqctl_status seqctl_infiller_save(const seqctl_infiller* infiller, const char* path);
seqctl_status seqctl_infiller_load(const char* path, seqctl_infiller** out);
void seqctl_infiller_free(seqctl_infiller* infiller);

/* ---- generation, editing, evaluation ------------------------------------- */

/* Decodes one document per plan in plans_path (JSONL: {"headline": str,
 * "tags": [str, ...]}). ref supplies the vocabulary and schema. disc may be
 * NULL for methods "naive" and "prompt"; for "prompt" the lm must be the
 * prompt-conditioned model. Writes documents JSONL to docs_out_path and, when
 * traces_out_path is non-NULL, one decode trace object per line. */
seqctl_status seqctl_generate(const seqctl_lm* lm, const seqctl_discrim* disc,
                              const seqctl_corpus* ref, const char* plans_path,
                              const char* config_json, const char* docs_out_path,
                              const char* traces_out_path);

/* Edits every document in docs_path toward its own tags. The discriminator
 * must be the contextualizer-free editing variant. Per-document RNG derives
 * from config seed + document index. records_out_path (optional) receives one
 * {"doc": i, "records": [...]} object per line. */
seqctl_status seqctl_edit(const seqctl_lm* lm, const seqctl_discrim* edit_disc,
                          const seqctl_infiller* infiller, const seqctl_corpus* ref,
                          const char* docs_path, const char* config_json,
                          const char* docs_out_path, const char* records_out_path);

/* Scores the documents in docs_path. ref supplies vocabulary, schema, the
 * unseen-words reference, and the tag bigram; lm/disc are optional and enable
 * perplexity / label probability; with_oracle enables rule-oracle control
 * accuracy. Writes a MetricsReport JSON and, when csv_out_path is non-NULL, a
 * long-format run/metric/value CSV labeled run_name. */
seqctl_status seqctl_eval(const seqctl_corpus* ref, const seqctl_lm* lm,
                          const seqctl_discrim* disc, const char* docs_path,
                          int with_oracle, const char* run_name,
                          const char* report_out_path, const char* csv_out_path);

/* ---- run manifests ------------------------------------------------------- */

seqctl_status seqctl_manifest_begin(const char* command, const char* config_json,
                                    uint64_t seed, seqctl_manifest** out);
seqctl_status seqctl_manifest_add_input(seqctl_manifest* m, const char* label,
                                        const char* path);
seqctl_status seqctl_manifest_add_checkpoint(seqctl_manifest* m, const char* label,
                                             const char* path);
seqctl_status seqctl_manifest_add_artifact(seqctl_manifest* m, const char* path);
/* Stamps the end timestamp and writes the manifest JSON to path. The handle
 * stays valid until freed. */
seqctl_status seqctl_manifest_finish(seqctl_manifest* m, const char* path);
void seqctl_manifest_free(seqctl_manifest* m);

#ifdef __cplusplus
}
#endif

#endif /* SEQCTL_H */
